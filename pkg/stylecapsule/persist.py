""" Style model packages and training checkpoints.

    A package is a directory:

        manifest.json          human-readable index, keys sorted, two-space indent
        weights/<name>.bin     one blob per parameter, little-endian float32, row-major

    The manifest holds the format version, the architecture, the latent configuration, seed, iteration, the model
    history (schedule, stage 2 decisions, effective run configuration) and one entry per parameter with its shape,
    blob file and sha256.  canonical_checksum covers the parameter entries only; the optional `created` timestamp
    is the one field that varies between two saves of the same model.

    A checkpoint is a package plus training_state.pt (optimizer moments, generator state, iteration).  A checkpoint
    may hold a subset of the networks: stylization checkpoints keep only the encoder and critic they train and refer
    to the frozen networks by source package path and checksum.  Such a partial checkpoint loads only through
    load_checkpoint.
"""
import hashlib
import json
import logging
import os
import shutil
from typing import Iterable

import numpy as np
import torch

from stylecapsule.nets import tensor_bytes
from stylecapsule.style_model import Architecture, StyleModel

FORMAT_VERSION = '1.0'
MANIFEST = 'manifest.json'
WEIGHTS_DIR = 'weights'
TRAINING_STATE = 'training_state.pt'
PORTABLE_NETWORKS = ('encoder', 'decoder', 'remapper')
_IMAGE_MAGIC = (b'\x89PNG\r\n\x1a\n', b'\xff\xd8\xff', b'GIF8')


def _canonical_checksum(entries: list[dict]) -> str:
    h = hashlib.sha256()
    for e in entries:
        h.update(f"{e['name']}:{','.join(map(str, e['shape']))}:{e['sha256']};".encode())
    return h.hexdigest()


def save_package(model: StyleModel, path: str, timestamp: str | None = None, networks: Iterable[str] | None = None):
    """ Write model to a package directory, replacing any previous package there.

        The package is assembled in a sibling temporary directory.  An existing package is moved aside, the new one
        moved into place, and only then is the old one deleted; if the swap fails the old package is put back.

        Args:
            model (StyleModel): Model to save.
            path (str): Package directory.
            timestamp (str): Optional creation time recorded in the manifest's `created` field.
            networks (list): Networks to store, in model order; default all of them.
        Raises:
            ValueError: networks names a network the model does not have.
    """
    path = os.path.normpath(path)
    available = list(model.networks())
    if networks is None:
        selected = available
    else:
        wanted = set(networks)
        if wanted - set(available):
            raise ValueError(f"Cannot store networks {sorted(wanted - set(available))}; the model has {available}.")
        selected = [n for n in available if n in wanted]
    tmp = f'{path}.tmp-{os.getpid()}'
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(os.path.join(tmp, WEIGHTS_DIR))
    entries = []
    for name, t in model.state_dict().items():
        if name.split('.', 1)[0] not in selected:
            continue
        data = tensor_bytes(t)
        fname = f'{WEIGHTS_DIR}/{name}.bin'
        with open(os.path.join(tmp, fname), 'wb') as hndl:
            hndl.write(data)
        entries.append({'name': name, 'shape': list(t.shape), 'file': fname,
                        'sha256': hashlib.sha256(data).hexdigest()})
    manifest = {
        'format_version': FORMAT_VERSION,
        'architecture': model.architecture.to_dict(),
        'latent': model.latent.to_dict(),
        'networks': selected,
        'seed': model.seed,
        'iteration': model.iteration,
        'history': model.history,
        'parameters': entries,
        'canonical_checksum': _canonical_checksum(entries),
    }
    if timestamp is not None:
        manifest['created'] = timestamp
    with open(os.path.join(tmp, MANIFEST), 'w') as hndl:
        hndl.write(json.dumps(manifest, sort_keys=True, indent=2))
        hndl.write('\n')
    old = None
    if os.path.exists(path):
        old = f'{path}.old-{os.getpid()}'
        if os.path.exists(old):
            shutil.rmtree(old)
        os.replace(path, old)
    try:
        os.replace(tmp, path)
    except OSError:
        if old is not None:
            os.replace(old, path)
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if old is not None:
        shutil.rmtree(old)
    logging.debug(f'Saved package {path} ({len(entries)} parameters).')


def read_manifest(path: str) -> dict:
    try:
        with open(os.path.join(path, MANIFEST)) as hndl:
            manifest = json.load(hndl)
    except FileNotFoundError:
        raise PackageError(f"No package manifest in {path!r}.")
    except json.JSONDecodeError as e:
        raise PackageError(f"Package manifest in {path!r} is not valid JSON: {e}")
    version = str(manifest.get('format_version', ''))
    if version.split('.')[0] != FORMAT_VERSION.split('.')[0]:
        raise VersionMismatch(f"Package format {version!r} is not supported (expected {FORMAT_VERSION}).")
    return manifest


def _check_entries(model: StyleModel, entries: list[dict], networks: Iterable[str]):
    """ Names and shapes in the manifest must match the listed networks of the architecture exactly, both ways. """
    networks = set(networks)
    expected = {name: list(t.shape) for name, t in model.state_dict().items() if name.split('.', 1)[0] in networks}
    seen = set()
    for e in entries:
        name = e['name']
        if name not in expected:
            raise ParameterMismatch(name, f"Parameter {name!r} is not part of the stored networks.")
        if name in seen:
            raise ParameterMismatch(name, f"Parameter {name!r} appears more than once.")
        seen.add(name)
        if list(e['shape']) != expected[name]:
            raise ParameterMismatch(name, f"Parameter {name!r} has shape {e['shape']}, architecture expects "
                                          f"{expected[name]}.")
    for name in expected:
        if name not in seen:
            raise ParameterMismatch(name, f"Parameter {name!r} is missing from the package.")


def load_package(path: str, expected_architecture: Architecture | None = None, partial: bool = False) -> StyleModel:
    """ Read a package written by save_package.

        Args:
            path (str): Package directory.
            expected_architecture (Architecture): When given, the package must hold exactly this architecture.
            partial (bool): Accept a package without encoder, decoder or remapper; those networks keep their
                seeded initialisation.
        Returns:
            StyleModel: Model whose forward outputs are bitwise equal to the saved model's.
        Raises:
            VersionMismatch: Unsupported format major version.
            PartialPackage: The package lacks a portable network and partial is off.
            ParameterMismatch: Missing, extra or reshaped parameter; names the first offending parameter.
            ChecksumMismatch: A blob does not match its recorded sha256 or length.
    """
    manifest = read_manifest(path)
    arch = Architecture.from_dict(manifest['architecture'])
    networks = list(manifest.get('networks', PORTABLE_NETWORKS))
    unknown = set(networks) - {*PORTABLE_NETWORKS, 'critic'}
    if unknown:
        raise PackageError(f"Package {path!r} lists unknown networks {sorted(unknown)}.")
    missing = [n for n in PORTABLE_NETWORKS if n not in networks]
    if missing and not partial:
        raise PartialPackage(f"{path!r} holds only {', '.join(networks)}; it is a training checkpoint, not a "
                             f"package (missing {', '.join(missing)}).")
    with_critic = 'critic' in networks
    model = StyleModel.build(expected_architecture or arch, int(manifest.get('seed', 0)), with_critic=with_critic)
    entries = manifest['parameters']
    _check_entries(model, entries, networks)
    if _canonical_checksum(entries) != manifest.get('canonical_checksum'):
        raise ChecksumMismatch(f"Canonical checksum of {path!r} does not match its parameter entries.")

    state = {}
    for e in entries:
        with open(os.path.join(path, e['file']), 'rb') as hndl:
            data = hndl.read()
        if len(data) != 4 * int(np.prod(e['shape'], dtype=np.int64)):
            raise ChecksumMismatch(f"Blob for {e['name']!r} holds {len(data)} bytes, shape {e['shape']} needs "
                                   f"{4 * int(np.prod(e['shape'], dtype=np.int64))}.")
        if hashlib.sha256(data).hexdigest() != e['sha256']:
            raise ChecksumMismatch(f"Blob for {e['name']!r} fails its sha256 check.")
        state[e['name']] = torch.from_numpy(np.frombuffer(data, dtype='<f4').astype(np.float32).reshape(e['shape']))
    model.load_state_dict(state, networks)
    model.iteration = int(manifest.get('iteration', 0))
    model.history = manifest.get('history', {})
    return model


def save_checkpoint(path: str, model: StyleModel, training_state: dict, timestamp: str | None = None,
                    networks: Iterable[str] | None = None):
    """ Save a package of the given networks plus the trainer's state.

        training_state must hold only tensors and plain values.
    """
    save_package(model, path, timestamp, networks)
    torch.save(training_state, os.path.join(path, TRAINING_STATE))
    logging.info(f'Checkpoint written to {path} at iteration {model.iteration}.')


def load_checkpoint(path: str, expected_architecture: Architecture | None = None) -> tuple[StyleModel, dict]:
    model = load_package(path, expected_architecture, partial=True)
    state_path = os.path.join(path, TRAINING_STATE)
    if not os.path.exists(state_path):
        raise PackageError(f"{path!r} is a package without training state, not a checkpoint.")
    return model, torch.load(state_path, weights_only=True)


def scan_for_images(path: str) -> list[str]:
    """ Files under path whose content starts with an image signature. """
    found = []
    for root, _, files in os.walk(path):
        for n in files:
            with open(os.path.join(root, n), 'rb') as hndl:
                head = hndl.read(8)
            if any(head.startswith(m) for m in _IMAGE_MAGIC):
                found.append(os.path.join(root, n))
    return found


class PackageError(Exception):
    """ Indicates an unreadable or inconsistent package. """
    pass


class VersionMismatch(PackageError):
    """ Indicates a package format this loader does not support. """
    pass


class PartialPackage(PackageError):
    """ Indicates a checkpoint holding only some networks, read as a complete package. """
    pass


class ParameterMismatch(PackageError):
    """ Indicates a parameter that is missing, extra, or shaped differently from the architecture. """
    def __init__(self, name: str, message: str):
        super().__init__(message)
        self.name = name


class ChecksumMismatch(PackageError):
    """ Indicates weight bytes that do not match the manifest. """
    pass
