""" Run configuration shared by the command line tools: config files, the seed fallback and global seeding. """
import logging
import os
import random

import numpy as np
import torch

SEED_ENVS = ('MODIFY_SEED', 'STYLECAPSULE_SEED')


def read_config_file(path: str) -> dict[str, str]:
    """ Parse a plain `key = value` file.

        Blank lines and text after `#` are ignored; dashes in keys become underscores so keys may be written like
        the command line flags.

        Raises:
            ValueError: A non-blank line without `=`.
    """
    values = {}
    with open(path) as hndl:
        for lineno, line in enumerate(hndl, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {line!r}.")
            key, value = (s.strip() for s in line.split('=', 1))
            values[key.lstrip('-').replace('-', '_')] = value
    return values


def default_seed(fallback: int = 0) -> int:
    """ Seed from the first of MODIFY_SEED, STYLECAPSULE_SEED that is set, else fallback. """
    for name in SEED_ENVS:
        raw = os.environ.get(name)
        if raw is None or raw.strip() == '':
            continue
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{name} must be an integer, got {raw!r}.")
    return fallback


def seed_everything(seed: int):
    """ Seed the global generators as well; library code draws only from explicit generators. """
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    random.seed(seed)
    logging.debug(f'Seeded global generators with {seed=}.')
