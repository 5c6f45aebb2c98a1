""" Command line interface.

    Every command writes files and prints the path it wrote on standard output; progress and the model fingerprint
    go to standard error, training metrics to `<out>.metrics.log`.  Exit status is 0 on success, 2 on usage errors
    and 1 on any runtime error.

    Option values are taken from the command line first, then from a `--config` file of `key = value` lines, then
    from the built-in defaults.  Without `--seed` the seed comes from MODIFY_SEED, then STYLECAPSULE_SEED, else 0.
"""
import argparse
import logging
import os
import sys
from datetime import datetime, timezone

import torch

from stylecapsule.config import default_seed, read_config_file, seed_everything
from stylecapsule.data import (PROFILES, SyntheticFaceDataset, batches, load_folder, read_image, save_grid,
                               save_image, synth_generate, write_folder)
from stylecapsule.eval import ablate_swap, ablate_xi, diversity_score, eval_fid, frechet_between_sets, write_report
from stylecapsule.nets import PerceptualEmbedder, fingerprint
from stylecapsule.persist import PackageError, load_package, read_manifest, save_package
from stylecapsule.stage1 import Stage1Schedule, encapsulate
from stylecapsule.stage2 import (StylizeConfig, resume_offline, sample_multimodal, stylize_offline, stylize_online,
                                 stylize_test_time_many)
from stylecapsule.style_model import Architecture, derive_seed

RUNTIME_ERRORS = (PackageError, ValueError, RuntimeError, OSError, KeyError, TypeError)
TRUE_WORDS = ('1', 'true', 'yes', 'on')


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument('--seed', type=int, default=None, help='Run seed (default: $MODIFY_SEED, $STYLECAPSULE_SEED or 0).')
    p.add_argument('--config', help='File of key = value defaults.')
    p.add_argument('-v', '--verbose', action='store_true', help='Debug logging.')


def _add_architecture(p: argparse.ArgumentParser):
    p.add_argument('--resolution', type=int, default=64)
    p.add_argument('--layer-dim', type=int, default=512, help='Width D of every latent row.')
    p.add_argument('--noise-dim', type=int, default=512)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog='stylecapsule', description='Two-stage model-driven face stylization.')
    sub = parser.add_subparsers(dest='command', required=True)
    commands = {}

    p = commands['encapsulate'] = sub.add_parser('encapsulate', help='Train a style model on style images only.')
    p.add_argument('--style-dir', required=True)
    p.add_argument('--out', required=True, help='Package directory to write.')
    _add_architecture(p)
    p.add_argument('--xi', type=int, default=None, help='Fusion index (default: round(L/3)).')
    p.add_argument('--iterations', type=int, default=200)
    p.add_argument('--boundary', type=int, default=None, help='First phase 2 iteration (default: 3/4 of the run).')
    p.add_argument('--batch-size', type=int, default=4)
    p.add_argument('--lr', type=float, default=1e-4)
    p.add_argument('--freeze-decoder', action='store_true', help='Keep the decoder fixed during phase 2.')
    p.add_argument('--no-critic', action='store_true', help='Leave the critic out of the package.')
    p.add_argument('--checkpoint-dir')
    p.add_argument('--resume', help='Checkpoint to continue from.')
    _add_common(p)

    p = commands['stylize-train'] = sub.add_parser('stylize-train', help='Adapt the encoder on source images.')
    p.add_argument('--pkg', required=True)
    p.add_argument('--source-dir', required=True)
    p.add_argument('--mode', choices=('offline', 'online', 'test-time'), default='offline')
    p.add_argument('--steps', type=int, default=None)
    p.add_argument('--batch-size', type=int, default=None)
    p.add_argument('--lr', type=float, default=1e-4)
    p.add_argument('--out', required=True)
    p.add_argument('--checkpoint-dir')
    p.add_argument('--resume', help='Stylization checkpoint to continue from (offline mode).')
    _add_common(p)

    p = commands['stylize'] = sub.add_parser('stylize', help='Test-time adaptation on individual images.')
    p.add_argument('--pkg', required=True)
    p.add_argument('--input', action='append', required=True)
    p.add_argument('--steps', type=int, default=50)
    p.add_argument('--lr', type=float, default=1e-4)
    p.add_argument('--cumulative', action='store_true', help='Carry adaptation over from one input to the next.')
    p.add_argument('--out', required=True, help='Output PNG, or a directory when several inputs are given.')
    _add_common(p)

    p = commands['sample'] = sub.add_parser('sample', help='Grid of outputs for several noise seeds.')
    p.add_argument('--pkg', required=True)
    p.add_argument('--input', action='append', required=True)
    p.add_argument('--noise-seeds', type=_int_list, default='0,1,2')
    p.add_argument('--out-grid', required=True)
    _add_common(p)

    p = commands['ablate'] = sub.add_parser('ablate', help='Swapping-loss or fusion-index ablation.')
    p.add_argument('--which', choices=('swap', 'xi'), required=True)
    p.add_argument('--style-dir', required=True)
    p.add_argument('--source-dir', required=True)
    _add_architecture(p)
    p.add_argument('--xi-list', type=_int_list, default=None)
    p.add_argument('--iterations', type=int, default=200)
    p.add_argument('--boundary', type=int, default=None)
    p.add_argument('--batch-size', type=int, default=4)
    p.add_argument('--steps', type=int, default=100, help='Offline stylization steps per run (xi only).')
    p.add_argument('--seeds', type=_int_list, default='0,1,2')
    p.add_argument('--out', required=True, help='Report file.')
    p.add_argument('--grid-dir')
    _add_common(p)

    p = commands['eval'] = sub.add_parser('eval', help='Fréchet distance of stylized sources to a reference set.')
    p.add_argument('--pkg', required=True)
    p.add_argument('--source-dir', required=True)
    p.add_argument('--reference-dir', required=True)
    p.add_argument('--out', help='Report file (default: standard output).')
    _add_common(p)

    p = commands['synth'] = sub.add_parser('synth', help='Write a folder of synthetic faces.')
    p.add_argument('--out', required=True)
    p.add_argument('--count', type=int, default=8)
    p.add_argument('--resolution', type=int, default=64)
    p.add_argument('--profile', choices=PROFILES, default='photo')
    _add_common(p)

    p = commands['inspect'] = sub.add_parser('inspect', help='Summarize a package.')
    p.add_argument('--pkg', required=True)
    _add_common(p)
    return parser, commands


def apply_config(parser: argparse.ArgumentParser, values: dict[str, str]):
    """ Install config file values as parser defaults; unknown keys are an error. """
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ('help', 'config'):
            parser.error(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in TRUE_WORDS
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [value]
        else:
            defaults[key] = value
        # a config file value satisfies a required flag
        action.required = False
    parser.set_defaults(**defaults)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser, commands = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('--config')
    known, _ = pre.parse_known_args(argv)
    if known.config and argv and argv[0] in commands:
        command = commands[argv[0]]
        try:
            values = read_config_file(known.config)
        except (OSError, ValueError) as e:
            command.error(str(e))
        apply_config(command, values)
    args = parser.parse_args(argv)
    if args.command == 'stylize-train':
        if args.mode == 'test-time':
            commands['stylize-train'].error("test-time adaptation runs per input; use the `stylize` command")
        if args.resume and args.mode != 'offline':
            commands['stylize-train'].error("--resume is only supported in offline mode")
    if args.seed is None:
        try:
            args.seed = default_seed()
        except ValueError as e:
            commands[args.command].error(str(e))
    return args


def _effective_config(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ('config', 'verbose')}


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


def _metrics_log(out: str) -> logging.Handler:
    handler = logging.FileHandler(f'{os.path.normpath(out)}.metrics.log', mode='w', delay=True)
    handler.setFormatter(logging.Formatter('%(message)s'))
    metrics = logging.getLogger('stylecapsule.metrics')
    metrics.setLevel(logging.INFO)
    metrics.propagate = False
    metrics.addHandler(handler)
    return handler


def _report_fingerprint(value: str):
    print(f'fingerprint={value}', file=sys.stderr)


def cmd_encapsulate(args) -> str:
    style = load_folder(args.style_dir, args.resolution)
    schedule = Stage1Schedule.toy(args.iterations, args.boundary, batch_size=args.batch_size,
                                  learning_rate=args.lr, phase2_freeze_decoder=args.freeze_decoder)
    arch = Architecture.for_resolution(args.resolution, args.layer_dim, args.xi, args.noise_dim)
    model = encapsulate(style, schedule, args.seed, arch, checkpoint_dir=args.checkpoint_dir,
                        resume_from=args.resume, keep_critic=not args.no_critic, progress=True)
    model.history['config'] = _effective_config(args)
    save_package(model, args.out, _timestamp())
    _report_fingerprint(model.fingerprint())
    return args.out


def cmd_stylize_train(args) -> str:
    model = load_package(args.pkg)
    source = load_folder(args.source_dir, model.architecture.resolution)
    batch_size = args.batch_size if args.batch_size is not None else (1 if args.mode == 'online' else 4)
    cfg = StylizeConfig(mode=args.mode, steps=args.steps, batch_size=batch_size, learning_rate=args.lr)
    if args.resume:
        adapted = resume_offline(args.resume, source, args.checkpoint_dir, progress=True)
    elif cfg.mode == 'offline':
        adapted = stylize_offline(model, source, cfg, args.seed, args.pkg, args.checkpoint_dir, progress=True)
    else:
        stream = batches(source, 1, derive_seed(args.seed, 'x'))
        adapted = stylize_online(model, stream, cfg, args.seed, progress=True)
    adapted.history['config'] = _effective_config(args)
    save_package(adapted, args.out, _timestamp())
    _report_fingerprint(adapted.fingerprint())
    return args.out


def cmd_stylize(args) -> list[str]:
    model = load_package(args.pkg)
    res = model.architecture.resolution
    images = [read_image(p, res) for p in args.input]
    cfg = StylizeConfig(mode='test_time', steps=args.steps, learning_rate=args.lr, cumulative=args.cumulative)
    results = stylize_test_time_many(model, images, cfg, args.seed, progress=True)
    if len(results) == 1:
        paths = [args.out]
    else:
        os.makedirs(args.out, exist_ok=True)
        paths = [os.path.join(args.out, f'{os.path.splitext(os.path.basename(p))[0]}.png') for p in args.input]
    for path, (_, image) in zip(paths, results):
        save_image(image, path)
    _report_fingerprint(model.fingerprint())
    return paths


def cmd_sample(args) -> str:
    model = load_package(args.pkg)
    x = torch.stack([read_image(p, model.architecture.resolution) for p in args.input])
    outs = sample_multimodal(model, x, args.noise_seeds)
    save_grid([[x[i]] + [out[i] for out in outs] for i in range(x.shape[0])], args.out_grid)
    if len(args.noise_seeds) >= 2:
        print(f'diversity={diversity_score(model, x, args.noise_seeds):.6g}', file=sys.stderr)
    _report_fingerprint(model.fingerprint())
    return args.out_grid


def cmd_ablate(args) -> str:
    style = load_folder(args.style_dir, args.resolution)
    source = load_folder(args.source_dir, args.resolution)
    schedule = Stage1Schedule.toy(args.iterations, args.boundary, batch_size=args.batch_size)
    arch = Architecture.for_resolution(args.resolution, args.layer_dim, None, args.noise_dim)
    if args.which == 'swap':
        report = ablate_swap(style, source, schedule, args.seeds, arch, out_dir=args.grid_dir)
    else:
        n = arch.latent.num_layers
        xi_list = args.xi_list or sorted({max(1, round(n * k / 6)) for k in range(1, 6)})
        stylize_cfg = StylizeConfig(mode='offline', steps=args.steps, batch_size=args.batch_size)
        report = ablate_xi(style, source, xi_list, schedule, stylize_cfg, args.seeds, arch, out_dir=args.grid_dir)
    embedder_print = fingerprint(PerceptualEmbedder(arch.perceptual))
    report['embedder_fingerprint'] = embedder_print
    write_report(args.out, report)
    _report_fingerprint(embedder_print)
    return args.out


def cmd_eval(args) -> str | None:
    model = load_package(args.pkg)
    res = model.architecture.resolution
    source = load_folder(args.source_dir, res)
    reference = load_folder(args.reference_dir, res)
    embedder = model.embedders()[0]
    stylized = eval_fid(model, source, reference, embedder)
    baseline = frechet_between_sets(source.images, reference.images, embedder)
    report = {
        'fid_stylized': stylized.value,
        'fid_source': baseline.value,
        'count_source': stylized.counts[0],
        'count_reference': stylized.counts[1],
        'diagonal_loading': int(stylized.diagonal_loading),
        'embedder_fingerprint': stylized.embedder_fingerprint,
        'fingerprint': model.fingerprint(),
    }
    _report_fingerprint(model.fingerprint())
    if args.out:
        write_report(args.out, report)
        return args.out
    for k, v in report.items():
        print(f'{k}={v}')
    return None


def cmd_synth(args) -> str:
    spec = SyntheticFaceDataset(args.seed, args.count, args.resolution, args.profile)
    write_folder(synth_generate(spec), args.out)
    return args.out


def cmd_inspect(args) -> None:
    manifest = read_manifest(args.pkg)
    model = load_package(args.pkg)
    latent = manifest['latent']
    print(f"format_version={manifest['format_version']}")
    print(f"resolution={manifest['architecture']['resolution']}")
    print(f"num_layers={latent['num_layers']} layer_dim={latent['layer_dim']} fusion_index={latent['fusion_index']}")
    print(f"networks={','.join(manifest['networks'])}")
    print(f"iteration={manifest['iteration']} seed={manifest['seed']}")
    print(f"parameters={len(manifest['parameters'])}")
    print(f"canonical_checksum={manifest['canonical_checksum']}")
    history = manifest.get('history', {})
    if 'stage1' in history:
        print(f"stage1_iterations={history['stage1'].get('final_iteration')}")
    if 'stage2' in history:
        print(f"stage2_mode={history['stage2']['mode']} stage2_steps={history['stage2'].get('steps')}")
    print(f'fingerprint={model.fingerprint()}')


COMMANDS = {
    'encapsulate': cmd_encapsulate,
    'stylize-train': cmd_stylize_train,
    'stylize': cmd_stylize,
    'sample': cmd_sample,
    'ablate': cmd_ablate,
    'eval': cmd_eval,
    'synth': cmd_synth,
    'inspect': cmd_inspect,
}
TRAINING_COMMANDS = ('encapsulate', 'stylize-train', 'ablate')


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format='%(levelname)s %(message)s')
    seed_everything(args.seed)
    handler = _metrics_log(args.out) if args.command in TRAINING_COMMANDS else None
    try:
        written = COMMANDS[args.command](args)
    except RUNTIME_ERRORS as e:
        print(f'error: {e}', file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            logging.getLogger('stylecapsule.metrics').removeHandler(handler)
            handler.close()
    for path in [written] if isinstance(written, str) else (written or []):
        print(path)
    return 0
