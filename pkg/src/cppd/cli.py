"""Command-line entry point: ``cppd <subcommand> [flags]``.

Subcommands: gen-data, labels, train, eval, bench, grad-check, dump-attn.
Log verbosity comes from ``CPPD_LOG`` (quiet, info, debug). Failures exit
with status 1 and a one-line ``error:`` message on stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import VARIANTS, ConfigError, config_to_text, load_config
from .vocab import ALNUM36, LabelError, build_charset, dump_labels, load_charset

log = logging.getLogger("cppd")

_LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(RuntimeError):
    pass


def _setup_logging() -> None:
    level = os.environ.get("CPPD_LOG", "info").lower()
    if level not in _LOG_LEVELS:
        raise CliError(f"CPPD_LOG must be one of {', '.join(_LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=_LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def _charset_from(args):
    if getattr(args, "charset_file", None):
        return load_charset(args.charset_file)
    return build_charset(args.charset or ALNUM36)


def _cfg(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.variant:
        variants = args.variant if isinstance(args.variant, list) else [args.variant]
        if len(variants) == 1:
            overrides.append(f"model.variant={variants[0]}")
    return load_config(args.config, overrides)


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def cmd_gen_data(args) -> int:
    from .synthgen import AugmentConfig, build_atlas, generate_dataset

    cfg = _cfg(args)
    charset = _charset_from(args)
    if not args.out:
        raise CliError("gen-data needs --out DIR")
    len_max = args.len_max if args.len_max is not None else cfg.model.L - 1
    atlas = build_atlas(charset, glyph_h=args.glyph_h, glyph_w=args.glyph_w, atlas_seed=args.atlas_seed)
    manifest = generate_dataset(args.n, charset, args.len_min, len_max, cfg.encoder.H, cfg.encoder.W,
                                _seed(args), args.augment, args.out, atlas=atlas,
                                augment_cfg=AugmentConfig() if args.augment else None)
    print(f"wrote {args.n} samples to {manifest.parent}")
    return 0


def cmd_labels(args) -> int:
    charset = _charset_from(args)
    for line in dump_labels(args.text, charset, args.max_len):
        print(line)
    return 0


def cmd_train(args) -> int:
    import torch

    from .train import train

    cfg = _cfg(args)
    if not args.out:
        raise CliError("train needs --out DIR")
    torch.manual_seed(cfg.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .io_utils import atomic_write_text

    atomic_write_text(out / "config.txt", config_to_text(cfg))
    result = train(cfg, args.train_data, args.eval_data, out)
    print(f"best eval_acc {result.best_acc:.4f} checkpoint {result.checkpoint} metrics {result.metrics_path}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .synthgen import load_dataset
    from .train import evaluate
    import torch

    torch.set_num_threads(1)
    model = load_checkpoint(args.checkpoint)
    records = load_dataset(args.data, model.cfg.charset)
    acc = evaluate(model, records)
    correct = round(acc * len(records))
    print(f"accuracy {acc:.4f} ({correct}/{len(records)}) variant {model.cfg.variant}")
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_lengths, length_images
    from .checkpoint import load_checkpoint
    from .variants import build_model

    models = {}
    if args.checkpoint:
        for path in args.checkpoint:
            m = load_checkpoint(path)
            name = m.cfg.variant
            if name in models:
                raise CliError(f"two checkpoints for variant {name!r}")
            models[name] = m
        if args.variant:
            missing = [v for v in args.variant if v not in models]
            if missing:
                raise CliError(f"no checkpoint given for variant(s) {', '.join(missing)}")
            models = {v: models[v] for v in args.variant}
    else:
        cfg = _cfg(args)
        charset = _charset_from(args)
        for v in args.variant or ["ar", "cppd"]:
            mcfg = cfg.model_config(charset).replace(variant=v)
            models[v] = build_model(mcfg, _seed(args))
    cfgs = [m.cfg for m in models.values()]
    first = cfgs[0]
    if any((c.H, c.W, c.symbols) != (first.H, first.W, first.symbols) for c in cfgs):
        raise CliError("benchmarked models must share image size and charset")
    lengths = [int(x) for x in args.lengths.split(",")]
    too_long = [n for n in lengths if n > min(c.L for c in cfgs) - 1]
    if too_long:
        raise CliError(f"lengths {too_long} exceed model capacity L-1")
    images = length_images(first.charset, first.H, first.W, lengths, args.n, _seed(args))
    report = bench_lengths(models, images, reps=args.reps, warmup_reps=args.warmup_reps)
    names = list(models)
    baseline = next((n for n in names if VARIANTS.index(n) < 4), None)
    target = next((n for n in names if n != baseline), None)
    print(report.format_table(baseline, target) if baseline and target else report.format_table())
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import check_losses, check_tiny_cppd

    results = check_losses(instances=args.instances, seed=_seed(args))
    results.append(check_tiny_cppd(images=args.images, seed=_seed(args)))
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_dump_attn(args) -> int:
    from .attnviz import dump_attention
    from .checkpoint import load_checkpoint
    from .synthgen import decode_pgm

    if not args.out:
        raise CliError("dump-attn needs --out DIR")
    model = load_checkpoint(args.checkpoint)
    try:
        raw = Path(args.image).read_bytes()
    except OSError as e:
        raise CliError(f"cannot read image {args.image}: {e.strerror}") from None
    image = decode_pgm(raw, name=args.image)
    if image.shape != (model.cfg.H, model.cfg.W):
        raise CliError(f"image is {image.shape[0]}x{image.shape[1]}, model expects {model.cfg.H}x{model.cfg.W}")
    paths = dump_attention(model, image, args.out)
    print(f"wrote {len(paths)} attention maps to {args.out}")
    return 0


def _shared(multi_variant: bool = False) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--seed", type=int, help="seed for every random draw (default 0)")
    if multi_variant:
        p.add_argument("--variant", action="append", choices=VARIANTS, help="decoder variant (repeatable)")
    else:
        p.add_argument("--variant", choices=VARIANTS, help="decoder variant")
    p.add_argument("--out", metavar="DIR", help="output directory")
    return p


def _charset_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--charset", help="symbols as one string (default: 0-9a-z)")
    g.add_argument("--charset-file", metavar="PATH", help="charset.txt, one symbol per line")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cppd", description="Parallel text-recognition decoders on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[_shared()], help="render a synthetic dataset")
    _charset_flags(p)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--len-min", type=int, default=1)
    p.add_argument("--len-max", type=int, help="default: model.L - 1")
    p.add_argument("--augment", action="store_true", help="rotation, blur and noise")
    p.add_argument("--glyph-h", type=int, default=12)
    p.add_argument("--glyph-w", type=int, default=7)
    p.add_argument("--atlas-seed", type=int, default=0, help="glyph shapes; keep fixed across splits")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("labels", parents=[_shared()], help="print the CC/CO/REC/ACE encodings of a string")
    p.add_argument("text")
    _charset_flags(p)
    p.add_argument("-L", "--max-len", type=int, default=25, help="label slots L (default 25)")
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("train", parents=[_shared()], help="train a model")
    p.add_argument("--train-data", required=True, metavar="DIR")
    p.add_argument("--eval-data", required=True, metavar="DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[_shared()], help="word accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[_shared(multi_variant=True)], help="single-thread batch-1 latency")
    _charset_flags(p)
    p.add_argument("--checkpoint", action="append", metavar="PATH",
                   help="checkpoint to time (repeatable); without it, freshly initialized models are built")
    p.add_argument("--lengths", default="2,8,16,24", help="comma-separated text lengths")
    p.add_argument("--n", type=int, default=300, help="images per length")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--warmup-reps", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", parents=[_shared()], help="finite-difference gradient checks")
    p.add_argument("--instances", type=int, default=20, help="random instances per loss")
    p.add_argument("--images", type=int, default=5, help="random images for the end-to-end check")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-attn", parents=[_shared()], help="write attention maps as PGM files")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--image", required=True, metavar="PATH", help="binary PGM matching the model input size")
    p.set_defaults(func=cmd_dump_attn)
    return parser


def _known_errors() -> tuple[type[BaseException], ...]:
    """Error types worth a one-line diagnostic; modules not yet imported contribute nothing."""
    errors: list[type[BaseException]] = [CliError, ConfigError, LabelError, ValueError]
    for mod, name in (("cppd.checkpoint", "CheckpointError"), ("cppd.synthgen", "DatasetError"),
                      ("cppd.train", "TrainingError")):
        if mod in sys.modules:
            errors.append(getattr(sys.modules[mod], name))
    return tuple(errors)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        if isinstance(e, _known_errors()):
            print(f"error: {e}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
