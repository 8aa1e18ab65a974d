"""``improv`` command line: train, infer, eval, ablate, gradcheck, gridgen.

Exit codes: 0 ok, 2 configuration, 3 I/O, 4 malformed data, 5 numeric check.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("improv")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def resolve_seed(flag: Optional[int]) -> int:
    """--seed, else $IMPROV_SEED, else 0."""
    if flag is not None:
        return flag
    env = os.environ.get("IMPROV_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"IMPROV_SEED must be an integer, got {env!r}", EXIT_CONFIG)


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    from .config import ConfigError, load_config
    from .trainer import IngestionError, ManifestCorpus, run_training

    try:
        cfg = load_config(args.config)
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v)
        if args.seed is not None:
            cfg.set("seed", str(args.seed))
        elif "seed" not in cfg.explicit:
            cfg.set("seed", str(resolve_seed(None)))
        if args.out:
            cfg.set("out_dir", args.out)
        cfg.validate()
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG)

    out = Path(cfg.paths.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.txt").write_text(cfg.dumps())
    except OSError as exc:
        raise CliError(f"cannot write output directory {out}: {exc}", EXIT_IO)

    corpus = None
    if cfg.paths.manifest:
        try:
            corpus = ManifestCorpus(cfg.paths.manifest)
        except IngestionError as exc:
            from .ppm import ImageFormatError

            code = EXIT_DATA if isinstance(exc.__cause__, ImageFormatError) else EXIT_IO
            raise CliError(str(exc), code)
    model_seed = None if cfg.paths.model_seed < 0 else cfg.paths.model_seed
    resume = cfg.paths.resume or None
    try:
        trainer = run_training(cfg.train, cfg.model, corpus, out, model_seed=model_seed, resume=resume)
    except OSError as exc:
        raise CliError(f"I/O failure during training: {exc}", EXIT_IO)
    print(f"trained {trainer.step} steps -> {out / 'final.impv'}")
    return EXIT_OK


# ---------------------------------------------------------------- infer


def _read(path):
    from .ppm import ImageFormatError, read_image

    try:
        return read_image(path)
    except ImageFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_DATA)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO)


def _load_model(path):
    from .checkpoint import CheckpointError, load_model

    try:
        return load_model(path)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_DATA)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}", EXIT_IO)


def example_pairs(directory) -> list[tuple[Path, Path]]:
    """``*_input.<ext>`` files paired with ``*_output.<ext>``, sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"examples directory not found: {d}", EXIT_IO)
    pairs = []
    for inp in sorted(d.glob("*_input.*")):
        stem = inp.name[: -len("_input" + inp.suffix)]
        outs = sorted(d.glob(f"{stem}_output.*"))
        if not outs:
            raise CliError(f"{inp} has no matching {stem}_output file", EXIT_DATA)
        pairs.append((inp, outs[0]))
    return pairs


def _check_square(img, path, side=None):
    h, w = img.shape[:2]
    if h != w or (side is not None and h != side):
        want = f"{side}x{side}" if side else "square"
        raise CliError(f"{path}: image is {w}x{h}, expected {want}", EXIT_DATA)


def cmd_infer(args) -> int:
    from .ppm import write_ppm
    from .prompting import CapacityError, arrange_grid, inpaint

    model = _load_model(args.checkpoint)
    query = _read(args.query)
    _check_square(query, args.query)
    examples = []
    if args.examples:
        for ip, op in example_pairs(args.examples):
            x, y = _read(ip), _read(op)
            _check_square(x, ip, query.shape[0])
            _check_square(y, op, query.shape[0])
            examples.append((x, y))
    grid = tuple(args.grid) if args.grid else None
    try:
        bundle = arrange_grid(examples, query, grid=grid, order=args.order).with_text(args.text or "")
    except (CapacityError, ValueError) as exc:
        raise CliError(str(exc), EXIT_DATA)
    out = inpaint(model, bundle)
    d = Path(args.out)
    try:
        d.mkdir(parents=True, exist_ok=True)
        write_ppm(d / "prompt.ppm", bundle.image)
        write_ppm(d / "grid.ppm", out)
        write_ppm(d / "answer.ppm", bundle.answer(out))
    except OSError as exc:
        raise CliError(f"cannot write outputs to {d}: {exc}", EXIT_IO)
    print(f"wrote {d / 'grid.ppm'} and {d / 'answer.ppm'}")
    return EXIT_OK


# ---------------------------------------------------------------- eval / ablate


def _seed_list(base: int, n: int) -> list[int]:
    return [base + i for i in range(n)]


def cmd_eval(args) -> int:
    from . import evalkit

    model = _load_model(args.checkpoint)
    seeds = _seed_list(resolve_seed(args.seed), args.n_seeds)
    try:
        res = evalkit.evaluate(model, args.task, args.strategy, args.text_level, seeds, args.queries,
                               n_examples=args.examples, grid=tuple(args.grid) if args.grid else None)
    except (ValueError, LookupError) as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    mean, std, n = evalkit.summarize(res)
    acc, _, _ = evalkit.summarize(res, "token_acc")
    summary = {"task": args.task, "visual_strategy": args.strategy, "text_level": args.text_level,
               "metric": evalkit.metric_name(args.task), "mean": mean, "std": std, "n": n,
               "token_acc": acc, "seeds": seeds}
    print(json.dumps(summary))
    if args.out:
        try:
            Path(args.out).write_text(json.dumps(summary, indent=1) + "\n")
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import evalkit

    model = _load_model(args.checkpoint)
    seeds = _seed_list(resolve_seed(args.seed), args.n_seeds)
    try:
        cells, _ = evalkit.run_ablation(model, args.task, seeds, args.queries, out_dir=args.out)
    except OSError as exc:
        raise CliError(f"cannot write ablation outputs: {exc}", EXIT_IO)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    for c in cells:
        print(",".join(map(str, c.row())))
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck / gridgen


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    base = resolve_seed(args.seed)
    results = gradcheck.run_all(range(base, base + args.seeds))
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:4} {r.name:24} max_rel_err={r.max_rel_err:.3e} seeds={r.seeds}")
    return EXIT_NUMERIC if failed else EXIT_OK


def gridgen(n: int, seed: int, out_dir, mix_name: str = "mixed") -> Path:
    """Export ``n`` training records as PPM files plus ``manifest.tsv``."""
    from .ppm import write_ppm
    from .taskgen import CorpusMix, make_train_record

    mix = CorpusMix.named(mix_name)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = ["path\tcaption\torigin\tseed"]
    for i in range(n):
        rec = make_train_record(rng, mix)
        rel = f"images/{i:06d}.ppm"
        write_ppm(out / rel, rec.image)
        lines.append(f"{rel}\t{rec.caption}\t{rec.origin}\t{rec.seed}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def cmd_gridgen(args) -> int:
    try:
        path = gridgen(args.n, resolve_seed(args.seed), args.out, args.mix)
    except OSError as exc:
        raise CliError(f"cannot write corpus to {args.out}: {exc}", EXIT_IO)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    print(f"wrote {args.n} records -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .evalkit import VISUAL_STRATEGIES
    from .prompting import TEXT_LEVELS
    from .taskgen import TASKS

    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flag appear before or after the subcommand
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="global seed (default: $IMPROV_SEED, else 0)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="improv", description=__doc__.splitlines()[0], parents=[common])
    p.set_defaults(seed=None, verbose=False)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model from a key=value config")
    t.add_argument("config")
    t.add_argument("--out", help="override out_dir")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="inpaint a query from example pairs and text")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--examples", help="directory of NAME_input / NAME_output image pairs")
    i.add_argument("--query", required=True)
    i.add_argument("--text", default="")
    i.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"))
    i.add_argument("--order", choices=("row", "column"), default="row")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="score one prompt configuration")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", choices=TASKS, default="segmentation")
    e.add_argument("--strategy", choices=VISUAL_STRATEGIES, default="random_same_class")
    e.add_argument("--text-level", choices=TEXT_LEVELS, default="none")
    e.add_argument("--examples", type=int, default=None)
    e.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"))
    e.add_argument("--queries", type=int, default=40)
    e.add_argument("--n-seeds", type=int, default=5)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="visual x text prompt ablation matrix")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--task", choices=TASKS, default="segmentation")
    a.add_argument("--queries", type=int, default=40)
    a.add_argument("--n-seeds", type=int, default=5)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=10)
    g.set_defaults(func=cmd_gradcheck)

    gg = sub.add_parser("gridgen", parents=[common], help="export a synthetic training corpus")
    gg.add_argument("--n", type=int, required=True)
    gg.add_argument("--mix", default="mixed")
    gg.add_argument("--out", required=True)
    gg.set_defaults(func=cmd_gridgen)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"improv: error: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"improv: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
