"""Command-line entry point: ``dmat synth|train|infer|eval|gradcheck``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numerical error.
"""

from __future__ import annotations

import os
import sys

# BLAS pools are sized when numpy loads, so the cap has to be in place first
if os.environ.get("DMAT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["DMAT_THREADS"]

import argparse  # noqa: E402
import csv  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .config import ABLATIONS, ConfigError, DmatConfig, apply_ablations, desk_config  # noqa: E402
from .data import (  # noqa: E402
    collate,
    load_directory,
    load_rgb_png,
    missing_ground_truth,
    save_rgb_png,
    synth_dataset,
    synth_export,
)
from .decoder import compose_output  # noqa: E402
from .losses import FeatureExtractor  # noqa: E402
from .masks import MaskSet  # noqa: E402
from .metrics import build_report  # noqa: E402
from .tensor import ContractError, DimensionError, ParameterError  # noqa: E402
from .train import (  # noqa: E402
    ConfigMismatchError,
    NonFiniteLossError,
    TrainState,
    batch_indices,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_step,
)

log = logging.getLogger("dmat")

CSV_FIELDS = ("iter", "lr", "l1", "adv_g", "adv_d", "perc", "style", "total")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ablation_list(text: str) -> list[str]:
    names = [n.strip() for n in text.split(",") if n.strip()]
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown ablation(s) {unknown}; choose from {sorted(ABLATIONS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmat", description="Mask-aware human de-occlusion at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", type=Path, help="INI config file (default: built-in desk config)")
        sp.add_argument("--seed", type=int, help="override the command's seed")
        sp.add_argument("--ablation", type=_ablation_list, default=[], help="comma-separated ablation names")
        if out:
            sp.add_argument("--out", type=Path, required=True, help="output directory")

    s = sub.add_parser("synth", help="write a synthetic dataset")
    common(s)
    s.add_argument("--count", type=int, help="override data.count")

    t = sub.add_parser("train", help="train a generator")
    common(t)
    t.add_argument("--data", type=Path, help="training dataset directory (default: data.train_dir or synthesized)")
    t.add_argument("--iterations", type=int, help="iterations to run (default: schedule.max_iter)")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")

    i = sub.add_parser("infer", help="de-occlude a directory of inputs")
    common(i)
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--input", type=Path, required=True, help="directory of {id}_img/modal/amodal/occ.png groups")
    i.add_argument("--ema", action="store_true", help="use the EMA weights")

    e = sub.add_parser("eval", help="bucketed metric report")
    common(e)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--predictions", type=Path, help="directory of {id}_composite.png files to score")
    e.add_argument("--data", type=Path, required=True, help="dataset directory with ground truth")
    e.add_argument("--ema", action="store_true")

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable module")
    common(g, out=False)
    g.add_argument("--only", default="", help="comma-separated check names")
    return p


def resolve_config(args) -> DmatConfig:
    if args.config and not args.config.is_file():
        raise UsageError(f"config file {args.config} not found")
    cfg = DmatConfig.load(args.config) if args.config else desk_config()
    if args.ablation:
        cfg = apply_ablations(cfg, args.ablation)
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    data = cfg.data
    if args.seed is not None:
        data = type(data)(**{**vars(data), "seed": args.seed})
    if args.count is not None:
        data = type(data)(**{**vars(data), "count": args.count})
    manifest = synth_export(synth_dataset(data), args.out)
    print(f"wrote {manifest['count']} samples to {args.out}")
    for band, n in manifest["ratio_histogram"].items():
        print(f"  {band:>7}  {n}")
    return EXIT_OK


def _training_samples(cfg: DmatConfig, data_dir: Path | None):
    path = data_dir or (Path(cfg.data.train_dir) if cfg.data.train_dir else None)
    if path is None:
        return synth_dataset(cfg.data)
    samples = list(load_directory(path))
    if not samples:
        raise UsageError(f"no usable samples in {path}")
    return samples


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = load_checkpoint(args.resume, cfg)
        print(f"resumed from {args.resume} at iteration {state.iteration}")
    else:
        seed = cfg.train.seed if args.seed is None else args.seed
        state = TrainState.create(cfg, seed)
    cfg.save(out / "config.ini")
    samples = _training_samples(cfg, args.data)
    fx = FeatureExtractor(cfg.features)
    total = args.iterations if args.iterations is not None else cfg.schedule.max_iter - state.iteration
    every = cfg.train.checkpoint_every
    log_path = out / "train_log.csv"
    append = bool(args.resume) and log_path.exists()
    with open(log_path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if not append:
            writer.writeheader()
        for _ in range(total):
            idx = batch_indices(len(samples), cfg.schedule.batch, state.iteration, state.seed)
            m = train_step(state, [samples[j] for j in idx], fx)
            writer.writerow({k: (m[k] if k == "iter" else f"{m[k]:.9g}") for k in CSV_FIELDS})
            fh.flush()
            if every and state.iteration % every == 0:
                save_checkpoint(out / f"ckpt_{state.iteration:06d}.dmat", state)
            if args.verbose and state.iteration % 50 == 0:
                log.info("iter %d total %.4f", state.iteration, m["total"])
    save_checkpoint(out / "last.dmat", state)
    print(f"trained to iteration {state.iteration}; checkpoint {out / 'last.dmat'}")
    return EXIT_OK


def _load_generator(args, cfg: DmatConfig):
    state = load_checkpoint(args.checkpoint, cfg)
    if args.ema:
        state.ema_apply()
    return state.gen


def cmd_infer(args) -> int:
    cfg = resolve_config(args)
    gen = _load_generator(args, cfg)
    samples = list(load_directory(args.input, require_gt=False))
    if not samples:
        raise UsageError(f"no usable inputs in {args.input}")
    preds = predict(gen, samples)
    occluded = np.stack([s.occluded for s in samples])
    masks = MaskSet.stack([s.masks for s in samples])
    composites = compose_output(occluded, preds, masks)
    args.out.mkdir(parents=True, exist_ok=True)
    for s, p, c in zip(samples, preds, composites):
        save_rgb_png(args.out / f"{s.id}_pred.png", p)
        save_rgb_png(args.out / f"{s.id}_composite.png", c)
    print(f"wrote {len(samples)} prediction/composite pairs to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    missing = missing_ground_truth(args.data)
    if missing:
        raise UsageError(f"missing ground truth for ids: {', '.join(missing)}")
    samples = list(load_directory(args.data))
    if not samples:
        raise UsageError(f"no usable samples in {args.data}")
    gts, occluded, masks = collate(samples)
    if args.checkpoint:
        preds = predict(_load_generator(args, cfg), samples)
        composites = compose_output(occluded, preds, masks)
    else:
        absent = [s.id for s in samples if not (args.predictions / f"{s.id}_composite.png").exists()]
        if absent:
            raise UsageError(f"missing composites for ids: {', '.join(absent)}")
        composites = np.stack([load_rgb_png(args.predictions / f"{s.id}_composite.png") for s in samples])
    report = build_report(composites, gts, samples, FeatureExtractor(cfg.features))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json() + "\n")
    table = report.to_table()
    (args.out / "report.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    names = [n for n in args.only.split(",") if n] or None
    results = run_gradcheck(seed=args.seed or 0, names=names)
    if names and set(names) - set(results):
        raise UsageError(f"unknown check(s): {sorted(set(names) - set(results))}")
    failed = [k for k, v in results.items() if not v < TOLERANCE]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigMismatchError as exc:
        print(f"refusing: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FloatingPointError, DimensionError, ContractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
