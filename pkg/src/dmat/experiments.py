"""Directional desk-scale experiments: DHMGA on/off and head kernel sizes.

Each run trains from scratch on the same synthetic training set, then scores
a held-out synthetic set. Results are cached as JSON keyed by config hash,
seed and iteration count, so an interrupted suite resumes where it stopped.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

from .config import DataConfig, DmatConfig, apply_ablations, desk_config
from .data import synth_dataset
from .losses import FeatureExtractor
from .metrics import evaluate
from .train import TrainState, train

ITERATIONS = 5000
SEEDS = (0, 1, 2, 3, 4)
HELDOUT = DataConfig(count=64, seed=9001)
VARIANTS = {"dhmga": (), "no-dhmga": ("no-dhmga",), "kernels-2-2-2": ("kernels-2-2-2",)}


def variant_config(name: str, base: DmatConfig | None = None) -> DmatConfig:
    return apply_ablations(base or desk_config(), VARIANTS[name])


def run_one(cfg: DmatConfig, seed: int, iterations: int, heldout: DataConfig = HELDOUT) -> dict:
    state = TrainState.create(cfg, seed)
    fx = FeatureExtractor(cfg.features)
    t0 = time.perf_counter()
    history = train(state, synth_dataset(cfg.data), iterations, fx)
    elapsed = time.perf_counter() - t0
    if cfg.train.eval_with_ema:
        state.ema_apply()
    held = synth_dataset(dataclasses.replace(heldout, size=cfg.data.size))
    report, _, _ = evaluate(state.gen, held, fx)
    return {
        "seed": seed,
        "iterations": iterations,
        "config_hash": cfg.config_hash(),
        "train_seconds": elapsed,
        "final_total": history[-1]["total"] if history else None,
        "hfd": report.hfd["total"],
        "fd": report.fd["total"],
        "l1": report.l1["total"],
        "shift": report.shift["total"],
        "report": report.to_dict(),
    }


def cached_run(results_dir, variant: str, seed: int, iterations: int = ITERATIONS, run: bool = True) -> dict | None:
    """Load the cached result for ``(variant, seed, iterations)`` or compute and store it."""
    cfg = variant_config(variant)
    path = Path(results_dir) / f"{variant}_s{seed}_i{iterations}_{cfg.config_hash()}.json"
    if path.exists():
        return json.loads(path.read_text())
    if not run:
        return None
    result = run_one(cfg, seed, iterations)
    result["variant"] = variant
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=2))
    return result


def run_suite(results_dir, seeds=SEEDS, iterations: int = ITERATIONS, variants=tuple(VARIANTS), report=print):
    out = {}
    for seed in seeds:
        for v in variants:
            r = cached_run(results_dir, v, seed, iterations)
            out[(v, seed)] = r
            if report:
                report(f"{v:<14} seed {seed}: hfd {r['hfd']:.5f} shift {r['shift']:+.4f} ({r['train_seconds']:.0f}s)")
    return out


if __name__ == "__main__":
    import sys

    run_suite(sys.argv[1] if len(sys.argv) > 1 else "acceptance_runs")
