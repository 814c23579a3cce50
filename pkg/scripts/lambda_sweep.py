"""Lambda ablation on the synthetic benchmark.

Trains one text tower per (lambda, seed) on the same scenes and reports
foreground mIoU, with-background mIoU at the swept theta, and single-object
accuracy. One JSON line per run on stdout, then a per-lambda summary.

    python scripts/lambda_sweep.py --lams 0,0.01,0.05,0.1 --seeds 0,1,2 batch_size=32
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from dataclasses import replace

from simzss.pipeline import (
    CachedProvider,
    ExperimentConfig,
    background_miou,
    choose_theta,
    class_embeddings,
    classification_accuracy,
    foreground_miou,
    make_provider,
    predict,
    run_training,
)
from simzss.synth import Record, SceneSpec, generate_scene, single_object

TEST_OFFSET = 100_000
VAL_OFFSET = 150_000
SINGLE_OFFSET = 200_000


def scenes(spec: SceneSpec, seed: int, start: int, n: int) -> list[Record]:
    out = []
    for i in range(start, start + n):
        s = generate_scene(spec, seed, i)
        out.append(Record(i, s.image, s.mask, s.caption, ""))
    return out


def parse_overrides(pairs: list[str]) -> dict:
    types = ExperimentConfig.field_types()
    out = {}
    for kv in pairs:
        k, v = kv.split("=", 1)
        if k not in types:
            raise SystemExit(f"unknown config key {k!r}")
        out[k] = types[k](v)
    return out


def run_one(cfg: ExperimentConfig, data: dict, names: list[str], provider: CachedProvider, background: bool) -> dict:
    t0 = time.perf_counter()
    state, tools, hist = run_training(cfg, data["train"], names, provider)
    t_train = time.perf_counter() - t0
    emb = class_embeddings(cfg, state, tools, names)
    test = [predict(cfg, provider, emb, r) for r in data["test"]]
    row = {
        "lam": cfg.lam,
        "seed": cfg.seed,
        "fg_miou": foreground_miou(test, data["test"], len(names)).miou,
        "accuracy": classification_accuracy(provider, emb, data["single"]),
        "loss_g": hist[-1]["loss_g"],
        "loss_l": hist[-1]["loss_l"],
        "steps": len(hist),
        "train_s": round(t_train, 1),
    }
    if background:
        val = [predict(cfg, provider, emb, r) for r in data["val"]]
        theta, _ = choose_theta(val, data["val"])
        row["theta"] = theta
        row["bg_miou_swept"] = background_miou(test, data["test"], len(names), theta).miou
        row["bg_miou_off"] = background_miou(test, data["test"], len(names), -1.0).miou
    return row


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lams", default="0,0.01,0.05,0.1")
    ap.add_argument("--seeds", default="0", help="training seeds; the scenes always use --data-seed")
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--background", action="store_true", help="also sweep theta on a validation split")
    ap.add_argument("overrides", nargs="*", help="ExperimentConfig key=value pairs")
    args = ap.parse_args(argv)
    base = replace(ExperimentConfig(), **parse_overrides(args.overrides))
    spec = SceneSpec()
    names = spec.concept_names()
    data = {
        "train": scenes(spec, args.data_seed, 0, base.n_train),
        "test": scenes(spec, args.data_seed, TEST_OFFSET, base.n_test),
        "val": scenes(spec, args.data_seed, VAL_OFFSET, base.n_val),
        "single": scenes(single_object(spec), args.data_seed, SINGLE_OFFSET, base.n_single),
    }
    provider = CachedProvider(make_provider(base))
    rows = []
    for lam in [float(x) for x in args.lams.split(",")]:
        for seed in [int(x) for x in args.seeds.split(",")]:
            row = run_one(replace(base, lam=lam, seed=seed), data, names, provider, args.background)
            rows.append(row)
            print(json.dumps(row), flush=True)
    for lam in sorted({r["lam"] for r in rows}):
        sel = [r for r in rows if r["lam"] == lam]
        fg = [100 * r["fg_miou"] for r in sel]
        acc = [100 * r["accuracy"] for r in sel]
        spread = statistics.pstdev(fg) if len(fg) > 1 else 0.0
        print(f"# lambda={lam:<5} fg mIoU {statistics.mean(fg):5.1f} +- {spread:4.1f}   accuracy {statistics.mean(acc):5.1f}", file=sys.stderr, flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
