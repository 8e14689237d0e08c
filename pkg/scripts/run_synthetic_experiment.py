"""Desk-scale synthetic conversion experiment.

Generates a parallel corpus with a shared affine transform and per-pair time
warps, trains the attention model with the published loss weights, trains a
context-preservation ablation with the same seed, evaluates all checkpoints
on held-out pairs, and writes a machine-readable summary.

Run from the repository root:

    python3 scripts/run_synthetic_experiment.py --out experiments/synthetic
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from seqvc import evaluation as E
from seqvc import training as T
from seqvc.data import SyntheticTaskConfig, compute_norm, gen_synthetic, normalize_pairs
from seqvc.model import ModelConfig, init_parameters


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="experiments/synthetic")
    parser.add_argument("--train-pairs", type=int, default=2000)
    parser.add_argument("--test-pairs", type=int, default=200)
    parser.add_argument("--epochs", type=int, default=60)
    parser.add_argument("--hidden-dim", type=int, default=64)
    parser.add_argument("--data-seed", type=int, default=42)
    parser.add_argument("--train-seed", type=int, default=3)
    parser.add_argument("--warmup-steps", type=int, default=150)
    parser.add_argument("--base-lr-scale", type=float, default=0.1)
    parser.add_argument("--attention-dim", type=int, default=64)
    parser.add_argument("--lambda-stop", type=float, default=1.0)
    return parser


def eval_checkpoint(ckpt, test_pairs, test_rhos):
    report = E.evaluate_dataset(test_pairs, ckpt, rhos=test_rhos)
    agg = report.aggregate()
    agg["duration_pass_rate"] = float(
        np.mean([p.duration_ratio_error <= 0.15 for p in report.pairs]))
    agg["pair_count"] = report.n_pairs
    return agg, report


def cp_source_column(log_lines) -> list:
    return [float(line.split("\t")[3]) for line in log_lines]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    task = SyntheticTaskConfig(pairs=args.train_pairs + args.test_pairs,
                               seed=args.data_seed)
    pairs, gt = gen_synthetic(task)
    train_pairs = pairs[:args.train_pairs]
    test_pairs = [(x.astype(float), y.astype(float))
                  for x, y in pairs[args.train_pairs:]]
    test_rhos = gt.rhos[args.train_pairs:]
    norm = compute_norm(train_pairs)
    normed = normalize_pairs(train_pairs, norm)
    print(f"dataset: {len(train_pairs)} train / {len(test_pairs)} test pairs",
          flush=True)

    model_cfg = ModelConfig(feature_dim=task.feature_dim, hidden_dim=args.hidden_dim,
                            attention_dim=args.attention_dim, reduction_factor=5)
    base_kw = dict(batch_size=32, epochs=args.epochs, reduction_factor=5,
                   warmup_steps=args.warmup_steps, base_lr_scale=args.base_lr_scale,
                   lambda_stop=args.lambda_stop,
                   checkpoint_every=max(1, args.epochs // 3), seed=args.train_seed)

    theta0 = init_parameters(model_cfg, seed=args.train_seed)
    untrained = T.Checkpoint.build(theta0, T.OptimizerState.fresh(theta0),
                                   T.TrainingConfig(**base_kw), model_cfg, norm)
    untrained.save(out / "untrained.as2s")

    runs = {}
    timings = {}
    for name, lam_cp in (("main", 10.0), ("ablation_no_cp", 0.0)):
        cfg = T.TrainingConfig(lambda_cp=lam_cp, **base_kw)
        t0 = time.perf_counter()
        result = T.train(normed, model_cfg, cfg, norm=norm,
                         checkpoint_path=out / f"{name}.as2s",
                         log_path=out / f"{name}.log")
        timings[name] = time.perf_counter() - t0
        if result.aborted:
            print(f"error: {name} run aborted on a non-finite loss after epoch "
                  f"{result.epochs_run}", file=sys.stderr)
            return 2
        runs[name] = result
        final = result.log_lines[-1].split("\t")
        print(f"{name}: {result.epochs_run} epochs in {timings[name] / 60:.1f} min, "
              f"final total={float(final[6]):.3f}", flush=True)

    summary = {
        "config": {
            "train_pairs": args.train_pairs, "test_pairs": args.test_pairs,
            "epochs": args.epochs, "hidden_dim": args.hidden_dim,
            "data_seed": args.data_seed, "train_seed": args.train_seed,
            "warmup_steps": args.warmup_steps,
            "base_lr_scale": args.base_lr_scale,
            "attention_dim": args.attention_dim,
            "lambda_stop": args.lambda_stop,
        },
        "train_minutes": {k: v / 60 for k, v in timings.items()},
    }
    for name, ckpt in (("untrained", untrained),
                       ("main", runs["main"].checkpoint),
                       ("ablation_no_cp", runs["ablation_no_cp"].checkpoint)):
        agg, report = eval_checkpoint(ckpt, test_pairs, test_rhos)
        summary[name] = agg
        E.write_report(report, out / f"report_{name}.txt")
        print(f"eval {name}: dtw_l1={agg['dtw_l1']:.4f} "
              f"diag={agg['diagonality_deviation']:.4f} "
              f"duration_pass={agg['duration_pass_rate']:.2%}", flush=True)

    cps = cp_source_column(runs["main"].log_lines)
    summary["cp_source_first_epoch"] = cps[0]
    summary["cp_source_final_epoch"] = cps[-1]
    summary["dtw_ratio_vs_untrained"] = summary["main"]["dtw_l1"] / summary["untrained"]["dtw_l1"]
    summary["total_minutes"] = (time.perf_counter() - started) / 60

    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"summary written to {out / 'summary.json'} "
          f"({summary['total_minutes']:.1f} min total)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
