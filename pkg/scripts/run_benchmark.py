#!/usr/bin/env python3
"""Compare training methods on the synthetic spurious-shift benchmark.

For each seed the script generates one dataset, initializes one model,
trains every requested method on identical inputs, and reports test
accuracies under distribution shift side by side. With no overrides the
defaults reproduce the shipped benchmark exactly. Runs are independent
and can spread across processes with --jobs.

Example:
    python3 scripts/run_benchmark.py --seeds 10 --jobs 4
"""

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

from imslearn import benchmark
from imslearn.experiment import SynthConfig, gen_spurious, init_mlp, mi_profile, train
from imslearn.objectives import METHODS, TrainConfig


def run_one(task):
    method, seed, synth_kw, train_kw, hidden, profile = task
    synth = SynthConfig(seed=seed, **synth_kw)
    train_ds, test_ds = gen_spurious(synth)
    model = init_mlp([synth.dim, *hidden, synth.classes], seed=seed)
    cfg = TrainConfig(method=method, seed=seed, **train_kw)
    trained, report = train(model, train_ds, cfg, eval_data=test_ds)
    row = {
        "method": method,
        "seed": seed,
        "train_accuracy": report.final_train_accuracy,
        "test_accuracy": report.final_test_accuracy,
        "env_sizes": report.env_sizes,
        "wall_time_s": round(report.wall_time_s, 2),
    }
    if profile:
        row["mi_profile"] = [asdict(r) for r in mi_profile(trained, test_ds)]
    return row


def summarize(rows, methods, seeds):
    acc = {m: {r["seed"]: r["test_accuracy"] for r in rows if r["method"] == m} for m in methods}
    print("\nper-seed shifted test accuracy")
    header = "seed  " + "  ".join(f"{m:>9}" for m in methods)
    print(header)
    for s in seeds:
        print(f"{s:>4}  " + "  ".join(f"{acc[m][s]:>9.3f}" for m in methods))
    print("mean  " + "  ".join(
        f"{sum(acc[m].values()) / len(seeds):>9.3f}" for m in methods
    ))
    if "ims" in acc and "erm" in acc:
        gaps = [acc["ims"][s] - acc["erm"][s] for s in seeds]
        wins5 = sum(g >= 0.05 for g in gaps)
        wins0 = sum(g >= 0.0 for g in gaps)
        print(
            f"\nims - erm: mean {sum(gaps) / len(gaps):+.3f}, "
            f"min {min(gaps):+.3f}, >=5pt in {wins5}/{len(seeds)}, "
            f">=0 in {wins0}/{len(seeds)}"
        )
        for other in ("irm", "ib"):
            if other in acc:
                wins = sum(acc["ims"][s] >= acc[other][s] for s in seeds)
                print(f"ims >= {other} in {wins}/{len(seeds)} seeds")


def main(argv=None):
    synth_defaults = benchmark.shift_synth(0)
    train_defaults = benchmark.shift_train_config("ims", 0)

    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--seeds", type=int, default=len(benchmark.SEEDS),
                        help="number of seeds (0..n-1)")
    parser.add_argument("--methods", default=",".join(benchmark.METHODS))
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--epochs", type=int, default=train_defaults.epochs)
    parser.add_argument("--batch-size", type=int, default=train_defaults.batch_size)
    parser.add_argument("--learning-rate", type=float,
                        default=train_defaults.learning_rate)
    parser.add_argument("--eta", type=float, default=train_defaults.eta)
    parser.add_argument("--beta", type=float, default=train_defaults.beta)
    parser.add_argument("--k", type=int, default=train_defaults.k)
    parser.add_argument("--partition-on", default=train_defaults.partition_on,
                        choices=["raw", "features"])
    parser.add_argument("--normalize-env-risks", action=argparse.BooleanOptionalAction,
                        default=train_defaults.normalize_env_risks)
    parser.add_argument("--hard-env", action=argparse.BooleanOptionalAction,
                        default=train_defaults.hard_env)
    parser.add_argument("--stiffness", type=float, default=train_defaults.stiffness)
    parser.add_argument("--train-per-class", type=int,
                        default=synth_defaults.train_per_class)
    parser.add_argument("--separation", type=float, default=synth_defaults.separation)
    parser.add_argument("--invariant-dims", type=int,
                        default=synth_defaults.invariant_dims)
    parser.add_argument("--spurious-dims", type=int,
                        default=synth_defaults.spurious_dims)
    parser.add_argument("--noise-dims", type=int, default=synth_defaults.noise_dims)
    parser.add_argument("--majority-fraction", type=float,
                        default=synth_defaults.majority_fraction)
    parser.add_argument("--hidden", default=",".join(str(h) for h in benchmark.HIDDEN))
    parser.add_argument("--profile", action="store_true", help="add information profiles")
    parser.add_argument("--json-out", help="also dump all rows to this JSON file")
    args = parser.parse_args(argv)

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        parser.error(f"unknown methods {unknown}; choose from {METHODS}")
    seeds = list(range(args.seeds))
    hidden = tuple(int(h) for h in args.hidden.split(","))

    synth_kw = dict(
        train_per_class=args.train_per_class,
        separation=args.separation,
        invariant_dims=args.invariant_dims,
        spurious_dims=args.spurious_dims,
        noise_dims=args.noise_dims,
        majority_fraction=args.majority_fraction,
    )
    train_kw = dict(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        eta=args.eta,
        beta=args.beta,
        k=args.k,
        partition_on=args.partition_on,
        normalize_env_risks=args.normalize_env_risks,
        hard_env=args.hard_env,
        stiffness=args.stiffness,
    )
    tasks = [
        (m, s, synth_kw, train_kw, hidden, args.profile) for s in seeds for m in methods
    ]

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run_one, tasks))
    else:
        rows = [run_one(t) for t in tasks]

    summarize(rows, methods, seeds)
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
        print(f"\nwrote {args.json_out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
