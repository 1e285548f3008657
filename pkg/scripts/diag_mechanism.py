"""One-off look at what the partition finds and what the net uses.

Trains one seed per method on the benchmark task, then reports train and
shifted-test accuracy, cluster composition against (class, regime), and
first-layer weight mass split across the invariant, spurious, and noise
column blocks.
"""

import argparse
import sys

import numpy as np

sys.path.insert(0, "src")

import imslearn.experiment as exp
from imslearn.environments import PartitionConfig, soft_kmeans
from imslearn.experiment import (
    MlpModel,
    SynthConfig,
    evaluate,
    forward,
    gen_spurious,
    init_mlp,
    train,
)
from imslearn.objectives import TrainConfig


def block_mass(model: MlpModel, synth: SynthConfig) -> dict[str, float]:
    w0 = model.weights[0]
    d_inv = synth.invariant_dims
    d_spur = synth.spurious_dims
    blocks = {
        "invariant": w0[:d_inv],
        "spurious": w0[d_inv : d_inv + d_spur],
        "noise": w0[d_inv + d_spur :],
    }
    return {k: float(np.sqrt((v**2).mean())) for k, v in blocks.items()}


def ablated_accuracy(model: MlpModel, data, synth: SynthConfig, keep: str) -> float:
    """Accuracy after zeroing first-layer input blocks other than ``keep``."""
    d_inv = synth.invariant_dims
    clone = model.copy()
    w0 = clone.weights[0]
    if keep == "invariant":
        w0[d_inv:] = 0.0
    elif keep == "nonspurious":
        w0[d_inv : d_inv + synth.spurious_dims] = 0.0
    return evaluate(clone, data)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--separation", type=float, default=0.75)
    ap.add_argument("--invariant-dims", type=int, default=2)
    ap.add_argument("--spurious-dims", type=int, default=6)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--learning-rate", type=float, default=0.1)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--hidden", default="64,32")
    ap.add_argument("--activation", default="tanh", choices=["tanh", "relu"])
    ap.add_argument("--normalize-env-risks", action="store_true")
    ap.add_argument("--hard-env", action="store_true")
    ap.add_argument("--partition-on", default="raw", choices=["raw", "features"])
    ap.add_argument("--warm-epochs", type=int, default=1)
    ap.add_argument("--noise-dims", type=int, default=2)
    ap.add_argument("--majority-fraction", type=float, default=0.75)
    ap.add_argument("--train-per-class", type=int, default=300)
    ap.add_argument("--eta", type=float, default=0.005)
    ap.add_argument("--beta", type=float, default=0.05)
    ap.add_argument("--stiffness", type=float, default=None)
    ap.add_argument("--methods", default="erm,irm,ims")
    args = ap.parse_args()

    synth = SynthConfig(
        seed=args.seed,
        separation=args.separation,
        invariant_dims=args.invariant_dims,
        spurious_dims=args.spurious_dims,
        noise_dims=args.noise_dims,
        majority_fraction=args.majority_fraction,
        train_per_class=args.train_per_class,
    )
    train_data, test_data = gen_spurious(synth)
    hidden = tuple(int(h) for h in args.hidden.split(","))

    def show_partition(part):
        hard = part.hard_labels()
        tags = np.asarray(train_data.tags)
        print("  cluster x (class, regime) counts")
        for c in range(part.k):
            rows = hard == c
            if not rows.any():
                print(f"    cluster {c}: empty")
                continue
            combo = {}
            for cls in np.unique(train_data.labels[rows]):
                for tag in np.unique(tags[rows]):
                    n = int(((train_data.labels == cls) & (tags == tag) & rows).sum())
                    if n:
                        combo[f"y{cls}/{tag}"] = n
            print(f"    cluster {c} (n={int(rows.sum())}): {combo}")

    captured = {}
    orig_fit = exp.fit_partition

    def spy(model, data, config):
        part = orig_fit(model, data, config)
        captured["part"] = part
        return part

    exp.fit_partition = spy

    for method in args.methods.split(","):
        cfg = TrainConfig(
            method=method,
            seed=args.seed,
            epochs=args.epochs,
            learning_rate=args.learning_rate,
            batch_size=args.batch_size,
            eta=args.eta,
            beta=args.beta,
            partition_on=args.partition_on,
            warm_epochs=args.warm_epochs,
            normalize_env_risks=args.normalize_env_risks,
            hard_env=args.hard_env,
            stiffness=args.stiffness,
        )
        model = init_mlp(
            (synth.dim, *hidden, synth.classes),
            activation=args.activation,
            seed=args.seed,
        )
        captured.clear()
        fitted, report = train(model, train_data, cfg, eval_data=test_data)
        tr = evaluate(fitted, train_data)
        te = evaluate(fitted, test_data)
        mass = block_mass(fitted, synth)
        last = report.epochs[-1]
        print(
            f"{method:5s} train {tr:.3f} test {te:.3f} "
            f"inv {mass['invariant']:.3f} spur {mass['spurious']:.3f} "
            f"noise {mass['noise']:.3f} "
            f"align {last.mean_alignment:.3e} comp {last.mean_compression:.3f} "
            f"despur {ablated_accuracy(fitted, test_data, synth, 'nonspurious'):.3f} "
            f"invonly {ablated_accuracy(fitted, test_data, synth, 'invariant'):.3f}"
        )
        stride = max(1, len(report.epochs) // 15)
        curve = [
            f"{rec.epoch}:{rec.train_accuracy:.2f}" for rec in report.epochs[::stride]
        ]
        print(f"      train curve {' '.join(curve)}")
        if "part" in captured:
            show_partition(captured["part"])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
