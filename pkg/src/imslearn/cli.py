"""Command-line entry points for the training and auditing workflow.

Five subcommands cover the pipeline end to end: ``gen-data`` writes a
synthetic shift benchmark to CSV, ``audit-shift`` compares two splits
class by class with a kernel two-sample test, ``partition`` clusters
rows into soft environments, ``train`` fits a model and saves it next
to its report, and ``mi-profile`` reads a saved model back and reports
per-layer information estimates.

Configuration files are flat ``key=value`` text with ``#`` comments.
Keys mirror the config dataclass fields of the relevant command and
unknown keys are rejected. Precedence, lowest to highest: dataclass
defaults, config file, repeated ``--set key=value`` pairs, dedicated
flags. Every command echoes its fully resolved configuration into the
output directory as ``config_resolved.txt``, in the same format it
reads, so any run can be replayed from its own artifacts.

The default output directory comes from the ``IMSLEARN_OUT``
environment variable when ``--out`` is omitted, falling back to the
current directory. Exit codes are a stable contract for scripting:
0 success, 2 usage or configuration error, 3 data error, 4 numerical
failure.
"""

import argparse
import json
import os
import sys
import types
from dataclasses import fields as dc_fields
from pathlib import Path
from typing import get_args

from . import __version__
from .environments import PartitionConfig, soft_kmeans
from .errors import ConfigError, DataError, NumericalError
from .experiment import (
    LabeledDataset,
    SynthConfig,
    gen_spurious,
    init_mlp,
    load_model,
    mi_profile,
    mi_profile_csv,
    save_model,
    train,
)
from .infotheory import audit_class_shift
from .objectives import METHODS, TrainConfig

OUT_ENV_VAR = "IMSLEARN_OUT"
CONFIG_ECHO_NAME = "config_resolved.txt"
DEFAULT_HIDDEN = (32, 16)

_TRUE_WORDS = frozenset({"true", "1", "yes", "on"})
_FALSE_WORDS = frozenset({"false", "0", "no", "off"})


# -- key=value configuration ------------------------------------------------


def _field_kinds(cls) -> dict:
    """Map a config dataclass's field names to value parsers."""
    kinds = {}
    for f in dc_fields(cls):
        if f.type in (int, float, bool, str):
            kinds[f.name] = f.type
        elif isinstance(f.type, types.UnionType) and set(get_args(f.type)) == {
            float,
            type(None),
        }:
            kinds[f.name] = "optional_float"
        else:
            raise TypeError(f"unsupported config field type for {f.name}: {f.type!r}")
    return kinds


SYNTH_KINDS = _field_kinds(SynthConfig)
TRAIN_KINDS = _field_kinds(TrainConfig)
PARTITION_KINDS = _field_kinds(PartitionConfig)
# model shape travels with the training config even though the library
# keeps it out of TrainConfig; the CLI must be able to rebuild the net
MODEL_KINDS = {"hidden": "int_list", "activation": str}


def _coerce(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE_WORDS:
                return True
            if low in _FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "optional_float":
            return None if raw.lower() == "none" else float(raw)
        if kind == "int_list":
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if not parts:
                raise ValueError("expected a comma-separated list of integers")
            return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None
    raise ConfigError(f"config key {key!r} has no parser")


def parse_kv_text(text: str, source: str) -> dict:
    """Parse flat ``key=value`` text with ``#`` comments into a str map."""
    out = {}
    for ln_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln_no}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{ln_no}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{ln_no}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def resolve_config(kinds: dict, config_path, set_items, flag_values: dict) -> dict:
    """Merge config file, ``--set`` pairs, and flags; reject unknown keys.

    ``flag_values`` entries equal to ``None`` mean the flag was not
    given, so file and ``--set`` values survive underneath them.
    """
    resolved = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise DataError(f"{config_path}: no such config file")
        raw = parse_kv_text(path.read_text(encoding="utf-8"), str(config_path))
        for key, value in raw.items():
            if key not in kinds:
                raise ConfigError(
                    f"{config_path}: unknown config key {key!r}; "
                    f"known keys: {', '.join(sorted(kinds))}"
                )
            resolved[key] = _coerce(key, value, kinds[key])
    for item in set_items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in kinds:
            raise ConfigError(
                f"--set: unknown config key {key!r}; "
                f"known keys: {', '.join(sorted(kinds))}"
            )
        resolved[key] = _coerce(key, value.strip(), kinds[key])
    for key, value in flag_values.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_config(out_dir: Path, command: str, pairs: dict) -> None:
    """Write the resolved configuration in re-readable key=value form."""
    lines = [f"# resolved configuration ({command}), package version {__version__}"]
    for key in sorted(pairs):
        lines.append(f"{key}={_format_value(pairs[key])}")
    (out_dir / CONFIG_ECHO_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _out_dir(arg) -> Path:
    base = arg if arg is not None else os.environ.get(OUT_ENV_VAR) or "."
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_dataset(path) -> LabeledDataset:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{path}: no such file")
    return LabeledDataset.load_csv(p)


# -- plotting ----------------------------------------------------------------


def svg_polyline(values, title: str = "", width: int = 640, height: int = 320) -> str:
    """Render one numeric series as a standalone SVG line chart.

    Kept deliberately small: a framed polyline with min/max labels is
    enough to eyeball a training curve without pulling in a plotting
    stack.
    """
    vals = [float(v) for v in values]
    if len(vals) < 2:
        raise DataError(f"polyline needs at least two points, got {len(vals)}")
    margin = 42.0
    lo, hi = min(vals), max(vals)
    span = (hi - lo) or 1.0
    inner_w = width - 2 * margin
    inner_h = height - 2 * margin
    points = " ".join(
        f"{margin + inner_w * i / (len(vals) - 1):.2f},"
        f"{margin + inner_h * (1.0 - (v - lo) / span):.2f}"
        for i, v in enumerate(vals)
    )
    label = (
        f'<text x="{margin}" y="{margin - 10:.0f}" font-size="13" '
        f'font-family="sans-serif">{title}</text>'
        if title
        else ""
    )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect x="{margin}" y="{margin}" width="{inner_w}" height="{inner_h}" '
        f'fill="none" stroke="#999"/>\n'
        f"{label}\n"
        f'<text x="4" y="{margin + 4:.0f}" font-size="11" '
        f'font-family="sans-serif">{hi:.4g}</text>\n'
        f'<text x="4" y="{margin + inner_h:.0f}" font-size="11" '
        f'font-family="sans-serif">{lo:.4g}</text>\n'
        f'<text x="{margin}" y="{height - 8}" font-size="11" '
        f'font-family="sans-serif">0</text>\n'
        f'<text x="{margin + inner_w - 8:.0f}" y="{height - 8}" font-size="11" '
        f'font-family="sans-serif">{len(vals) - 1}</text>\n'
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" '
        f'points="{points}"/>\n'
        f"</svg>\n"
    )


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args, parser) -> int:
    resolved = resolve_config(SYNTH_KINDS, args.config, args.set, {"seed": args.seed})
    cfg = SynthConfig(**resolved)
    cfg.validate()
    train_ds, test_ds = gen_spurious(cfg)
    out = _out_dir(args.out)
    train_ds.save_csv(out / "train.csv")
    test_ds.save_csv(out / "test.csv")
    full = {f.name: getattr(cfg, f.name) for f in dc_fields(SynthConfig)}
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": full,
        "train_rows": train_ds.n,
        "test_rows": test_ds.n,
        "feature_dim": cfg.dim,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    echo_config(out, "gen-data", full)
    print(f"wrote {train_ds.n} train and {test_ds.n} test rows to {out}")
    return 0


def cmd_audit_shift(args, parser) -> int:
    if args.perms < 1:
        parser.error("--perms must be a positive integer")
    if not 0.0 < args.level < 1.0:
        parser.error("--level must lie strictly between 0 and 1")
    train_ds = _load_dataset(args.train)
    test_ds = _load_dataset(args.test)
    report = audit_class_shift(
        train_ds.features,
        train_ds.labels,
        test_ds.features,
        test_ds.labels,
        n_perm=args.perms,
        level=args.level,
        seed=args.seed,
        jobs=args.jobs,
    )
    if not report.records:
        raise DataError(
            "no class appears in both splits with at least two rows on each side"
        )
    out = _out_dir(args.out)
    (out / "shift_report.csv").write_text(report.to_csv(), encoding="utf-8")
    n_sig = sum(1 for r in report.records if r.significant)
    summary = {
        "classes_tested": len(report.records),
        "significant_classes": n_sig,
        "significant_fraction": n_sig / len(report.records),
        "level": report.level,
        "n_perm": report.n_perm,
        "skipped": [
            {"class_id": cid, "reason": reason} for cid, reason in report.skipped
        ],
    }
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    echo_config(
        out,
        "audit-shift",
        {"perms": args.perms, "level": args.level, "seed": args.seed, "jobs": args.jobs},
    )
    print(
        f"{n_sig} of {len(report.records)} classes shifted at level {args.level:g}"
    )
    return 0


def cmd_partition(args, parser) -> int:
    resolved = resolve_config(
        PARTITION_KINDS,
        args.config,
        args.set,
        {"k": args.k, "seed": args.seed, "stiffness": args.stiffness},
    )
    cfg = PartitionConfig(**resolved)
    cfg.validate()
    data = _load_dataset(args.features)
    assignment = soft_kmeans(data.features, cfg)
    out = _out_dir(args.out)
    (out / "memberships.csv").write_text(assignment.to_csv(), encoding="utf-8")
    echo_config(
        out,
        "partition",
        {f.name: getattr(cfg, f.name) for f in dc_fields(PartitionConfig)},
    )
    print(
        f"objective={assignment.objective!r} "
        f"stiffness={assignment.stiffness!r} rows={assignment.n_rows} k={assignment.k}"
    )
    return 0


def _epochs_csv(report) -> str:
    cols = (
        "epoch",
        "learning_rate",
        "mean_total",
        "mean_cross_entropy",
        "mean_alignment",
        "mean_compression",
        "train_accuracy",
        "bandwidth",
    )
    lines = [",".join(cols)]
    for e in report.epochs:
        cells = []
        for c in cols:
            v = getattr(e, c)
            cells.append(repr(v) if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def cmd_train(args, parser) -> int:
    kinds = dict(TRAIN_KINDS)
    kinds.update(MODEL_KINDS)
    flag_values = {
        "method": args.method,
        "eta": args.eta,
        "beta": args.beta,
        "k": args.k,
        "seed": args.seed,
    }
    resolved = resolve_config(kinds, args.config, args.set, flag_values)
    hidden = resolved.pop("hidden", DEFAULT_HIDDEN)
    activation = resolved.pop("activation", "tanh")
    cfg = TrainConfig(**resolved)
    cfg.validate()

    data_dir = Path(args.data_dir)
    train_ds = _load_dataset(data_dir / "train.csv")
    test_path = data_dir / "test.csv"
    test_ds = _load_dataset(test_path) if test_path.is_file() else None
    if train_ds.labels.min() < 0:
        raise DataError("labels must be non-negative class ids")
    classes = int(train_ds.labels.max()) + 1
    if classes < 2:
        raise DataError("training needs at least two classes")

    out = _out_dir(args.out)
    echo = {f.name: getattr(cfg, f.name) for f in dc_fields(TrainConfig)}
    echo["hidden"] = tuple(hidden)
    echo["activation"] = activation
    # echoed before the run so a failed run still leaves its config
    echo_config(out, "train", echo)

    model = init_mlp((train_ds.dim, *hidden, classes), activation=activation, seed=cfg.seed)
    try:
        fitted, report = train(model, train_ds, cfg, eval_data=test_ds)
    except NumericalError as exc:
        failure = {
            "failure": str(exc),
            "method": cfg.method,
            "seed": cfg.seed,
            "config": echo_jsonable(echo),
        }
        (out / "report.json").write_text(
            json.dumps(failure, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        raise
    save_model(fitted, out / "model.bin")
    payload = report.to_json_dict()
    # wall time is the one nondeterministic field; dropping it keeps
    # every artifact byte-identical across reruns of the same config
    payload.pop("wall_time_s", None)
    payload["version"] = __version__
    payload["hidden"] = list(hidden)
    payload["activation"] = activation
    (out / "report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out / "epochs.csv").write_text(_epochs_csv(report), encoding="utf-8")
    if args.svg:
        curve = [e.train_accuracy for e in report.epochs]
        (out / "accuracy.svg").write_text(
            svg_polyline(curve, title="train accuracy by epoch"), encoding="utf-8"
        )
    msg = f"final train accuracy {report.final_train_accuracy:.4f}"
    if report.final_test_accuracy is not None:
        msg += f", test accuracy {report.final_test_accuracy:.4f}"
    print(msg)
    return 0


def echo_jsonable(pairs: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in pairs.items()}


def cmd_mi_profile(args, parser) -> int:
    model_path = Path(args.model)
    if not model_path.is_file():
        raise DataError(f"{args.model}: no such file")
    model = load_model(model_path)
    data = _load_dataset(args.data)
    expected = model.weights[0].shape[0]
    if data.dim != expected:
        raise DataError(
            f"{args.data}: {data.dim} feature columns, model expects {expected}"
        )
    records = mi_profile(model, data, max_rows=args.max_rows)
    text = mi_profile_csv(records)
    out = _out_dir(args.out)
    (out / "mi_profile.csv").write_text(text, encoding="utf-8")
    echo_config(
        out,
        "mi-profile",
        {"model": str(args.model), "data": str(args.data), "max_rows": args.max_rows},
    )
    sys.stdout.write(text)
    return 0


# -- parser ------------------------------------------------------------------


def _add_config_flags(sub) -> None:
    sub.add_argument("--config", help="key=value config file with # comments")
    sub.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key; repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imslearn",
        description="Invariant, compressed representation training and auditing.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser(
        "gen-data", help="write a synthetic spurious-shift benchmark to CSV"
    )
    _add_config_flags(gen)
    gen.add_argument("--seed", type=int, help="dataset seed (default from config)")
    gen.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or .)")
    gen.set_defaults(func=cmd_gen_data)

    audit = subs.add_parser(
        "audit-shift", help="per-class kernel two-sample audit of two splits"
    )
    audit.add_argument("--train", required=True, help="training split CSV")
    audit.add_argument("--test", required=True, help="comparison split CSV")
    audit.add_argument("--perms", type=int, default=100, help="permutations (default 100)")
    audit.add_argument(
        "--level", type=float, default=0.95, help="significance level (default 0.95)"
    )
    audit.add_argument("--seed", type=int, default=0, help="permutation seed")
    audit.add_argument("--jobs", type=int, default=1, help="parallel class audits")
    audit.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or .)")
    audit.set_defaults(func=cmd_audit_shift)

    part = subs.add_parser(
        "partition", help="soft k-means environments for a feature file"
    )
    part.add_argument("--features", required=True, help="dataset CSV to cluster")
    _add_config_flags(part)
    part.add_argument("--k", type=int, help="number of environments (default 5)")
    part.add_argument("--seed", type=int, help="restart seed (default 0)")
    part.add_argument("--stiffness", type=float, help="responsibility sharpness")
    part.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or .)")
    part.set_defaults(func=cmd_partition)

    tr = subs.add_parser("train", help="fit a model on a generated dataset directory")
    tr.add_argument(
        "--data-dir", required=True, help="directory holding train.csv (and test.csv)"
    )
    _add_config_flags(tr)
    tr.add_argument("--method", choices=METHODS, help="objective (default ims)")
    tr.add_argument("--eta", type=float, help="alignment weight (default 0.005)")
    tr.add_argument("--beta", type=float, help="compression weight (default 0.05)")
    tr.add_argument("--k", type=int, help="environments (default 5)")
    tr.add_argument("--seed", type=int, help="training seed (default 0)")
    tr.add_argument(
        "--svg", action="store_true", help="also write accuracy.svg train curve"
    )
    tr.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or .)")
    tr.set_defaults(func=cmd_train)

    mi = subs.add_parser(
        "mi-profile", help="per-layer information profile of a saved model"
    )
    mi.add_argument("--model", required=True, help="model.bin written by train")
    mi.add_argument("--data", required=True, help="dataset CSV to profile on")
    mi.add_argument(
        "--max-rows", type=int, default=256, help="rows used for the estimate"
    )
    mi.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or .)")
    mi.set_defaults(func=cmd_mi_profile)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
