"""Models, synthetic shift benchmarks, training, and profiling.

The model is a small dense network trained with momentum SGD under a
cosine-decayed learning rate. When the objective needs environments,
one warm-up epoch of plain cross entropy runs first, the partition is
fitted on the warmed-up features (or the raw inputs, when configured),
and the memberships stay frozen for the rest of training.

The synthetic benchmark generates a classification problem whose
invariant signal survives distribution shift while a set of spurious
columns flips its correlation with the label between training and
test. Training data mixes a majority regime with a minority regime
drawn the same way as the test set, so a learner leaning on the
spurious columns looks good in training and pays for it at test time.
"""

import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape
from .environments import EnvironmentAssignment, PartitionConfig, soft_kmeans
from .errors import ConfigError, DataError, NumericalError
from .infotheory import (
    DEFAULT_ALPHA,
    gaussian_gram,
    indicator_gram,
    joint_npd,
    median_bandwidth,
    normalize_gram,
    renyi_entropy,
)
from .objectives import TrainConfig, build_loss

ACTIVATIONS = ("tanh", "relu")


# -- model ----------------------------------------------------------------


@dataclass
class MlpModel:
    """Dense network: affine layers with a shared hidden activation."""

    weights: list
    biases: list
    activation: str = "tanh"

    @property
    def layer_sizes(self) -> tuple:
        return tuple(w.shape[0] for w in self.weights) + (self.weights[-1].shape[1],)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpModel":
        return MlpModel(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
        )


def init_mlp(layer_sizes, activation: str = "tanh", seed: int = 0) -> MlpModel:
    """Uniform fan-in initialization: U(-1/sqrt(d_in), 1/sqrt(d_in))."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigError(f"layer sizes must be at least two positive ints, got {sizes}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(d_in)
        weights.append(rng.uniform(-bound, bound, (d_in, d_out)))
        biases.append(rng.uniform(-bound, bound, d_out))
    return MlpModel(weights=weights, biases=biases, activation=activation)


def forward(model: MlpModel, x) -> tuple:
    """Numpy forward pass: (list of hidden activations, logits)."""
    act = np.tanh if model.activation == "tanh" else lambda v: np.maximum(v, 0.0)
    h = np.asarray(x, dtype=np.float64)
    hiddens = []
    for i in range(model.n_layers - 1):
        h = act(h @ model.weights[i] + model.biases[i])
        hiddens.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    return hiddens, logits


def param_dict(model: MlpModel) -> dict:
    out = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        out[f"w{i}"] = w
        out[f"b{i}"] = b
    return out


def tape_forward(tape: Tape, model: MlpModel, param_nodes: dict, x: np.ndarray):
    """Tape forward pass returning (hidden nodes, logits node)."""
    h = tape.input(x, name="x")
    hiddens = []
    for i in range(model.n_layers - 1):
        pre = tape.add(tape.matmul(h, param_nodes[f"w{i}"]), param_nodes[f"b{i}"])
        h = tape.tanh(pre) if model.activation == "tanh" else tape.relu(pre)
        hiddens.append(h)
    logits = tape.add(
        tape.matmul(h, param_nodes[f"w{model.n_layers - 1}"]),
        param_nodes[f"b{model.n_layers - 1}"],
    )
    return hiddens, logits


MODEL_MAGIC = b"IMSM"
MODEL_VERSION = 1
_ACT_CODES = {"tanh": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def save_model(model: MlpModel, path) -> None:
    """Write the model in the versioned little-endian binary layout."""
    sizes = model.layer_sizes
    parts = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_VERSION),
        struct.pack("<B", _ACT_CODES[model.activation]),
        struct.pack("<I", len(sizes)),
        struct.pack(f"<{len(sizes)}I", *sizes),
    ]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> MlpModel:
    """Read a model written by :func:`save_model`, validating the layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 13 or blob[:4] != MODEL_MAGIC:
        raise DataError(f"{path}: not a model file (bad magic)")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != MODEL_VERSION:
        raise DataError(f"{path}: unsupported model format version {version}")
    act_code = blob[8]
    if act_code not in _ACT_NAMES:
        raise DataError(f"{path}: unknown activation code {act_code}")
    n_sizes = struct.unpack_from("<I", blob, 9)[0]
    if n_sizes < 2:
        raise DataError(f"{path}: model needs at least two layer sizes")
    offset = 13
    if len(blob) < offset + 4 * n_sizes:
        raise DataError(f"{path}: truncated header")
    sizes = struct.unpack_from(f"<{n_sizes}I", blob, offset)
    offset += 4 * n_sizes
    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        need = 8 * (d_in * d_out + d_out)
        if len(blob) < offset + need:
            raise DataError(f"{path}: truncated parameter block")
        w = np.frombuffer(blob, dtype="<f8", count=d_in * d_out, offset=offset)
        offset += 8 * d_in * d_out
        b = np.frombuffer(blob, dtype="<f8", count=d_out, offset=offset)
        offset += 8 * d_out
        weights.append(w.reshape(d_in, d_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return MlpModel(weights=weights, biases=biases, activation=_ACT_NAMES[act_code])


# -- data -----------------------------------------------------------------


@dataclass
class SynthConfig:
    """Shape of the synthetic spurious-correlation benchmark.

    ``train_corr`` is the spurious correlation in the majority training
    regime; the minority regime and the whole test split use
    ``shift_corr``. Each class pair takes antipodal means of norm
    ``separation`` along its own unit direction, spread across all
    invariant dims rather than sitting on one axis, so the per-dim
    signal shrinks with ``invariant_dims`` while the best achievable
    accuracy stays the unit Gaussian CDF at ``separation``.
    """

    classes: int = 2
    train_per_class: int = 300
    test_per_class: int = 300
    invariant_dims: int = 2
    separation: float = 1.0
    spurious_dims: int = 4
    train_corr: float = 0.9
    shift_corr: float = -0.9
    noise_dims: int = 2
    majority_fraction: float = 0.75
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError(f"need at least two classes, got {self.classes}")
        if self.classes > 2 * self.invariant_dims:
            raise ConfigError(
                f"{self.classes} classes need at least "
                f"{(self.classes + 1) // 2} invariant dims, got {self.invariant_dims}"
            )
        if self.train_per_class < 2 or self.test_per_class < 2:
            raise ConfigError("need at least two rows per class and split")
        if self.spurious_dims < 0 or self.noise_dims < 0 or self.invariant_dims < 1:
            raise ConfigError("dimension counts must be non-negative, invariant at least 1")
        if not self.separation > 0:
            raise ConfigError(f"separation must be positive, got {self.separation!r}")
        for name in ("train_corr", "shift_corr"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [-1, 1], got {v!r}")
        if not 0.0 < self.majority_fraction <= 1.0:
            raise ConfigError(
                f"majority_fraction must lie in (0, 1], got {self.majority_fraction!r}"
            )

    @property
    def dim(self) -> int:
        return self.invariant_dims + self.spurious_dims + self.noise_dims


@dataclass
class LabeledDataset:
    """Feature rows with integer labels and a per-row source tag."""

    features: np.ndarray
    labels: np.ndarray
    tags: np.ndarray

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def save_csv(self, path) -> None:
        header = ",".join(f"f_{j}" for j in range(self.dim)) + ",label,tag"
        lines = [header]
        for i in range(self.n):
            feats = ",".join(repr(float(v)) for v in self.features[i])
            lines.append(f"{feats},{int(self.labels[i])},{self.tags[i]}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load_csv(cls, path) -> "LabeledDataset":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if not lines:
            raise DataError(f"{path}: empty file")
        cols = lines[0].split(",")
        if len(cols) < 3 or cols[-2] != "label" or cols[-1] != "tag":
            raise DataError(f"{path}: header must end with 'label,tag'")
        d = len(cols) - 2
        expected = [f"f_{j}" for j in range(d)]
        if cols[:d] != expected:
            raise DataError(f"{path}: feature columns must be f_0..f_{d - 1} in order")
        feats, labels, tags = [], [], []
        for ln_no, ln in enumerate(lines[1:], start=2):
            parts = ln.split(",")
            if len(parts) != d + 2:
                raise DataError(f"{path}:{ln_no}: expected {d + 2} fields, got {len(parts)}")
            try:
                feats.append([float(v) for v in parts[:d]])
                labels.append(int(parts[d]))
            except ValueError as exc:
                raise DataError(f"{path}:{ln_no}: {exc}") from None
            tags.append(parts[d + 1])
        features = np.array(feats, dtype=np.float64)
        if not np.all(np.isfinite(features)):
            raise DataError(f"{path}: non-finite feature values")
        return cls(
            features=features,
            labels=np.array(labels, dtype=np.int64),
            tags=np.array(tags, dtype=object),
        )


def class_directions(classes: int, dims: int) -> np.ndarray:
    """Orthonormal cosine-basis rows, one unit direction per class pair.

    Row 0 is the uniform direction, so a two-class problem spreads its
    mean offset evenly over every invariant dim instead of loading one
    axis; rows stay mutually orthogonal for any number of classes.
    """
    pairs = (classes + 1) // 2
    a = np.arange(pairs, dtype=np.float64)[:, None]
    j = np.arange(dims, dtype=np.float64)[None, :]
    basis = np.sqrt(2.0 / dims) * np.cos(np.pi * (2.0 * j + 1.0) * a / (2.0 * dims))
    basis[0, :] = np.sqrt(1.0 / dims)
    return basis


def _regime_block(cfg: SynthConfig, per_class: int, corr: float, tag: str, rng):
    rows, labels = [], []
    dirs = class_directions(cfg.classes, cfg.invariant_dims)
    for c in range(cfg.classes):
        inv = rng.standard_normal((per_class, cfg.invariant_dims))
        sign = 1.0 if c % 2 == 0 else -1.0
        inv += sign * cfg.separation * dirs[c // 2]
        parity = 1.0 if c % 2 == 0 else -1.0
        spur = corr * parity + np.sqrt(1.0 - corr**2) * rng.standard_normal(
            (per_class, cfg.spurious_dims)
        )
        noise = rng.standard_normal((per_class, cfg.noise_dims))
        rows.append(np.hstack([inv, spur, noise]))
        labels.append(np.full(per_class, c, dtype=np.int64))
    x = np.vstack(rows)
    y = np.concatenate(labels)
    tags = np.array([tag] * x.shape[0], dtype=object)
    return x, y, tags


def gen_spurious(cfg: SynthConfig) -> tuple:
    """Generate (train, test) splits of the spurious-correlation benchmark.

    Per class, ``majority_fraction`` of the training rows come from the
    ``train_corr`` regime (tag ``major``) and the rest from the
    ``shift_corr`` regime (tag ``minor``); the test split is drawn
    entirely from the shifted regime (tag ``shift``). Row order is
    shuffled within each split.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_major = round(cfg.majority_fraction * cfg.train_per_class)
    n_minor = cfg.train_per_class - n_major
    xa, ya, ta = _regime_block(cfg, n_major, cfg.train_corr, "major", rng)
    blocks = [(xa, ya, ta)]
    if n_minor > 0:
        blocks.append(_regime_block(cfg, n_minor, cfg.shift_corr, "minor", rng))
    x = np.vstack([b[0] for b in blocks])
    y = np.concatenate([b[1] for b in blocks])
    tags = np.concatenate([b[2] for b in blocks])
    perm = rng.permutation(x.shape[0])
    train = LabeledDataset(features=x[perm], labels=y[perm], tags=tags[perm])

    xt, yt, tt = _regime_block(cfg, cfg.test_per_class, cfg.shift_corr, "shift", rng)
    perm_t = rng.permutation(xt.shape[0])
    test = LabeledDataset(features=xt[perm_t], labels=yt[perm_t], tags=tt[perm_t])
    return train, test


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    learning_rate: float
    mean_total: float
    mean_cross_entropy: float
    mean_alignment: float
    mean_compression: float
    train_accuracy: float
    bandwidth: float = 0.0


@dataclass
class RunReport:
    """Everything one training run produced, minus the model weights.

    Two runs with identical data and config compare equal; wall time is
    carried but excluded from the comparison.
    """

    method: str
    seed: int
    config: dict
    epochs: tuple
    final_train_accuracy: float
    final_test_accuracy: float | None
    env_sizes: tuple | None
    decomposition_max_defect: float
    wall_time_s: float = field(compare=False, default=0.0)

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "epochs": [asdict(e) for e in self.epochs],
            "final_train_accuracy": self.final_train_accuracy,
            "final_test_accuracy": self.final_test_accuracy,
            "env_sizes": list(self.env_sizes) if self.env_sizes is not None else None,
            "decomposition_max_defect": self.decomposition_max_defect,
            "wall_time_s": self.wall_time_s,
        }


def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    """Cosine-decayed learning rate indexed by epoch."""
    return base * 0.5 * (1.0 + np.cos(np.pi * epoch / total_epochs))


def _child_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence((int(seed), int(stream))).generate_state(1)[0])


def evaluate(model: MlpModel, data: LabeledDataset) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class id."""
    _, logits = forward(model, data.features)
    return float((np.argmax(logits, axis=1) == data.labels).mean())


def partition_features(model: MlpModel, data: LabeledDataset, config: TrainConfig) -> np.ndarray:
    """The array the environment partition clusters, per configuration."""
    if config.partition_on == "raw":
        return data.features
    hiddens, _ = forward(model, data.features)
    return hiddens[-1]


def fit_partition(
    model: MlpModel, data: LabeledDataset, config: TrainConfig
) -> EnvironmentAssignment:
    feats = partition_features(model, data, config)
    pcfg = PartitionConfig(
        k=config.k,
        stiffness=config.stiffness,
        seed=_child_seed(config.seed, 2),
    )
    return soft_kmeans(feats, pcfg)


def _run_epoch(
    model, data, config, gamma, order, lr, epoch, plain_ce, velocities, bandwidth=None
):
    """One pass over the shuffled rows; returns per-term means and defect."""
    params = param_dict(model)
    n = data.n
    steps = n // config.batch_size
    sums = np.zeros(4)
    defect = 0.0
    for s in range(steps):
        idx = order[s * config.batch_size : (s + 1) * config.batch_size]
        x, y = data.features[idx], data.labels[idx]
        tape = Tape()
        nodes = {k: tape.input(v, name=k) for k, v in params.items()}
        hiddens, logits = tape_forward(tape, model, nodes, x)
        if plain_ce:
            parts = build_loss(
                tape, logits, hiddens[-1], y, None,
                TrainConfig(method="erm", batch_size=config.batch_size),
            )
        else:
            mem = gamma[idx] if gamma is not None else None
            parts = build_loss(
                tape, logits, hiddens[-1], y, mem, config, bandwidth=bandwidth
            )
        values = parts.term_values()
        for name, v in values.items():
            if not np.isfinite(v):
                raise NumericalError(
                    f"{name} became {v!r} at epoch {epoch} step {s}"
                )
        defect = max(defect, parts.decomposition_defect())
        tape.backward(parts.total)
        for key, node in nodes.items():
            g = node.adjoint
            if not np.all(np.isfinite(g)):
                raise NumericalError(
                    f"gradient of {key} became non-finite at epoch {epoch} step {s}"
                )
            v = velocities[key]
            v *= config.momentum
            v -= lr * g
            params[key] += v
        sums += [values["total"], values["cross_entropy"],
                 values["alignment"], values["compression"]]
    return sums / steps, defect


def train(
    model: MlpModel,
    data: LabeledDataset,
    config: TrainConfig,
    assignment: EnvironmentAssignment | None = None,
    eval_data: LabeledDataset | None = None,
) -> tuple:
    """Train a copy of the model; returns (trained model, run report).

    Methods that use environments and receive no precomputed
    ``assignment`` spend the first ``config.warm_epochs`` epochs on
    plain cross entropy, fit the partition on the features those epochs
    produced, and train the remaining epochs on the full objective with
    memberships frozen. Identical data, config, and model give
    bitwise-identical results.
    """
    config.validate()
    if data.n < config.batch_size:
        raise DataError(
            f"dataset has {data.n} rows, smaller than batch_size {config.batch_size}"
        )
    if assignment is not None and assignment.n_rows != data.n:
        raise DataError(
            f"assignment covers {assignment.n_rows} rows, dataset has {data.n}"
        )
    started = time.perf_counter()
    model = model.copy()
    shuffle_rng = np.random.default_rng(_child_seed(config.seed, 1))
    velocities = {k: np.zeros_like(v) for k, v in param_dict(model).items()}

    needs_partition = config.engages_environments() and assignment is None
    gamma = assignment.memberships if assignment is not None else None
    _, beta_eff, use_variance = config.effective_weights()
    needs_sigma = beta_eff > 0.0 and not use_variance

    records = []
    max_defect = 0.0
    for epoch in range(config.epochs):
        lr = cosine_lr(config.learning_rate, epoch, config.epochs)
        order = shuffle_rng.permutation(data.n)
        plain = needs_partition and epoch < config.warm_epochs
        sigma = None
        if needs_sigma and not plain:
            # Bandwidth for the compression term is resolved once per
            # epoch on the whole training representation, not per batch;
            # a tight batch of collapsed features would otherwise shrink
            # the kernel scale and blow up the entropy gradient.
            hid, _ = forward(model, data.features)
            sigma = median_bandwidth(hid[-1])
        means, defect = _run_epoch(
            model, data, config, gamma, order, lr, epoch, plain, velocities,
            bandwidth=sigma,
        )
        max_defect = max(max_defect, defect)
        if plain and epoch == config.warm_epochs - 1:
            assignment = fit_partition(model, data, config)
            gamma = assignment.memberships
        records.append(
            EpochRecord(
                epoch=epoch,
                learning_rate=float(lr),
                mean_total=float(means[0]),
                mean_cross_entropy=float(means[1]),
                mean_alignment=float(means[2]),
                mean_compression=float(means[3]),
                train_accuracy=evaluate(model, data),
                bandwidth=float(sigma) if sigma is not None else 0.0,
            )
        )

    env_sizes = None
    if config.engages_environments() and assignment is not None:
        counts = np.bincount(assignment.hard_labels(), minlength=assignment.k)
        env_sizes = tuple(int(c) for c in counts)

    report = RunReport(
        method=config.method,
        seed=config.seed,
        config=asdict(config),
        epochs=tuple(records),
        final_train_accuracy=evaluate(model, data),
        final_test_accuracy=evaluate(model, eval_data) if eval_data is not None else None,
        env_sizes=env_sizes,
        decomposition_max_defect=float(max_defect),
        wall_time_s=time.perf_counter() - started,
    )
    return model, report


# -- information profile ------------------------------------------------------


@dataclass(frozen=True)
class LayerMi:
    """Information shared between one hidden layer and the inputs/labels."""

    layer: int
    i_x_phi_bits: float
    i_y_phi_bits: float


def mi_profile(
    model: MlpModel,
    data: LabeledDataset,
    alpha: float = DEFAULT_ALPHA,
    max_rows: int = 256,
) -> list:
    """Per-layer information estimates on the first ``max_rows`` rows.

    For each hidden layer the profile reports the spectral mutual
    information between the layer activations and the raw inputs, and
    between the activations and the labels. A compressing objective
    lowers the first column; a healthy classifier keeps the second.
    """
    if data.n < 16:
        raise DataError(f"information profile needs at least 16 rows, got {data.n}")
    rows = min(max_rows, data.n)
    x = data.features[:rows]
    y = data.labels[:rows]
    hiddens, _ = forward(model, x)

    ax = normalize_gram(gaussian_gram(x, median_bandwidth(x)))
    ay = normalize_gram(indicator_gram(y))
    s_x = renyi_entropy(ax, alpha)
    s_y = renyi_entropy(ay, alpha)

    out = []
    for layer, phi in enumerate(hiddens, start=1):
        if float(np.ptp(phi, axis=0).max()) == 0.0:
            # Constant activations: the gram is rank one, the layer
            # entropy is zero, and both joint spectra collapse onto the
            # other argument's, so the information is exactly zero.
            out.append(LayerMi(layer=layer, i_x_phi_bits=0.0, i_y_phi_bits=0.0))
            continue
        aphi = normalize_gram(gaussian_gram(phi, median_bandwidth(phi)))
        s_phi = renyi_entropy(aphi, alpha)
        i_x = s_x + s_phi - renyi_entropy(joint_npd(ax, aphi), alpha)
        i_y = s_y + s_phi - renyi_entropy(joint_npd(ay, aphi), alpha)
        out.append(LayerMi(layer=layer, i_x_phi_bits=float(i_x), i_y_phi_bits=float(i_y)))
    return out


def mi_profile_csv(records) -> str:
    lines = ["layer,i_x_phi_bits,i_y_phi_bits"]
    for r in records:
        lines.append(f"{r.layer},{r.i_x_phi_bits!r},{r.i_y_phi_bits!r}")
    return "\n".join(lines) + "\n"
