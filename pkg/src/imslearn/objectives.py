"""Training objectives built from per-environment risks.

The full objective combines three pressures. Per-environment
cross-entropy risks keep the classifier accurate everywhere. A
gradient-alignment penalty, the squared derivative of each
environment's risk with respect to a fixed unit scaling of the logits,
is zero exactly when the classifier is simultaneously optimal for
every environment and grows when some environment prefers rescaled
logits; minimizing it pushes toward features whose optimal readout is
shared. A compression term, the spectral entropy of the feature batch
(or its variance, for the baseline variant), squeezes out information
the label does not need.

Environments are soft: each sample carries a membership row and every
sum is membership-weighted. Hardened one-hot memberships reduce every
formula to its familiar per-group form.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape, register_custom
from .errors import ConfigError
from .infotheory import (
    DEFAULT_ALPHA,
    feature_entropy,
    feature_entropy_backward,
    median_bandwidth,
)

METHODS = ("erm", "irm", "ib", "ims", "ibirmvar")
ENV_MASS_FLOOR = 1e-9


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    method: str = "ims"
    eta: float = 0.005
    beta: float = 0.05
    alpha: float = DEFAULT_ALPHA
    k: int = 5
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    hard_env: bool = False
    normalize_env_risks: bool = False
    partition_on: str = "features"
    warm_epochs: int = 1
    stiffness: float | None = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.eta < 0 or self.beta < 0:
            raise ConfigError("penalty weights eta and beta must be non-negative")
        if not np.isfinite(self.alpha) or self.alpha <= 0 or self.alpha == 1.0:
            raise ConfigError(f"alpha must be positive and not 1, got {self.alpha!r}")
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.partition_on not in ("features", "raw"):
            raise ConfigError(
                f"partition_on must be 'features' or 'raw', got {self.partition_on!r}"
            )
        if self.engages_environments() and not 1 <= self.warm_epochs < self.epochs:
            raise ConfigError(
                f"warm_epochs must lie in [1, epochs), got {self.warm_epochs}"
            )
        if self.stiffness is not None and not self.stiffness > 0:
            raise ConfigError(f"stiffness must be positive, got {self.stiffness!r}")

    def effective_weights(self) -> tuple[float, float, bool]:
        """(risk-alignment weight, compression weight, use variance)."""
        eta = self.eta if self.method in ("irm", "ims", "ibirmvar") else 0.0
        beta = self.beta if self.method in ("ib", "ims", "ibirmvar") else 0.0
        return eta, beta, self.method == "ibirmvar"

    def uses_environments(self) -> bool:
        return self.method in ("irm", "ims", "ibirmvar")

    def engages_environments(self) -> bool:
        """True when a partition actually feeds the objective.

        With both penalty weights at zero the loss degenerates to plain
        pooled cross-entropy, so no partition is fit and training is
        byte-for-byte the ERM path; ``ims --eta 0 --beta 0`` equals
        ``erm`` exactly rather than approximately.
        """
        eta, beta, _ = self.effective_weights()
        return self.uses_environments() and (eta > 0.0 or beta > 0.0)


# -- membership-weighted statistics --------------------------------------


@dataclass(frozen=True)
class EnvRiskSet:
    """Per-environment weighted risks over one batch.

    Environments whose batch mass fell below the floor are absent
    from ``env_ids``; their risk is undefined on this batch.
    """

    env_ids: tuple
    risks: np.ndarray
    masses: np.ndarray


def _normalized_weights(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise ValueError("weights must have positive total mass")
    return w / total


def env_risks(per_sample_losses, memberships) -> EnvRiskSet:
    """Membership-weighted mean loss per environment."""
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    gamma = np.asarray(memberships, dtype=np.float64)
    if losses.ndim != 1 or gamma.ndim != 2 or gamma.shape[0] != losses.shape[0]:
        raise ValueError("losses must be (n,), memberships (n, k)")
    masses = gamma.sum(axis=0)
    kept = np.flatnonzero(masses > ENV_MASS_FLOOR)
    risks = (gamma[:, kept] * losses[:, None]).sum(axis=0) / masses[kept]
    return EnvRiskSet(env_ids=tuple(int(e) for e in kept), risks=risks, masses=masses[kept])


def dummy_grad(logits, labels, weights) -> float:
    """Derivative of the weighted risk with respect to a unit logit scaling.

    For risk ``R(g) = sum_i w_i ce(g * z_i, y_i) / sum_i w_i`` this is
    ``dR/dg`` at ``g = 1``, in closed form
    ``sum_i w_i sum_k (p_ik - [y_i = k]) z_ik / sum_i w_i``.
    A squared value accumulated over environments forms the alignment
    penalty.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    wbar = _normalized_weights(weights)
    p = _softmax(z)
    per_sample = (p * z).sum(axis=1) - z[np.arange(z.shape[0]), y]
    return float(wbar @ per_sample)


def dummy_grad_backward(logits, labels, weights) -> np.ndarray:
    """Gradient of :func:`dummy_grad` with respect to the logits.

    Per sample: ``w_i ((p_j - [y_i = j]) + p_j (z_j - sum_k z_k p_k))``
    with weights normalized to unit total.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    wbar = _normalized_weights(weights)
    p = _softmax(z)
    onehot = np.zeros_like(z)
    onehot[np.arange(z.shape[0]), y] = 1.0
    zbar = (p * z).sum(axis=1, keepdims=True)
    return wbar[:, None] * ((p - onehot) + p * (z - zbar))


def _softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def irm_penalty(risk_grads) -> float:
    """Sum of squared per-environment risk derivatives."""
    g = np.asarray(risk_grads, dtype=np.float64)
    return float((g**2).sum())


def harden_memberships(memberships) -> np.ndarray:
    """One-hot memberships at the per-row argmax, ties to the lowest id."""
    gamma = np.asarray(memberships, dtype=np.float64)
    out = np.zeros_like(gamma)
    out[np.arange(gamma.shape[0]), np.argmax(gamma, axis=1)] = 1.0
    return out


def batch_variance(features) -> float:
    """Mean squared deviation from the column means, across all entries."""
    x = np.asarray(features, dtype=np.float64)
    return float(((x - x.mean(axis=0)) ** 2).mean())


def batch_variance_backward(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    return (2.0 / x.size) * (x - x.mean(axis=0))


# -- tape construction ----------------------------------------------------


@dataclass
class LossParts:
    """A composed training loss with its addends kept addressable."""

    total: Node
    cross_entropy: Node
    alignment: Node | None
    compression: Node | None
    eta: float
    beta: float
    env_ids: tuple
    bandwidth: float | None = None
    use_variance: bool = False

    def term_values(self) -> dict:
        vals = {
            "total": self.total.item(),
            "cross_entropy": self.cross_entropy.item(),
            "alignment": self.alignment.item() if self.alignment else 0.0,
            "compression": self.compression.item() if self.compression else 0.0,
        }
        return vals

    def decomposition_defect(self) -> float:
        """How far the total drifts from the sum of its weighted terms."""
        v = self.term_values()
        rebuilt = v["cross_entropy"] + self.eta * v["alignment"] + self.beta * v["compression"]
        return abs(v["total"] - rebuilt)


def _fold_add(tape: Tape, nodes: list) -> Node:
    out = nodes[0]
    for node in nodes[1:]:
        out = tape.add(out, node)
    return out


def entropy_op(alpha: float, bandwidth: float):
    """Spectral feature entropy as a tape op with a frozen bandwidth."""
    return register_custom(
        forward=lambda x: feature_entropy(x, alpha, bandwidth),
        backward=lambda x: feature_entropy_backward(x, alpha, bandwidth),
        name="feature_entropy",
    )


VARIANCE_OP = register_custom(
    forward=batch_variance,
    backward=batch_variance_backward,
    name="batch_variance",
)


def build_loss(
    tape: Tape,
    logits: Node,
    features: Node,
    labels: np.ndarray,
    memberships: np.ndarray | None,
    config: TrainConfig,
    bandwidth: float | None = None,
) -> LossParts:
    """Assemble the configured objective on the tape.

    With ``memberships`` the cross-entropy term is the plain sum of
    per-environment risks, one weighted mean per environment with
    batch mass above the floor; pass ``normalize_env_risks`` to average
    over environments instead, which also averages the alignment
    penalty so both terms keep their per-environment meaning. Without
    memberships a single uniform environment is used, giving the
    ordinary batch mean.

    The compression bandwidth is resolved once per call, from
    ``bandwidth`` if given, else the median heuristic on the current
    feature values, and held constant inside the gradient.
    """
    y = np.asarray(labels)
    n = logits.value.shape[0]
    eta_eff, beta_eff, use_variance = config.effective_weights()

    per_sample = tape.softmax_cross_entropy(logits, y)

    if memberships is None:
        gamma = np.ones((n, 1))
    else:
        gamma = np.asarray(memberships, dtype=np.float64)
        if config.hard_env:
            gamma = harden_memberships(gamma)
    masses = gamma.sum(axis=0)
    kept = tuple(int(e) for e in np.flatnonzero(masses > ENV_MASS_FLOOR))
    if not kept:
        raise ValueError("no environment keeps positive batch mass")

    risk_nodes = [
        tape.sum(per_sample, weights=gamma[:, e] / masses[e]) for e in kept
    ]
    ce = _fold_add(tape, risk_nodes)
    if config.normalize_env_risks and len(kept) > 1:
        ce = tape.scale(ce, 1.0 / len(kept))

    alignment = None
    if eta_eff > 0.0:
        squares = []
        for e in kept:
            op = register_custom(
                forward=lambda z, w=gamma[:, e]: dummy_grad(z, y, w),
                backward=lambda z, w=gamma[:, e]: dummy_grad_backward(z, y, w),
                name="risk_scale_grad",
            )
            squares.append(tape.square(tape.custom(op, logits)))
        alignment = _fold_add(tape, squares)
        if config.normalize_env_risks and len(kept) > 1:
            alignment = tape.scale(alignment, 1.0 / len(kept))

    compression = None
    sigma = None
    if beta_eff > 0.0:
        if use_variance:
            compression = tape.custom(VARIANCE_OP, features)
        else:
            sigma = median_bandwidth(features.value) if bandwidth is None else float(bandwidth)
            compression = tape.custom(entropy_op(config.alpha, sigma), features)

    total = ce
    if alignment is not None:
        total = tape.add(total, tape.scale(alignment, eta_eff))
    if compression is not None:
        total = tape.add(total, tape.scale(compression, beta_eff))

    return LossParts(
        total=total,
        cross_entropy=ce,
        alignment=alignment,
        compression=compression,
        eta=eta_eff,
        beta=beta_eff,
        env_ids=kept,
        bandwidth=sigma,
        use_variance=use_variance,
    )
