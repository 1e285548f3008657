"""Soft environment discovery by annealed k-means.

Training environments are rarely labeled in tabular data, so they are
inferred: rows are softly assigned to ``k`` latent environments with
responsibilities proportional to ``exp(-s d^2)`` against learnable
centers. The responsibilities later weight per-environment risks, so
they must be reproducible to the byte: all order-dependent arithmetic
(seeding, center updates) runs on a canonically sorted copy of the
rows, which makes the result exactly equivariant under row
permutations of the input.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError

MASS_FLOOR = 1e-12


@dataclass
class PartitionConfig:
    """Settings for environment discovery.

    ``stiffness`` controls how sharply responsibilities concentrate;
    left unset it defaults to the reciprocal mean squared distance of
    the rows from their mean, which puts typical distances at order
    one in the exponent.
    """

    k: int = 5
    stiffness: float | None = None
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0
    restarts: int = 8

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.tol < 0:
            raise ConfigError(f"tol must be non-negative, got {self.tol}")
        if self.stiffness is not None and not self.stiffness > 0:
            raise ConfigError(f"stiffness must be positive, got {self.stiffness}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be at least 1, got {self.restarts}")


@dataclass(frozen=True)
class EnvironmentAssignment:
    """Soft memberships with the centers and objective that produced them."""

    memberships: np.ndarray
    centers: np.ndarray
    stiffness: float
    objective: float
    objective_history: tuple

    @property
    def n_rows(self) -> int:
        return self.memberships.shape[0]

    @property
    def k(self) -> int:
        return self.memberships.shape[1]

    def hard_labels(self) -> np.ndarray:
        """Most responsible environment per row; ties go to the lowest id."""
        return np.argmax(self.memberships, axis=1)

    def to_csv(self) -> str:
        k = self.k
        header = "row_index," + ",".join(f"gamma_{j}" for j in range(k)) + ",hard_label"
        hard = self.hard_labels()
        lines = [header]
        for i in range(self.n_rows):
            gammas = ",".join(repr(float(v)) for v in self.memberships[i])
            lines.append(f"{i},{gammas},{int(hard[i])}")
        return "\n".join(lines) + "\n"


def _sq_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - centers[None, :, :]
    return (d * d).sum(axis=2)


def _responsibilities(d2: np.ndarray, stiffness: float) -> np.ndarray:
    logits = -stiffness * d2
    logits -= logits.max(axis=1, keepdims=True)
    g = np.exp(logits)
    return g / g.sum(axis=1, keepdims=True)


def _seed_centers(xs: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # First center drawn by the generator, the rest greedy farthest-point.
    n = xs.shape[0]
    centers = np.empty((k, xs.shape[1]))
    centers[0] = xs[int(rng.integers(n))]
    d2 = ((xs - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        centers[j] = xs[int(np.argmax(d2))]
        d2 = np.minimum(d2, ((xs - centers[j]) ** 2).sum(axis=1))
    return centers


def default_stiffness(features: np.ndarray) -> float:
    """Reciprocal mean squared distance of the rows from their mean."""
    x = np.asarray(features, dtype=np.float64)
    spread = float(((x - x.mean(axis=0)) ** 2).sum(axis=1).mean())
    if spread <= 0.0:
        raise NumericalError("rows have zero spread, stiffness undefined")
    return 1.0 / spread


def _fit_once(xs, cfg: PartitionConfig, stiffness: float, rng) -> tuple:
    centers = _seed_centers(xs, cfg.k, rng)

    d2 = _sq_distances(xs, centers)
    gamma = _responsibilities(d2, stiffness)
    energy = float((gamma * d2).sum())
    history = [energy]

    for _ in range(cfg.max_iter):
        mass = gamma.sum(axis=0)
        new_centers = centers.copy()
        healthy = mass > MASS_FLOOR
        new_centers[healthy] = (gamma.T[healthy] @ xs) / mass[healthy, None]
        if not healthy.all():
            survivor_d2 = _sq_distances(xs, new_centers[healthy]).min(axis=1)
            for j in np.flatnonzero(~healthy):
                new_centers[j] = xs[int(np.argmax(survivor_d2))]
                survivor_d2 = np.minimum(
                    survivor_d2, ((xs - new_centers[j]) ** 2).sum(axis=1)
                )
        new_d2 = _sq_distances(xs, new_centers)
        new_gamma = _responsibilities(new_d2, stiffness)
        new_energy = float((new_gamma * new_d2).sum())
        if new_energy > energy:
            break
        improvement = energy - new_energy
        centers, gamma, energy = new_centers, new_gamma, new_energy
        history.append(energy)
        if improvement < cfg.tol:
            break
    return centers, gamma, energy, history


def soft_kmeans(features, config: PartitionConfig | None = None) -> EnvironmentAssignment:
    """Partition rows into soft environments.

    Alternates responsibility and center updates until the weighted
    distortion ``sum_il gamma_il d2_il`` improves by less than ``tol``.
    A step that would raise the distortion is rejected and iteration
    stops at the previous state, so ``objective_history`` is
    non-increasing by construction. Centers that lose essentially all
    mass are re-seeded at the row farthest from the surviving centers.

    The fit runs ``restarts`` times from different draws of the initial
    center and keeps the lowest-distortion result; greedy farthest-point
    seeding from a single start is otherwise prone to splitting the
    widest direction of the data repeatedly and missing smaller groups.

    Results are exactly equivariant under row permutation: permuting
    the input rows permutes the membership rows and changes nothing
    else, byte for byte.
    """
    cfg = config or PartitionConfig()
    cfg.validate()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected a 2-d feature array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite entries")
    n = x.shape[0]
    if n < cfg.k:
        raise DataError(f"need at least k={cfg.k} rows, got {n}")

    stiffness = cfg.stiffness if cfg.stiffness is not None else default_stiffness(x)

    # Canonical row order: every sum below runs in this order, so the
    # arithmetic is independent of how the caller arranged the rows.
    order = np.lexsort(x.T[::-1])
    xs = x[order]

    rng = np.random.default_rng(cfg.seed)
    best = None
    for _ in range(cfg.restarts):
        fit = _fit_once(xs, cfg, stiffness, rng)
        if best is None or fit[2] < best[2]:
            best = fit
    centers, gamma, energy, history = best

    memberships = np.empty_like(gamma)
    memberships[order] = gamma
    return EnvironmentAssignment(
        memberships=memberships,
        centers=centers,
        stiffness=float(stiffness),
        objective=energy,
        objective_history=tuple(history),
    )
