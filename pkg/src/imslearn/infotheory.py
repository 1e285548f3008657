"""Spectral information estimates and kernel two-sample auditing.

All quantities here are computed from gram matrices of the data batch
itself, so no density estimation or binning is involved. A gram matrix
normalized to unit trace plays the role of a density operator; the
entropy of order ``alpha`` of its eigenvalue spectrum measures how
spread out the batch is in the kernel's feature space, in bits. With
``alpha`` close to one this tracks Shannon entropy while keeping a
closed-form gradient, which is what lets the entropy act as a
differentiable compression penalty during training.

Joint quantities come from entrywise products of the individual gram
matrices (renormalized to unit trace), giving mutual and conditional
information estimates between arbitrary mixes of continuous features
and integer labels. The same kernels back a biased maximum mean
discrepancy statistic with a permutation-derived significance bound,
used to audit distribution shift per class.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .numerics import clamp_small, sym_eig

DEFAULT_ALPHA = 1.01
TRACE_TOL = 1e-8


# -- kernels -----------------------------------------------------------


def _as_feature_matrix(data) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d feature array, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty feature array")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite entries")
    return x


def _sq_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Direct differences, not the expanded norm identity: the expansion
    # cancels catastrophically for near-duplicate rows, and that error
    # is large enough to make tight-cluster gram matrices indefinite
    # once the bandwidth shrinks to the within-cluster scale.
    diff = x[:, None, :] - y[None, :, :]
    return (diff * diff).sum(axis=2)


def median_bandwidth(features) -> float:
    """Median pairwise Euclidean distance divided by sqrt(2).

    With this choice the squared median distance equals ``2 sigma^2``,
    so the Gaussian kernel evaluates to ``exp(-1)`` at the median
    separation. Raises :class:`NumericalError` when fewer than two rows
    are given or all rows coincide, since no length scale exists then.
    """
    x = _as_feature_matrix(features)
    n = x.shape[0]
    if n < 2:
        raise NumericalError("bandwidth needs at least two rows")
    d2 = _sq_distances(x, x)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    if med <= 0.0:
        raise NumericalError("median pairwise distance is zero, bandwidth undefined")
    return med / np.sqrt(2.0)


def gaussian_gram(features, bandwidth: float) -> np.ndarray:
    """Gram matrix ``exp(-|x_i - x_j|^2 / (2 sigma^2))`` on the rows."""
    x = _as_feature_matrix(features)
    sigma = float(bandwidth)
    if not np.isfinite(sigma) or sigma <= 0.0:
        raise NumericalError(f"bandwidth must be positive and finite, got {sigma!r}")
    k = np.exp(-_sq_distances(x, x) / (2.0 * sigma * sigma))
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, 1.0)
    return k


def indicator_gram(labels) -> np.ndarray:
    """Gram matrix of the equality kernel on integer labels."""
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError("labels must be a 1-d array")
    if y.shape[0] == 0:
        raise ValueError("empty label array")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    return (y[:, None] == y[None, :]).astype(np.float64)


def normalize_gram(kernel: np.ndarray) -> np.ndarray:
    """Scale a gram matrix to a unit-trace density surrogate.

    Entry ``(i, j)`` becomes ``k_ij / (n sqrt(k_ii k_jj))``; the
    diagonal is then ``1/n`` by construction.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"expected a square gram matrix, got shape {k.shape}")
    diag = np.diag(k)
    if np.any(diag <= 0.0):
        raise NumericalError("gram diagonal must be strictly positive")
    n = k.shape[0]
    root = np.sqrt(diag)
    a = k / (n * root[:, None] * root[None, :])
    np.fill_diagonal(a, 1.0 / n)
    return 0.5 * (a + a.T)


# -- entropy -----------------------------------------------------------


def _validate_alpha(alpha: float) -> float:
    a = float(alpha)
    if not np.isfinite(a) or a <= 0.0 or a == 1.0:
        raise ValueError(f"entropy order must be positive and not 1, got {a!r}")
    return a


def _unit_trace_spectrum(npd_matrix: np.ndarray) -> np.ndarray:
    decomp = sym_eig(npd_matrix)
    tr = float(np.trace(np.asarray(npd_matrix, dtype=np.float64)))
    if abs(tr - 1.0) > TRACE_TOL:
        raise ValueError(f"matrix trace {tr!r} is not 1, normalize the gram first")
    vals = clamp_small(decomp.eigenvalues)
    if vals.min() < 0.0:
        raise NumericalError(
            f"matrix has negative eigenvalue {vals.min()!r}, not a density surrogate"
        )
    return vals


def renyi_entropy(npd_matrix: np.ndarray, alpha: float = DEFAULT_ALPHA) -> float:
    """Entropy of order ``alpha`` of a unit-trace gram matrix, in bits.

    Computed as ``log2(sum(lam_i^alpha)) / (1 - alpha)`` over the
    eigenvalue spectrum. Eigenvalues below ``1e-12`` in magnitude are
    treated as exact zeros; genuinely negative ones raise
    :class:`NumericalError`.
    """
    a = _validate_alpha(alpha)
    vals = _unit_trace_spectrum(npd_matrix)
    power_sum = float(np.sum(vals[vals > 0.0] ** a))
    return float(np.log2(power_sum) / (1.0 - a))


def renyi_entropy_backward(npd_matrix: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Gradient of :func:`renyi_entropy` with respect to every matrix entry.

    For eigendecomposition ``A = U diag(lam) U^T`` the gradient is
    ``alpha / ((1 - alpha) ln 2 tr(A^alpha)) * A^(alpha - 1)`` with the
    fractional power taken on the clamped spectrum.
    """
    a = _validate_alpha(alpha)
    decomp = sym_eig(npd_matrix)
    tr = float(np.trace(np.asarray(npd_matrix, dtype=np.float64)))
    if abs(tr - 1.0) > TRACE_TOL:
        raise ValueError(f"matrix trace {tr!r} is not 1, normalize the gram first")
    vals = clamp_small(decomp.eigenvalues)
    if vals.min() < 0.0:
        raise NumericalError(
            f"matrix has negative eigenvalue {vals.min()!r}, not a density surrogate"
        )
    positive = vals > 0.0
    power_sum = float(np.sum(vals[positive] ** a))
    frac = np.zeros_like(vals)
    frac[positive] = vals[positive] ** (a - 1.0)
    u = decomp.eigenvectors
    coeff = a / ((1.0 - a) * np.log(2.0) * power_sum)
    return coeff * ((u * frac) @ u.T)


def feature_entropy(features, alpha: float = DEFAULT_ALPHA, bandwidth: float | None = None) -> float:
    """Spectral entropy of a feature batch under the Gaussian kernel.

    When ``bandwidth`` is omitted the median heuristic fixes it from
    the batch itself.
    """
    x = _as_feature_matrix(features)
    sigma = median_bandwidth(x) if bandwidth is None else float(bandwidth)
    a = normalize_gram(gaussian_gram(x, sigma))
    return renyi_entropy(a, alpha)


def feature_entropy_backward(
    features, alpha: float = DEFAULT_ALPHA, bandwidth: float | None = None
) -> np.ndarray:
    """Gradient of :func:`feature_entropy` with respect to the rows.

    The bandwidth is held constant in the chain rule: when derived
    from the median heuristic it is treated as a per-batch constant,
    not differentiated through. With ``W = (G * K) / n`` where ``G`` is
    the entropy gradient at the normalized gram and ``K`` the raw
    kernel, the feature gradient is
    ``-(2 / sigma^2) (diag(W 1) X - W X)``.
    """
    x = _as_feature_matrix(features)
    sigma = median_bandwidth(x) if bandwidth is None else float(bandwidth)
    k = gaussian_gram(x, sigma)
    a = normalize_gram(k)
    g = renyi_entropy_backward(a, alpha)
    w = (g * k) / x.shape[0]
    row = w.sum(axis=1)
    return (-2.0 / (sigma * sigma)) * (row[:, None] * x - w @ x)


# -- joint and conditional quantities ----------------------------------


def joint_npd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Unit-trace entrywise product representing a joint distribution."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"operands must be square and same shape, got {a.shape} and {b.shape}")
    prod = a * b
    tr = float(np.trace(prod))
    if tr <= 0.0:
        raise NumericalError("entrywise product has non-positive trace")
    return prod / tr


def _gram_auto(data, bandwidth: float | None) -> np.ndarray:
    """Equality kernel for 1-d integer data, Gaussian otherwise."""
    arr = np.asarray(data)
    if arr.ndim == 1 and np.issubdtype(arr.dtype, np.integer):
        return indicator_gram(arr)
    x = _as_feature_matrix(arr)
    sigma = median_bandwidth(x) if bandwidth is None else float(bandwidth)
    return gaussian_gram(x, sigma)


def mutual_information(
    x,
    y,
    alpha: float = DEFAULT_ALPHA,
    x_bandwidth: float | None = None,
    y_bandwidth: float | None = None,
) -> float:
    """Spectral mutual information between two views of the same rows.

    ``S(A_x) + S(A_y) - S(A_x o A_y)`` in bits, where each gram is
    chosen automatically: the equality kernel for 1-d integer input,
    the Gaussian kernel with median bandwidth otherwise. Values can
    dip a hair below zero near independence; that is estimator noise,
    not a bug.
    """
    kx = _gram_auto(x, x_bandwidth)
    ky = _gram_auto(y, y_bandwidth)
    if kx.shape != ky.shape:
        raise ValueError("both views must cover the same rows")
    ax = normalize_gram(kx)
    ay = normalize_gram(ky)
    return (
        renyi_entropy(ax, alpha)
        + renyi_entropy(ay, alpha)
        - renyi_entropy(joint_npd(ax, ay), alpha)
    )


def conditional_mi(
    labels,
    envs,
    features,
    alpha: float = DEFAULT_ALPHA,
    bandwidth: float | None = None,
) -> float:
    """Information between labels and environment ids given the features.

    Expands to ``S(y, phi) + S(e, phi) - S(phi) - S(y, e, phi)`` with
    joints formed by entrywise kernel products. A value near zero says
    the features screen the labels off from the environment split, the
    invariance condition the training objective pushes toward.
    """
    ay = normalize_gram(indicator_gram(labels))
    ae = normalize_gram(indicator_gram(envs))
    x = _as_feature_matrix(features)
    if ay.shape[0] != x.shape[0] or ae.shape[0] != x.shape[0]:
        raise ValueError("labels, envs, and features must cover the same rows")
    sigma = median_bandwidth(x) if bandwidth is None else float(bandwidth)
    aphi = normalize_gram(gaussian_gram(x, sigma))
    s_yphi = renyi_entropy(joint_npd(ay, aphi), alpha)
    s_ephi = renyi_entropy(joint_npd(ae, aphi), alpha)
    s_phi = renyi_entropy(aphi, alpha)
    s_yephi = renyi_entropy(joint_npd(joint_npd(ay, ae), aphi), alpha)
    return s_yphi + s_ephi - s_phi - s_yephi


# -- two-sample statistics ----------------------------------------------


def mmd2_biased(x, y, bandwidth: float | None = None) -> float:
    """Biased squared maximum mean discrepancy between two samples.

    ``mean(K_xx) + mean(K_yy) - 2 mean(K_xy)`` under a Gaussian kernel
    whose bandwidth defaults to the median heuristic on the pooled
    rows. The estimate is a squared norm, so roundoff-level negatives
    are clamped to zero.
    """
    xa = _as_feature_matrix(x)
    ya = _as_feature_matrix(y)
    if xa.shape[1] != ya.shape[1]:
        raise ValueError("samples must share the feature dimension")
    pooled = np.vstack([xa, ya])
    sigma = median_bandwidth(pooled) if bandwidth is None else float(bandwidth)
    k = gaussian_gram(pooled, sigma)
    nx = xa.shape[0]
    kxx = k[:nx, :nx]
    kyy = k[nx:, nx:]
    kxy = k[:nx, nx:]
    return max(0.0, float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean()))


def _block_mmd(k: np.ndarray, mask_x: np.ndarray) -> np.ndarray:
    # mmd^2 for each 0/1 row of mask_x marking the first-sample slots.
    nx = mask_x.sum(axis=1)
    ny = mask_x.shape[1] - nx
    v = mask_x @ k
    sxx = (v * mask_x).sum(axis=1)
    sxy = (v * (1.0 - mask_x)).sum(axis=1)
    total = float(k.sum())
    syy = total - sxx - 2.0 * sxy
    vals = sxx / nx**2 + syy / ny**2 - 2.0 * sxy / (nx * ny)
    return np.maximum(vals, 0.0)


def permutation_bound(
    x,
    y,
    n_perm: int = 100,
    level: float = 0.95,
    seed: int = 0,
    bandwidth: float | None = None,
) -> float:
    """Significance bound for the biased MMD by sample relabeling.

    The pooled rows are relabeled ``n_perm`` times with a seeded
    generator, the biased MMD recomputed for each relabeling on the
    same kernel matrix, and the bound is the ``ceil(level * n_perm)``
    smallest of those values. An observed MMD strictly above the bound
    rejects the hypothesis that both samples share a distribution.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be inside (0, 1), got {level!r}")
    if n_perm < 1:
        raise ValueError("need at least one permutation")
    xa = _as_feature_matrix(x)
    ya = _as_feature_matrix(y)
    if xa.shape[1] != ya.shape[1]:
        raise ValueError("samples must share the feature dimension")
    pooled = np.vstack([xa, ya])
    sigma = median_bandwidth(pooled) if bandwidth is None else float(bandwidth)
    k = gaussian_gram(pooled, sigma)
    n, nx = pooled.shape[0], xa.shape[0]
    rng = np.random.default_rng(seed)
    masks = np.zeros((n_perm, n))
    for p in range(n_perm):
        masks[p, rng.permutation(n)[:nx]] = 1.0
    draws = np.sort(_block_mmd(k, masks))
    rank = int(np.ceil(level * n_perm)) - 1
    return float(draws[rank])


# -- per-class shift audit ----------------------------------------------


@dataclass(frozen=True)
class ClassShift:
    """Two-sample comparison of one class between two data splits."""

    class_id: int
    n_train: int
    n_test: int
    mmd: float
    bound: float
    significant: bool


@dataclass(frozen=True)
class ShiftReport:
    """Per-class shift audit with skipped classes and their reasons."""

    records: tuple
    skipped: tuple
    level: float
    n_perm: int

    def to_csv(self) -> str:
        lines = ["class_id,n_train,n_test,mmd,bound95,significant"]
        for r in self.records:
            flag = "true" if r.significant else "false"
            lines.append(
                f"{r.class_id},{r.n_train},{r.n_test},{r.mmd!r},{r.bound!r},{flag}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "level": self.level,
            "n_perm": self.n_perm,
            "records": [
                {
                    "class_id": r.class_id,
                    "n_train": r.n_train,
                    "n_test": r.n_test,
                    "mmd": r.mmd,
                    "bound95": r.bound,
                    "significant": r.significant,
                }
                for r in self.records
            ],
            "skipped": [
                {"class_id": cid, "reason": reason} for cid, reason in self.skipped
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def audit_class_shift(
    train_features,
    train_labels,
    test_features,
    test_labels,
    n_perm: int = 100,
    level: float = 0.95,
    seed: int = 0,
    jobs: int = 1,
) -> ShiftReport:
    """Audit every class for train/test distribution shift.

    Each class id present in either split is compared with the biased
    MMD and its permutation bound. Classes missing from one split or
    with fewer than two rows on a side are skipped with a reason
    rather than failing the audit. Per-class seeds are derived from
    ``(seed, class_id)``, so results do not depend on worker count or
    completion order; ``jobs`` only sets the thread pool width.
    """
    xtr = _as_feature_matrix(train_features)
    xte = _as_feature_matrix(test_features)
    ytr = np.asarray(train_labels)
    yte = np.asarray(test_labels)
    if ytr.shape[0] != xtr.shape[0] or yte.shape[0] != xte.shape[0]:
        raise DataError("label count does not match feature rows")
    if not (np.issubdtype(ytr.dtype, np.integer) and np.issubdtype(yte.dtype, np.integer)):
        raise DataError("labels must be integers")
    if xtr.shape[1] != xte.shape[1]:
        raise DataError("train and test feature dimensions differ")

    class_ids = sorted(set(np.unique(ytr).tolist()) | set(np.unique(yte).tolist()))

    def one_class(cid):
        a = xtr[ytr == cid]
        b = xte[yte == cid]
        if a.shape[0] < 2 or b.shape[0] < 2:
            side = "train" if a.shape[0] < 2 else "test"
            return None, (cid, f"fewer than 2 rows in {side}")
        child = np.random.SeedSequence((int(seed), int(cid)))
        child_seed = int(child.generate_state(1)[0])
        try:
            pooled = np.vstack([a, b])
            sigma = median_bandwidth(pooled)
            value = mmd2_biased(a, b, bandwidth=sigma)
            bound = permutation_bound(
                a, b, n_perm=n_perm, level=level, seed=child_seed, bandwidth=sigma
            )
        except NumericalError as exc:
            return None, (cid, str(exc))
        return (
            ClassShift(
                class_id=int(cid),
                n_train=int(a.shape[0]),
                n_test=int(b.shape[0]),
                mmd=value,
                bound=bound,
                significant=value > bound,
            ),
            None,
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one_class, class_ids))
    else:
        outcomes = [one_class(cid) for cid in class_ids]

    records = tuple(rec for rec, _ in outcomes if rec is not None)
    skipped = tuple(skip for _, skip in outcomes if skip is not None)
    return ShiftReport(records=records, skipped=skipped, level=level, n_perm=n_perm)
