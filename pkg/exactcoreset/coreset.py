import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from exactcoreset.utils import (
    DimensionMismatch,
    InvalidClusterCount,
    InvalidTarget,
    NoNullspace,
    Timer,
    timed,
)

logger = logging.getLogger(__name__)

NUM_CLUSTERS = 64
PIVOT_TOLERANCE = 1e-12
DIRECT_PASS_RATIO = 2
NULLSPACE_METHODS = ("lu", "svd")


@dataclass
class WeightedPointSet:
    """Points in R^L with nonnegative weights.

    `indices` maps every point back to its position in the set the caller started from,
    so subsets produced by the Caratheodory routines can be traced to the original rows.
    """

    points: np.ndarray
    weights: np.ndarray
    indices: np.ndarray = None

    def __post_init__(self):
        if isinstance(self.points, (list, tuple)):
            dims = {len(p) for p in self.points}
            if len(dims) > 1:
                raise DimensionMismatch(
                    f"Points have differing dimensions: {sorted(dims)}"
                )
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.points.ndim != 2:
            raise DimensionMismatch(f"Expected (N, L) points, got {self.points.shape}")
        if len(self.weights) != len(self.points):
            raise DimensionMismatch(
                f"{len(self.points)} points but {len(self.weights)} weights"
            )
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("Weights must be finite and nonnegative.")
        if self.indices is None:
            self.indices = np.arange(len(self.points), dtype=np.int64)
        else:
            self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def weighted_sum(self) -> np.ndarray:
        return self.weights @ self.points

    def take(self, mask: np.ndarray, weights: np.ndarray = None) -> "WeightedPointSet":
        return WeightedPointSet(
            self.points[mask],
            self.weights[mask] if weights is None else weights,
            self.indices[mask],
        )


@dataclass
class CoresetConfig:
    """
    Args:
        target_size (int): target output size M.
        cluster_count (int): number of clusters K used by the clustered variant (must be >= L + 2).
        rng_seed (int): seed for the shuffle that precedes extraction on point clouds.
        nullspace (str): nullspace kernel, "lu" (default) or the "svd" reference.
    """

    target_size: int = 29
    cluster_count: int = NUM_CLUSTERS
    rng_seed: int = 0
    nullspace: str = field(default="lu")

    def validate(self, dim: int):
        if self.target_size < dim + 1:
            raise InvalidTarget(
                f"Target size {self.target_size} is below the minimum {dim + 1} for L={dim}"
            )
        if self.cluster_count < dim + 2:
            raise InvalidClusterCount(
                f"Cluster count {self.cluster_count} is below the minimum {dim + 2} for L={dim}"
            )
        if self.nullspace not in NULLSPACE_METHODS:
            raise ValueError(f"Unknown nullspace method: {self.nullspace}")


@numba.njit(nogil=True)
def _lu_nullspace(A, tol):
    rows, cols = A.shape
    U = A.copy()
    pivot_cols = np.full(rows, -1, dtype=np.int64)
    is_pivot = np.zeros(cols, dtype=np.bool_)

    r = 0
    for c in range(cols):
        if r == rows:
            break
        p = r
        best = abs(U[r, c])
        for i in range(r + 1, rows):
            if abs(U[i, c]) > best:
                best = abs(U[i, c])
                p = i
        if best <= tol:
            continue
        if p != r:
            for j in range(c, cols):
                tmp = U[r, j]
                U[r, j] = U[p, j]
                U[p, j] = tmp
        for i in range(r + 1, rows):
            f = U[i, c] / U[r, c]
            if f != 0.0:
                for j in range(c, cols):
                    U[i, j] -= f * U[r, j]
        pivot_cols[r] = c
        is_pivot[c] = True
        r += 1

    v = np.zeros(cols)
    free = -1
    for c in range(cols):
        if not is_pivot[c]:
            free = c
            break
    if free < 0:
        return v, False

    v[free] = 1.0
    for k in range(r - 1, -1, -1):
        c = pivot_cols[k]
        s = 0.0
        for j in range(c + 1, cols):
            s += U[k, j] * v[j]
        v[c] = -s / U[k, c]
    return v, True


def _svd_nullspace(A: np.ndarray) -> np.ndarray:
    _, _, vh = np.linalg.svd(A)
    return vh[-1]


def nullspace_vector(A: np.ndarray, method: str = "lu") -> np.ndarray:
    """Find a nonzero v with Av = 0.

    The default kernel runs row elimination with partial pivoting (the U factor of an LU
    decomposition), takes the first column without a pivot as the free variable,
    sets it to 1 and back substitutes. `method="svd"` uses the last right singular vector instead.

    Args:
        A (NDArray): matrix of shape (L, N - 1) with N - 1 > L.
        method (str): "lu" or "svd".

    Returns:
        NDArray: nullspace vector of shape (N - 1,).
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise DimensionMismatch(f"Expected a matrix, got shape {A.shape}")
    if method == "svd":
        return _svd_nullspace(A)
    if method != "lu":
        raise ValueError(f"Unknown nullspace method: {method}")

    tol = PIVOT_TOLERANCE * np.max(np.abs(A)) if A.size else 0.0
    v, found = _lu_nullspace(A, tol)
    if not found:
        raise NoNullspace(f"Matrix of shape {A.shape} has full column rank")
    return v


def caratheodory(
    point_set: WeightedPointSet,
    target_size: int,
    nullspace: str = "lu",
    timer: Timer | None = None,
) -> WeightedPointSet:
    """Caratheodory's elimination. Removes redundant points one at a time while preserving the weighted sum.

    Each step works on a window of L + 2 active points, finds a vanishing affine combination of them
    and shifts weight along it until at least one weight reaches zero (all tied minima are zeroed together).

    Args:
        point_set (WeightedPointSet): input points with weights u.
        target_size (int): target output size M (>= L + 1).
        nullspace (str): nullspace kernel, "lu" or "svd".
        timer (Timer): optional phase timer.

    Returns:
        WeightedPointSet: subset of at most M input points with strictly positive weights.
    """
    dim = point_set.dim
    if target_size < dim + 1:
        raise InvalidTarget(
            f"Target size {target_size} is below the minimum {dim + 1} for L={dim}"
        )
    if len(point_set) <= target_size:
        return point_set

    points = point_set.points
    weights = point_set.weights.copy()
    window_size = dim + 2

    queue = iter(np.flatnonzero(weights > 0))
    remaining = np.count_nonzero(weights > 0)
    window = []

    with timed(timer, "caratheodory"):
        while remaining > target_size:
            while len(window) < window_size:
                window.append(next(queue))
            idx = np.array(window, dtype=np.int64)

            A = (points[idx[1:]] - points[idx[0]]).T
            with timed(timer, "nullspace"):
                tail = nullspace_vector(A, nullspace)
            v = np.empty(window_size)
            v[1:] = tail
            v[0] = -tail.sum()

            u = weights[idx]
            positive = v > 0
            ratios = np.full(window_size, np.inf)
            ratios[positive] = u[positive] / v[positive]
            alpha = ratios.min()

            w = u - alpha * v
            w[ratios == alpha] = 0.0
            w[w < 0] = 0.0
            weights[idx] = w

            keep = w > 0
            remaining -= window_size - np.count_nonzero(keep)
            window = list(idx[keep])

    mask = weights > 0
    return point_set.take(mask, weights[mask])


def cluster_bounds(n: int, num_clusters: int) -> np.ndarray:
    """Start offsets of `num_clusters` contiguous blocks; the remainder goes to the last block."""
    size = n // num_clusters
    return np.arange(num_clusters, dtype=np.int64) * size


def fast_caratheodory(
    point_set: WeightedPointSet,
    config: CoresetConfig,
    timer: Timer | None = None,
) -> WeightedPointSet:
    """Clustered Caratheodory. Runs in time linear in N for fixed L and K.

    Every round splits the active points into K contiguous clusters, reduces the weighted cluster
    means with `caratheodory` and keeps only the points of the surviving clusters. Rounds stop once
    the active set is at most DIRECT_PASS_RATIO * M points (the number of clusters kept per round is
    chosen so a round never drops below that), and a final direct pass eliminates the rest down
    to M points, so the work of that pass grows with M.

    Args:
        point_set (WeightedPointSet): input points with weights u.
        config (CoresetConfig): target size M, cluster count K and nullspace kernel.
        timer (Timer): optional phase timer.

    Returns:
        WeightedPointSet: subset of the input points, size in [max(M - K, L + 1), M],
            with the same weighted sum.
    """
    dim = point_set.dim
    config.validate(dim)
    target_size, num_clusters = config.target_size, config.cluster_count

    current = point_set
    if len(current) > target_size and np.any(current.weights == 0):
        current = current.take(current.weights > 0)

    pool_size = DIRECT_PASS_RATIO * target_size
    rounds = 0
    while len(current) > pool_size:
        n = len(current)
        smallest = n // num_clusters
        keep_clusters = (
            max(dim + 1, -(-(pool_size + 1) // smallest)) if smallest else num_clusters
        )
        if keep_clusters >= num_clusters:
            break

        with timed(timer, "cluster_means"):
            starts = cluster_bounds(n, num_clusters)
            totals = np.add.reduceat(current.weights, starts)
            sums = np.add.reduceat(current.weights[:, None] * current.points, starts)
            means = WeightedPointSet(sums / totals[:, None], totals)
            sizes = np.diff(np.append(starts, n))
            labels = np.repeat(np.arange(num_clusters), sizes)

        selected = caratheodory(means, keep_clusters, config.nullspace, timer)

        scale = np.zeros(num_clusters)
        scale[selected.indices] = selected.weights / totals[selected.indices]
        point_scale = scale[labels]
        mask = point_scale > 0
        current = current.take(mask, current.weights[mask] * point_scale[mask])

        rounds += 1
        logger.debug(
            f"round {rounds}: kept {len(selected)}/{num_clusters} clusters, {n} -> {len(current)} points"
        )
    return caratheodory(current, target_size, config.nullspace, timer)


def preserves_sum(
    before: WeightedPointSet, after: WeightedPointSet, rtol: float = 1e-10
) -> bool:
    expected = before.weighted_sum()
    scale = max(np.linalg.norm(expected), np.finfo(np.float64).tiny)
    return np.linalg.norm(after.weighted_sum() - expected) <= rtol * scale

