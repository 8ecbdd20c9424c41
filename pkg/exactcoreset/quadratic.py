import logging
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from exactcoreset.coreset import CoresetConfig, WeightedPointSet, fast_caratheodory
from exactcoreset.utils import IndexOutOfRange, Timer, TooFewRows, timed

logger = logging.getLogger(__name__)

TANGENT_DIM = 6
FLAT_DIM = TANGENT_DIM * (TANGENT_DIM + 1) // 2 + TANGENT_DIM + 1
MIN_ROWS = FLAT_DIM + 1


def upper_indices(dim: int):
    """Row-major upper triangle: (0,0), (0,1), ..., (0,D-1), (1,1), ..., (D-1,D-1)."""
    return np.triu_indices(dim)


@dataclass
class ResidualSystem:
    """Residuals e (N,) and their Jacobian J (N, D) at a linearization point."""

    residuals: np.ndarray
    jacobian: np.ndarray

    def __post_init__(self):
        self.residuals = np.asarray(self.residuals, dtype=np.float64).reshape(-1)
        self.jacobian = np.atleast_2d(np.asarray(self.jacobian, dtype=np.float64))
        if len(self.residuals) < 1:
            raise ValueError("A residual system needs at least one row.")
        if self.jacobian.shape[0] != len(self.residuals):
            raise ValueError(
                f"Jacobian has {self.jacobian.shape[0]} rows for {len(self.residuals)} residuals"
            )

    def __len__(self) -> int:
        return len(self.residuals)

    @property
    def dim(self) -> int:
        return self.jacobian.shape[1]


@dataclass
class QuadraticModel:
    """The quadratic surrogate dx^T H dx + 2 b^T dx + c of a least-squares cost.

    H is stored as its row-major upper triangle so it is symmetric by construction.
    `n_rows` counts the residual rows evaluated to build the model.
    """

    h: np.ndarray
    b: np.ndarray
    c: float
    n_rows: int = 0

    @classmethod
    def from_matrix(cls, H: np.ndarray, b: np.ndarray, c: float, n_rows: int = 0):
        return cls(H[upper_indices(len(b))], np.asarray(b, dtype=np.float64), float(c), n_rows)

    @property
    def dim(self) -> int:
        return len(self.b)

    @property
    def H(self) -> np.ndarray:
        H = np.zeros((self.dim, self.dim))
        rows, cols = upper_indices(self.dim)
        H[rows, cols] = self.h
        H[cols, rows] = self.h
        return H

    def __add__(self, other: "QuadraticModel") -> "QuadraticModel":
        return QuadraticModel(
            self.h + other.h, self.b + other.b, self.c + other.c, self.n_rows + other.n_rows
        )

    def scaled(self, factor: float) -> "QuadraticModel":
        return QuadraticModel(factor * self.h, factor * self.b, factor * self.c, self.n_rows)

    def max_error(self, other: "QuadraticModel") -> float:
        """max(|H - H'|_max, |b - b'|_max, |c - c'|)"""
        return max(
            np.max(np.abs(self.h - other.h)),
            np.max(np.abs(self.b - other.b)),
            abs(self.c - other.c),
        )

    def scale(self) -> float:
        return max(np.max(np.abs(self.h)), np.max(np.abs(self.b)), abs(self.c), 1.0)

    def relative_error(self, other: "QuadraticModel") -> float:
        return self.max_error(other) / self.scale()

    def step(self) -> np.ndarray:
        """Minimizer of the surrogate, dx = -H^-1 b."""
        return -np.linalg.solve(self.H, self.b)

    def evaluate(self, dx: np.ndarray) -> float:
        return float(dx @ self.H @ dx + 2 * self.b @ dx + self.c)


@dataclass
class ResidualSelection:
    """Weighted subset of residual rows. Row r encodes point r // 3 and axis r % 3."""

    row_indices: np.ndarray
    weights: np.ndarray
    n_source_rows: int

    def __post_init__(self):
        self.row_indices = np.asarray(self.row_indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.row_indices)

    def scaled(self, factor: float) -> "ResidualSelection":
        return ResidualSelection(self.row_indices, factor * self.weights, self.n_source_rows)

    def state_dict(self) -> Mapping[str, Any]:
        return {
            "indices": self.row_indices.tolist(),
            "weights": self.weights.tolist(),
            "n_source_rows": int(self.n_source_rows),
        }

    @classmethod
    def from_state_dict(cls, state_dict: Mapping[str, Any]) -> "ResidualSelection":
        return cls(state_dict["indices"], state_dict["weights"], state_dict["n_source_rows"])


def flatten_row(a: np.ndarray, e: float) -> np.ndarray:
    """[upper-tri(a^T a), a^T e, e^2] for one residual row."""
    return flatten_rows(np.atleast_2d(a), np.atleast_1d(e))[0]


def flatten_rows(jacobian: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """
    Args:
        jacobian (NDArray): Jacobian of shape (N, D).
        residuals (NDArray): residuals of shape (N,).

    Returns:
        NDArray: flattened rows of shape (N, D(D+1)/2 + D + 1), 28 columns for D = 6.
    """
    rows, cols = upper_indices(jacobian.shape[1])
    return np.hstack(
        [
            jacobian[:, rows] * jacobian[:, cols],
            jacobian * residuals[:, None],
            (residuals * residuals)[:, None],
        ]
    )


def unflatten(vector: np.ndarray, dim: int = TANGENT_DIM) -> QuadraticModel:
    n_upper = dim * (dim + 1) // 2
    return QuadraticModel(
        vector[:n_upper].copy(), vector[n_upper : n_upper + dim].copy(), float(vector[-1])
    )


def quadratic_of(system: ResidualSystem) -> QuadraticModel:
    """Full-set H = J^T J, b = J^T e, c = e^T e."""
    J, e = system.jacobian, system.residuals
    return QuadraticModel.from_matrix(J.T @ J, J.T @ e, e @ e, len(system))


def extract(
    system: ResidualSystem, config: CoresetConfig, timer: Timer | None = None
) -> ResidualSelection:
    """Extract a weighted subset of residual rows that reproduces (H, b, c) exactly.

    Args:
        system (ResidualSystem): residuals and Jacobian at the evaluation point.
        config (CoresetConfig): target size M (>= 29 for D = 6) and cluster count K.
        timer (Timer): optional phase timer.

    Returns:
        ResidualSelection: sorted row indices and weights that plug directly into J~^T W J~.
    """
    n, dim = len(system), system.dim
    flat_dim = dim * (dim + 1) // 2 + dim + 1
    if n <= flat_dim:
        raise TooFewRows(f"Need more than {flat_dim} residual rows, got {n}")
    if n <= config.target_size:
        return ResidualSelection(np.arange(n), np.ones(n), n)

    with timed(timer, "flatten"):
        points = flatten_rows(system.jacobian, system.residuals)
    point_set = WeightedPointSet(points, np.full(n, 1.0 / n))
    coreset = fast_caratheodory(point_set, config, timer)

    order = np.argsort(coreset.indices)
    logger.debug(f"extracted {len(coreset)} of {n} rows (target {config.target_size})")
    return ResidualSelection(coreset.indices[order], n * coreset.weights[order], n)


def check_selection(selection: ResidualSelection, n_rows: int):
    idx = selection.row_indices
    if len(idx) and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexOutOfRange(
            f"Selection references rows outside [0, {n_rows}): [{idx.min()}, {idx.max()}]"
        )


def reconstruct(system: ResidualSystem, selection: ResidualSelection) -> QuadraticModel:
    """H~ = J~^T W J~, b~ = J~^T W e~, c~ = e~^T W e~ over the selected rows."""
    check_selection(selection, len(system))
    J = system.jacobian[selection.row_indices]
    e = system.residuals[selection.row_indices]
    w = selection.weights
    return QuadraticModel.from_matrix(
        J.T @ (w[:, None] * J), J.T @ (w * e), e @ (w * e), len(selection)
    )
