import logging
from dataclasses import dataclass
from typing import Any, Mapping, Tuple

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.neighbors import NearestNeighbors

from exactcoreset.quadratic import ResidualSystem
from exactcoreset.utils import NoOverlap, TooFewPoints

logger = logging.getLogger(__name__)

K_NEIGHBORS = 10
COVARIANCE_EPSILON = 1e-3
MIN_EIGENVALUE = 1e-9
ORTHONORMAL_TOLERANCE = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """[v]x for a vector of shape (3,) or a batch of shape (N, 3)."""
    v = np.asarray(v, dtype=np.float64)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def orthonormalize(R: np.ndarray) -> np.ndarray:
    drift = np.max(np.abs(R.T @ R - np.eye(3)))
    if drift < ORTHONORMAL_TOLERANCE and abs(np.linalg.det(R) - 1) < ORTHONORMAL_TOLERANCE:
        return R
    U, _, Vt = np.linalg.svd(R)
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] *= -1
    return U @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t.

    Perturbations are right-multiplicative with tangent ordering [rotation; translation]:
    `pose.retract(xi)` is (R Exp(w), t + R r) for xi = [w, r].
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = orthonormalize(np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def retract(self, xi: np.ndarray) -> "Pose":
        xi = np.asarray(xi, dtype=np.float64)
        return Pose(
            self.rotation @ Rotation.from_rotvec(xi[:3]).as_matrix(),
            self.translation + self.rotation @ xi[3:],
        )

    def local(self, other: "Pose") -> np.ndarray:
        """Tangent xi with self.retract(xi) == other."""
        rotvec = Rotation.from_matrix(self.rotation.T @ other.rotation).as_rotvec()
        return np.concatenate([rotvec, self.rotation.T @ (other.translation - self.translation)])

    def angle(self) -> float:
        return float(np.linalg.norm(Rotation.from_matrix(self.rotation).as_rotvec()))

    def state_dict(self) -> Mapping[str, Any]:
        return {
            "t": self.translation.tolist(),
            "q": Rotation.from_matrix(self.rotation).as_quat().tolist(),
        }

    @classmethod
    def from_state_dict(cls, state_dict: Mapping[str, Any]) -> "Pose":
        return cls(Rotation.from_quat(state_dict["q"]).as_matrix(), state_dict["t"])


@dataclass
class GaussianPointCloud:
    """Points as Gaussians: means (N, 3) in meters and covariances (N, 3, 3) in meters^2."""

    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(-1, 3, 3)
        if len(self.means) < 1 or len(self.means) != len(self.covariances):
            raise ValueError(
                f"Cloud needs matching, nonempty means and covariances: "
                f"{len(self.means)} vs {len(self.covariances)}"
            )

    def __len__(self) -> int:
        return len(self.means)

    def take(self, indices: np.ndarray) -> "GaussianPointCloud":
        return GaussianPointCloud(self.means[indices], self.covariances[indices])


@dataclass
class RegistrationConfig:
    """
    Args:
        k_neighbors (int): neighborhood size for covariance estimation.
        max_correspondence_distance (float): correspondence gate in meters.
        covariance_epsilon (float): smallest regularized eigenvalue relative to the largest.
        refresh_whitener (bool): recompute the whiteners at the current poses during optimization
            instead of holding them at the evaluation pose.
    """

    k_neighbors: int = K_NEIGHBORS
    max_correspondence_distance: float = 1.0
    covariance_epsilon: float = COVARIANCE_EPSILON
    refresh_whitener: bool = False


@dataclass
class Correspondence:
    source_index: int
    target_index: int
    whitener: np.ndarray


@dataclass
class Correspondences:
    """Fixed source -> target matches with their whiteners Phi (Phi Phi^T = Omega)."""

    source_indices: np.ndarray
    target_indices: np.ndarray
    whiteners: np.ndarray

    def __post_init__(self):
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64).reshape(-1)
        self.target_indices = np.asarray(self.target_indices, dtype=np.int64).reshape(-1)
        self.whiteners = np.asarray(self.whiteners, dtype=np.float64).reshape(-1, 3, 3)

    def __len__(self) -> int:
        return len(self.source_indices)

    def __getitem__(self, k: int) -> Correspondence:
        return Correspondence(
            int(self.source_indices[k]), int(self.target_indices[k]), self.whiteners[k]
        )

    @classmethod
    def single(cls, correspondence: Correspondence) -> "Correspondences":
        return cls(
            [correspondence.source_index],
            [correspondence.target_index],
            correspondence.whitener[None],
        )

    def take(self, indices: np.ndarray) -> "Correspondences":
        return Correspondences(
            self.source_indices[indices], self.target_indices[indices], self.whiteners[indices]
        )

    @property
    def nbytes(self) -> int:
        return self.source_indices.nbytes + self.target_indices.nbytes + self.whiteners.nbytes

    def state_dict(self) -> Mapping[str, Any]:
        return {
            "pairs": np.stack([self.source_indices, self.target_indices], axis=1).tolist(),
            "whiteners": self.whiteners.tolist(),
        }

    @classmethod
    def from_state_dict(cls, state_dict: Mapping[str, Any]) -> "Correspondences":
        pairs = np.asarray(state_dict["pairs"], dtype=np.int64).reshape(-1, 2)
        return cls(pairs[:, 0], pairs[:, 1], state_dict["whiteners"])


def estimate_covariances(
    points: np.ndarray,
    k_neighbors: int = K_NEIGHBORS,
    epsilon: float = COVARIANCE_EPSILON,
    threads: int = 1,
) -> GaussianPointCloud:
    """Estimate a regularized covariance for every point from its k nearest neighbors.

    The eigenvalues of each neighborhood covariance are replaced by (epsilon, 1, 1) times the
    largest one, so every covariance describes a thin disc along the local surface.

    Args:
        points (NDArray): points of shape (N, 3).
        k_neighbors (int): neighborhood size (4 <= k <= N).
        epsilon (float): ratio of the smallest to the largest regularized eigenvalue.
        threads (int): worker count for the neighbor search.

    Returns:
        GaussianPointCloud: the points with their covariances.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if k_neighbors < 4 or len(points) < k_neighbors:
        raise TooFewPoints(
            f"Covariance estimation needs 4 <= k <= N, got k={k_neighbors}, N={len(points)}"
        )

    search = NearestNeighbors(n_neighbors=k_neighbors, algorithm="kd_tree", n_jobs=threads)
    _, neighbors = search.fit(points).kneighbors(points)

    neighborhoods = points[neighbors]
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    covariances = np.einsum("nki,nkj->nij", centered, centered) / k_neighbors

    eigvals, eigvecs = np.linalg.eigh(covariances)
    largest = np.maximum(eigvals[:, -1], MIN_EIGENVALUE)
    regularized = np.array([epsilon, 1.0, 1.0])[None, :] * largest[:, None]
    covariances = (eigvecs * regularized[:, None, :]) @ eigvecs.transpose(0, 2, 1)
    covariances = 0.5 * (covariances + covariances.transpose(0, 2, 1))
    return GaussianPointCloud(points, covariances)


def whiteners_for(
    target_covariances: np.ndarray, source_covariances: np.ndarray, rotation: np.ndarray
) -> np.ndarray:
    """Cholesky factors Phi of Omega = (C' + R C R^T)^-1, batched over correspondences."""
    combined = target_covariances + rotation @ source_covariances @ rotation.T
    information = np.linalg.inv(combined)
    information = 0.5 * (information + information.transpose(0, 2, 1))
    return np.linalg.cholesky(information)


def nearest_neighbors(
    target: np.ndarray, queries: np.ndarray, threads: int = 1
) -> Tuple[np.ndarray, np.ndarray]:
    search = NearestNeighbors(n_neighbors=1, algorithm="kd_tree", n_jobs=threads)
    distances, indices = search.fit(target).kneighbors(queries)
    return distances[:, 0], indices[:, 0]


def find_correspondences(
    target: GaussianPointCloud,
    source: GaussianPointCloud,
    relative_pose: Pose,
    max_distance: float,
    threads: int = 1,
) -> Correspondences:
    """Match every source point to its nearest target mean under T_ij, gated by `max_distance`.

    Args:
        target (GaussianPointCloud): cloud of frame i.
        source (GaussianPointCloud): cloud of frame j.
        relative_pose (Pose): T_ij = T_i^-1 T_j mapping source coordinates into the target frame.
        max_distance (float): correspondence gate in meters.
        threads (int): worker count for the neighbor search.

    Returns:
        Correspondences: matches in source order with whiteners evaluated at T_ij.
    """
    distances, nearest = nearest_neighbors(
        target.means, relative_pose.transform(source.means), threads
    )
    source_indices = np.flatnonzero(distances <= max_distance)
    if len(source_indices) == 0:
        raise NoOverlap(f"No correspondences within {max_distance} m")
    target_indices = nearest[source_indices]
    whiteners = whiteners_for(
        target.covariances[target_indices],
        source.covariances[source_indices],
        relative_pose.rotation,
    )
    return Correspondences(source_indices, target_indices, whiteners)


def evaluate_rows(
    correspondences: Correspondences,
    target: GaussianPointCloud,
    source: GaussianPointCloud,
    pose_i: Pose,
    pose_j: Pose,
    rows: np.ndarray | None = None,
    refresh_whitener: bool = False,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate whitened GICP residual rows and their Jacobians.

    Row r is axis r % 3 of correspondence r // 3, so e_r = Phi[:, axis]^T (mu' - T_ij mu).
    Only the requested rows are computed.

    Args:
        correspondences (Correspondences): fixed matches between the clouds.
        target (GaussianPointCloud): cloud of frame i.
        source (GaussianPointCloud): cloud of frame j.
        pose_i (Pose): current pose T_i.
        pose_j (Pose): current pose T_j.
        rows (NDArray): residual rows to evaluate (defaults to all 3 * len(correspondences)).
        refresh_whitener (bool): recompute Phi at the current relative pose.

    Returns:
        NDArray: residuals of shape (M,).
        NDArray: Jacobian w.r.t. the tangent of T_i of shape (M, 6).
        NDArray: Jacobian w.r.t. the tangent of T_j of shape (M, 6).
    """
    if rows is None:
        rows = np.arange(3 * len(correspondences))
    points, axes = np.divmod(np.asarray(rows, dtype=np.int64), 3)

    relative = pose_i.inverse() @ pose_j
    R = relative.rotation
    source_idx = correspondences.source_indices[points]
    target_idx = correspondences.target_indices[points]
    mu = source.means[source_idx]
    q = relative.transform(mu)
    d = target.means[target_idx] - q

    if refresh_whitener:
        whiteners = whiteners_for(
            target.covariances[target_idx], source.covariances[source_idx], R
        )
        phi = whiteners[np.arange(len(points)), :, axes]
    else:
        phi = correspondences.whiteners[points, :, axes]

    residuals = np.einsum("ni,ni->n", phi, d)

    # d(d)/d(xi_j) = [R [mu]x, -R], d(d)/d(xi_i) = [-[q]x, I]
    jacobian_j = np.concatenate(
        [np.einsum("ni,nij->nj", phi @ R, skew(mu)), -(phi @ R)], axis=1
    )
    jacobian_i = np.concatenate([-np.einsum("ni,nij->nj", phi, skew(q)), phi], axis=1)
    return residuals, jacobian_i, jacobian_j


def residual(
    correspondence: Correspondence,
    target: GaussianPointCloud,
    source: GaussianPointCloud,
    pose_i: Pose,
    pose_j: Pose,
) -> np.ndarray:
    """e = Phi^T (mu' - T_ij mu) for one correspondence."""
    e, _, _ = evaluate_rows(
        Correspondences.single(correspondence), target, source, pose_i, pose_j
    )
    return e


def jacobian(
    correspondence: Correspondence,
    target: GaussianPointCloud,
    source: GaussianPointCloud,
    pose_i: Pose,
    pose_j: Pose,
) -> np.ndarray:
    """de/d(xi_j) of shape (3, 6), with Phi held constant."""
    _, _, J = evaluate_rows(
        Correspondences.single(correspondence), target, source, pose_i, pose_j
    )
    return J


def linearize_pair(
    correspondences: Correspondences,
    target: GaussianPointCloud,
    source: GaussianPointCloud,
    pose_i: Pose,
    pose_j: Pose,
) -> ResidualSystem:
    """Stack all residual rows (point 0 x, y, z, point 1 x, ...) with their Jacobian w.r.t. T_j."""
    e, _, J = evaluate_rows(correspondences, target, source, pose_i, pose_j)
    return ResidualSystem(e, J)
