import logging
from dataclasses import dataclass
from typing import Any, Mapping, Tuple

import numpy as np

from exactcoreset.coreset import NUM_CLUSTERS, CoresetConfig
from exactcoreset.quadratic import (
    QuadraticModel,
    ResidualSelection,
    ResidualSystem,
    check_selection,
    extract,
)
from exactcoreset.registration import (
    Correspondences,
    GaussianPointCloud,
    Pose,
    RegistrationConfig,
    evaluate_rows,
    find_correspondences,
    linearize_pair,
)
from exactcoreset.utils import IndexOutOfRange, Timer

logger = logging.getLogger(__name__)


def pair_model(
    residuals: np.ndarray,
    jacobian_i: np.ndarray,
    jacobian_j: np.ndarray,
    weights: np.ndarray | None = None,
) -> QuadraticModel:
    """Weighted normal equations over the 12-dim pair tangent [xi_i; xi_j]."""
    J = np.hstack([jacobian_i, jacobian_j])
    w = np.ones(len(residuals)) if weights is None else weights
    return QuadraticModel.from_matrix(
        J.T @ (w[:, None] * J), J.T @ (w * residuals), residuals @ (w * residuals), len(residuals)
    )


class Factor:
    """Registration error between frames i (target) and j (source) over fixed correspondences."""

    i: int
    j: int
    correspondences: Correspondences

    def rows_and_weights(self) -> Tuple[np.ndarray, np.ndarray | None]:
        raise NotImplementedError

    def relinearize(
        self,
        target: GaussianPointCloud,
        source: GaussianPointCloud,
        pose_i: Pose,
        pose_j: Pose,
        refresh_whitener: bool = False,
    ) -> QuadraticModel:
        """Quadratic model of this factor at (T_i, T_j) over the pair tangent [xi_i; xi_j].

        Args:
            target (GaussianPointCloud): cloud of frame i.
            source (GaussianPointCloud): cloud of frame j.
            pose_i (Pose): current T_i.
            pose_j (Pose): current T_j.
            refresh_whitener (bool): recompute Phi at the current poses.

        Returns:
            QuadraticModel: 12x12 H, 12-dim b and c; `n_rows` counts the rows evaluated.
        """
        rows, weights = self.rows_and_weights()
        e, J_i, J_j = evaluate_rows(
            self.correspondences, target, source, pose_i, pose_j, rows, refresh_whitener
        )
        return pair_model(e, J_i, J_j, weights)

    @property
    def nbytes(self) -> int:
        return self.correspondences.nbytes


@dataclass
class FullFactor(Factor):
    """Factor over every fixed correspondence with unit weights."""

    i: int
    j: int
    correspondences: Correspondences

    def rows_and_weights(self):
        return None, None


@dataclass
class SampledFactor(Factor):
    """Factor over an exact weighted subset of residual rows.

    Only the correspondences referenced by the selection are kept; `point_ids` holds their
    positions in the pair's stacked residual system so `selection.row_indices` keep
    addressing rows of that system.
    """

    i: int
    j: int
    correspondences: Correspondences
    point_ids: np.ndarray
    selection: ResidualSelection
    evaluation_poses: Tuple[Pose, Pose]

    def rows_and_weights(self):
        rows = self.selection.row_indices
        points = rows // 3
        local = np.searchsorted(self.point_ids, points)
        if np.any(local >= len(self.point_ids)) or np.any(self.point_ids[local] != points):
            raise IndexOutOfRange("Selection references rows without a stored correspondence")
        return 3 * local + rows % 3, self.selection.weights

    @property
    def nbytes(self) -> int:
        return (
            self.correspondences.nbytes
            + self.point_ids.nbytes
            + self.selection.row_indices.nbytes
            + self.selection.weights.nbytes
        )

    def axis_counts(self) -> np.ndarray:
        """Number of selected points with 1, 2 and 3 selected axes."""
        _, counts = np.unique(self.selection.row_indices // 3, return_counts=True)
        return np.bincount(counts, minlength=4)[1:]

    def state_dict(self) -> Mapping[str, Any]:
        pose_i, pose_j = self.evaluation_poses
        return {
            "frames": [self.i, self.j],
            "evaluation_poses": [pose_i.state_dict(), pose_j.state_dict()],
            "correspondences": self.correspondences.state_dict(),
            "point_ids": self.point_ids.tolist(),
            "selection": self.selection.state_dict(),
        }

    @classmethod
    def from_state_dict(cls, state_dict: Mapping[str, Any]) -> "SampledFactor":
        i, j = state_dict["frames"]
        pose_i, pose_j = (Pose.from_state_dict(p) for p in state_dict["evaluation_poses"])
        selection = ResidualSelection.from_state_dict(state_dict["selection"])
        return cls(
            i,
            j,
            Correspondences.from_state_dict(state_dict["correspondences"]),
            np.asarray(state_dict["point_ids"], dtype=np.int64),
            selection,
            (pose_i, pose_j),
        )


def shuffled_correspondences(
    target: GaussianPointCloud,
    source: GaussianPointCloud,
    pose_i: Pose,
    pose_j: Pose,
    registration: RegistrationConfig,
    rng: np.random.Generator,
    threads: int = 1,
) -> Correspondences:
    """Correspondences listed in a random permutation of the source points.

    The clustered extraction drops contiguous blocks of rows, so the source order is shuffled first.
    """
    permutation = rng.permutation(len(source))
    correspondences = find_correspondences(
        target,
        source.take(permutation),
        pose_i.inverse() @ pose_j,
        registration.max_correspondence_distance,
        threads,
    )
    correspondences.source_indices = permutation[correspondences.source_indices]
    return correspondences


def exact_downsample(
    target: GaussianPointCloud,
    source: GaussianPointCloud,
    pose_i: Pose,
    pose_j: Pose,
    target_size: int = 29,
    seed: int = 0,
    frames: Tuple[int, int] = (0, 1),
    cluster_count: int = NUM_CLUSTERS,
    registration: RegistrationConfig | None = None,
    nullspace: str = "lu",
    timer: Timer | None = None,
    threads: int = 1,
) -> SampledFactor:
    factor, _ = sample_pair(
        target,
        source,
        pose_i,
        pose_j,
        target_size,
        seed,
        frames,
        cluster_count,
        registration,
        nullspace,
        timer,
        threads,
    )
    return factor


def sample_pair(
    target: GaussianPointCloud,
    source: GaussianPointCloud,
    pose_i: Pose,
    pose_j: Pose,
    target_size: int = 29,
    seed: int = 0,
    frames: Tuple[int, int] = (0, 1),
    cluster_count: int = NUM_CLUSTERS,
    registration: RegistrationConfig | None = None,
    nullspace: str = "lu",
    timer: Timer | None = None,
    threads: int = 1,
) -> Tuple[SampledFactor, ResidualSystem]:
    """Exact point cloud downsampling. Shuffle, linearize at the evaluation poses, extract.

    Args:
        target (GaussianPointCloud): cloud of frame i.
        source (GaussianPointCloud): cloud of frame j.
        pose_i (Pose): evaluation pose of frame i.
        pose_j (Pose): evaluation pose of frame j.
        target_size (int): target number of residual rows M.
        seed (int): seed of the source shuffle.
        frames (Tuple[int, int]): frame ids (i, j).
        cluster_count (int): number of clusters K.
        registration (RegistrationConfig): correspondence gate.
        nullspace (str): nullspace kernel.
        timer (Timer): optional phase timer.
        threads (int): worker count for the correspondence search.

    Returns:
        SampledFactor: selected rows and weights reproducing the pair's (H, b, c) at the evaluation poses.
        ResidualSystem: every residual row of the pair at the evaluation poses.
    """
    registration = registration or RegistrationConfig()
    rng = np.random.default_rng(seed)
    correspondences = shuffled_correspondences(
        target, source, pose_i, pose_j, registration, rng, threads
    )
    system = linearize_pair(correspondences, target, source, pose_i, pose_j)
    config = CoresetConfig(target_size, cluster_count, seed, nullspace)
    selection = extract(system, config, timer)

    point_ids = np.unique(selection.row_indices // 3)
    logger.debug(
        f"factor {frames}: {len(selection)} rows from {len(system)} "
        f"({len(point_ids)} of {len(correspondences)} points)"
    )
    factor = SampledFactor(
        frames[0],
        frames[1],
        correspondences.take(point_ids),
        point_ids,
        selection,
        (pose_i, pose_j),
    )
    return factor, system


def full_factor(
    target: GaussianPointCloud,
    source: GaussianPointCloud,
    pose_i: Pose,
    pose_j: Pose,
    frames: Tuple[int, int] = (0, 1),
    registration: RegistrationConfig | None = None,
) -> FullFactor:
    registration = registration or RegistrationConfig()
    correspondences = find_correspondences(
        target, source, pose_i.inverse() @ pose_j, registration.max_correspondence_distance
    )
    return FullFactor(frames[0], frames[1], correspondences)


def relinearize(
    factor: Factor,
    target: GaussianPointCloud,
    source: GaussianPointCloud,
    pose_i: Pose,
    pose_j: Pose,
    refresh_whitener: bool = False,
) -> QuadraticModel:
    if isinstance(factor, SampledFactor):
        check_selection(factor.selection, factor.selection.n_source_rows)
    return factor.relinearize(target, source, pose_i, pose_j, refresh_whitener)
