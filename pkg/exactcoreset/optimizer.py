import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, List, Mapping, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.neighbors import NearestNeighbors
from tqdm import tqdm

from exactcoreset.coreset import NUM_CLUSTERS
from exactcoreset.downsample import Factor, exact_downsample, full_factor
from exactcoreset.quadratic import TANGENT_DIM
from exactcoreset.registration import GaussianPointCloud, Pose, RegistrationConfig
from exactcoreset.utils import LengthMismatch, SingularSystem

logger = logging.getLogger(__name__)

MAX_DAMPING = 1e10
MIN_OVERLAP_RATIO = 0.3


@dataclass
class OptimizerConfig:
    """
    Args:
        max_iterations (int): maximum number of LM iterations (accepted or rejected).
        initial_damping (float): initial LM damping lambda.
        damping_up (float): factor applied to lambda after a rejected step.
        damping_down (float): factor dividing lambda after an accepted step.
        convergence_threshold (float): stop once |dx|_inf falls below this.
        fixed_frame (int): frame held constant to fix the gauge.
        threads (int): worker count for factor linearization.
    """

    max_iterations: int = 100
    initial_damping: float = 1e-6
    damping_up: float = 10.0
    damping_down: float = 10.0
    convergence_threshold: float = 1e-6
    fixed_frame: int = 0
    threads: int = 1

    def validate(self):
        for name in ("max_iterations", "initial_damping", "damping_up", "damping_down"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.convergence_threshold <= 0:
            raise ValueError(
                f"convergence_threshold must be positive, got {self.convergence_threshold}"
            )
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


@dataclass
class FactorGraph:
    """Frames as pose variables and registration factors between overlapping frame pairs.

    Args:
        poses (List[Pose]): current pose of every frame.
        clouds (List[GaussianPointCloud]): point cloud of every frame in its own coordinates.
        factors (List[Factor]): sampled or full factors, one per overlapping pair.
        overlaps (List[Tuple[int, int]]): the overlapping pairs (i < j).
        refresh_whitener (bool): recompute whiteners at the current poses when relinearizing.
    """

    poses: List[Pose]
    clouds: List[GaussianPointCloud]
    factors: List[Factor]
    overlaps: List[Tuple[int, int]] = field(default_factory=list)
    refresh_whitener: bool = False

    def __len__(self) -> int:
        return len(self.poses)

    def validate(self):
        if len(self.clouds) != len(self.poses):
            raise LengthMismatch(f"{len(self.poses)} poses but {len(self.clouds)} clouds")
        for factor in self.factors:
            if not 0 <= factor.i < factor.j < len(self.poses):
                raise ValueError(
                    f"Factor ({factor.i}, {factor.j}) is invalid for {len(self.poses)} frames"
                )
        if not self.connected():
            logger.warning("Factor graph is not connected: some frames are unconstrained")

    def connected(self) -> bool:
        n = len(self.poses)
        if n < 2:
            return True
        i = [factor.i for factor in self.factors]
        j = [factor.j for factor in self.factors]
        adjacency = coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
        num_components, _ = connected_components(adjacency, directed=False)
        return num_components == 1

    @property
    def nbytes(self) -> int:
        return sum(factor.nbytes for factor in self.factors)


@dataclass
class NormalEquations:
    """Dense H, b, c of the whole graph over the stacked frame tangents."""

    H: np.ndarray
    b: np.ndarray
    c: float
    n_rows: int


@dataclass
class OptimizationResult:
    poses: List[Pose]
    costs: List[float]
    row_evaluations: int
    iterations: int
    converged: bool

    def state_dict(self) -> Mapping[str, Any]:
        return {
            "costs": list(self.costs),
            "row_evaluations": int(self.row_evaluations),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


def linearize(
    graph: FactorGraph, poses: Sequence[Pose] | None = None, threads: int = 1
) -> NormalEquations:
    """Assemble the dense normal equations of all factors at `poses` (default: the graph's poses).

    Factors are linearized in parallel; their blocks are added in factor order so the result
    does not depend on the thread count.
    """
    poses = graph.poses if poses is None else poses

    def linearize_factor(factor):
        return factor.relinearize(
            graph.clouds[factor.i],
            graph.clouds[factor.j],
            poses[factor.i],
            poses[factor.j],
            graph.refresh_whitener,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            models = list(executor.map(linearize_factor, graph.factors))
    else:
        models = [linearize_factor(factor) for factor in graph.factors]

    dim = TANGENT_DIM * len(poses)
    H, b, c, n_rows = np.zeros((dim, dim)), np.zeros(dim), 0.0, 0
    for factor, model in zip(graph.factors, models):
        blocks = [
            slice(TANGENT_DIM * factor.i, TANGENT_DIM * (factor.i + 1)),
            slice(TANGENT_DIM * factor.j, TANGENT_DIM * (factor.j + 1)),
        ]
        H_pair = model.H
        for a, rows in enumerate(blocks):
            local_rows = slice(TANGENT_DIM * a, TANGENT_DIM * (a + 1))
            b[rows] += model.b[local_rows]
            for k, cols in enumerate(blocks):
                H[rows, cols] += H_pair[local_rows, TANGENT_DIM * k : TANGENT_DIM * (k + 1)]
        c += model.c
        n_rows += model.n_rows
    return NormalEquations(H, b, c, n_rows)


def free_indices(num_frames: int, fixed_frame: int) -> np.ndarray:
    mask = np.ones(TANGENT_DIM * num_frames, dtype=bool)
    mask[TANGENT_DIM * fixed_frame : TANGENT_DIM * (fixed_frame + 1)] = False
    return np.flatnonzero(mask)


def solve_damped(system: NormalEquations, free: np.ndarray, damping: float) -> np.ndarray:
    """dx = -(H + lambda I)^-1 b over the free coordinates; the gauge frame gets zeros."""
    H = system.H[np.ix_(free, free)]
    if np.any(np.diag(H) <= 0):
        raise SingularSystem("Normal equations have an unconstrained coordinate")
    try:
        factor = scipy.linalg.cho_factor(H + damping * np.eye(len(free)))
    except np.linalg.LinAlgError as error:
        raise SingularSystem(f"Damped normal equations are not positive definite: {error}")
    dx = np.zeros(len(system.b))
    dx[free] = -scipy.linalg.cho_solve(factor, system.b[free])
    return dx


def retract_all(poses: Sequence[Pose], dx: np.ndarray) -> List[Pose]:
    return [
        pose.retract(dx[TANGENT_DIM * k : TANGENT_DIM * (k + 1)]) for k, pose in enumerate(poses)
    ]


def gauss_newton_step(graph: FactorGraph, fixed_frame: int = 0) -> np.ndarray:
    """Undamped step from the graph's current poses, stacked per frame."""
    system = linearize(graph)
    return solve_damped(system, free_indices(len(graph), fixed_frame), 0.0)


def optimize(graph: FactorGraph, config: OptimizerConfig | None = None) -> OptimizationResult:
    """Levenberg-Marquardt on the sum of the factors' quadratic models.

    A step is accepted only when the cost evaluated at the candidate poses is lower than the
    current cost, so the returned cost trace is strictly decreasing.

    Args:
        graph (FactorGraph): the graph to optimize; its poses are the initial estimate.
        config (OptimizerConfig): iteration limits, damping schedule and gauge frame.

    Returns:
        OptimizationResult: optimized poses, accepted-cost trace and row-evaluation count.
    """
    config = config or OptimizerConfig()
    config.validate()
    graph.validate()
    if not 0 <= config.fixed_frame < len(graph):
        raise ValueError(f"Fixed frame {config.fixed_frame} is not in [0, {len(graph)})")

    free = free_indices(len(graph), config.fixed_frame)
    poses = list(graph.poses)
    system = linearize(graph, poses, config.threads)
    costs = [system.c]
    row_evaluations = system.n_rows
    damping = config.initial_damping
    converged = False

    iteration = 0
    for iteration in range(1, config.max_iterations + 1):
        dx = solve_damped(system, free, damping)
        if np.max(np.abs(dx)) < config.convergence_threshold:
            converged = True
            break

        candidate = retract_all(poses, dx)
        candidate[config.fixed_frame] = poses[config.fixed_frame]
        trial = linearize(graph, candidate, config.threads)
        row_evaluations += trial.n_rows

        if trial.c < system.c:
            poses, system = candidate, trial
            costs.append(trial.c)
            damping /= config.damping_down
            logger.debug(f"iteration {iteration}: cost {trial.c:.6e}, damping {damping:.1e}")
        else:
            damping *= config.damping_up
            logger.debug(f"iteration {iteration}: rejected {trial.c:.6e}, damping {damping:.1e}")
            if damping > MAX_DAMPING:
                converged = True
                break

    logger.info(
        f"LM finished after {iteration} iterations: cost {costs[0]:.6e} -> {costs[-1]:.6e}, "
        f"{row_evaluations} rows evaluated"
    )
    return OptimizationResult(poses, costs, row_evaluations, iteration, converged)


def overlap_ratio(
    target: np.ndarray, source: np.ndarray, relative_pose: Pose, max_distance: float, search=None
) -> float:
    if search is None:
        search = NearestNeighbors(n_neighbors=1, algorithm="kd_tree").fit(target)
    distances, _ = search.kneighbors(relative_pose.transform(source))
    return float(np.mean(distances[:, 0] <= max_distance))


def detect_overlaps(
    clouds: Sequence[np.ndarray | GaussianPointCloud],
    poses: Sequence[Pose],
    min_ratio: float = MIN_OVERLAP_RATIO,
    max_distance: float = 1.0,
    threads: int = 1,
) -> List[Tuple[int, int]]:
    """Frame pairs (i < j) where at least `min_ratio` of the points of j have a neighbor in i.

    Args:
        clouds (Sequence[NDArray | GaussianPointCloud]): points of every frame in its own coordinates.
        poses (Sequence[Pose]): pose of every frame.
        min_ratio (float): minimum fraction of matched source points.
        max_distance (float): correspondence gate in meters.
        threads (int): worker count for the neighbor search.

    Returns:
        List[Tuple[int, int]]: the overlapping pairs in lexicographic order.
    """
    if len(clouds) != len(poses):
        raise LengthMismatch(f"{len(clouds)} clouds but {len(poses)} poses")
    points = [c.means if isinstance(c, GaussianPointCloud) else np.asarray(c) for c in clouds]

    pairs = []
    for i in range(len(points)):
        search = NearestNeighbors(n_neighbors=1, algorithm="kd_tree", n_jobs=threads)
        search.fit(points[i])
        inverse = poses[i].inverse()
        for j in range(i + 1, len(points)):
            ratio = overlap_ratio(points[i], points[j], inverse @ poses[j], max_distance, search)
            if ratio >= min_ratio:
                pairs.append((i, j))
    logger.info(f"Found {len(pairs)} overlapping pairs among {len(points)} frames")
    return pairs


def build_factor_graph(
    clouds: Sequence[GaussianPointCloud],
    poses: Sequence[Pose],
    overlaps: Sequence[Tuple[int, int]],
    target_size: int | None = 29,
    seed: int = 0,
    cluster_count: int = NUM_CLUSTERS,
    registration: RegistrationConfig | None = None,
    nullspace: str = "lu",
    threads: int = 1,
) -> FactorGraph:
    """Build one factor per overlapping pair at the given (evaluation) poses.

    Args:
        clouds (Sequence[GaussianPointCloud]): cloud of every frame.
        poses (Sequence[Pose]): evaluation poses.
        overlaps (Sequence[Tuple[int, int]]): pairs (i < j) to connect.
        target_size (int | None): rows per sampled factor, or None for full factors.
        seed (int): master seed; every pair derives its own shuffle seed from it.
        cluster_count (int): clusters K for the extraction.
        registration (RegistrationConfig): correspondence gate and whitener policy.
        nullspace (str): nullspace kernel.
        threads (int): worker count.

    Returns:
        FactorGraph: graph whose poses are a copy of `poses`.
    """
    registration = registration or RegistrationConfig()

    def make_factor(pair):
        i, j = pair
        if target_size is None:
            return full_factor(clouds[i], clouds[j], poses[i], poses[j], (i, j), registration)
        pair_seed = int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])
        return exact_downsample(
            clouds[i],
            clouds[j],
            poses[i],
            poses[j],
            target_size,
            pair_seed,
            (i, j),
            cluster_count,
            registration,
            nullspace,
            threads=threads,
        )

    with ThreadPoolExecutor(max_workers=threads) as executor:
        factors = list(
            tqdm(executor.map(make_factor, overlaps), total=len(overlaps), disable=len(overlaps) < 2)
        )
    return FactorGraph(
        list(poses), list(clouds), factors, list(overlaps), registration.refresh_whitener
    )


def align(estimated: np.ndarray, ground_truth: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Rigid alignment (Horn) of estimated positions onto ground truth.

    Returns:
        NDArray: rotation (3, 3).
        NDArray: translation (3,).
    """
    est_mean, gt_mean = estimated.mean(axis=0), ground_truth.mean(axis=0)
    W = (ground_truth - gt_mean).T @ (estimated - est_mean)
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    rotation = U @ S @ Vt
    return rotation, gt_mean - rotation @ est_mean


def ate(estimated: Sequence[Pose], ground_truth: Sequence[Pose]) -> Tuple[float, float]:
    """Absolute trajectory error after rigid alignment.

    Returns:
        float: RMSE of the translation errors in meters.
        float: standard deviation of the translation error norms.
    """
    if len(estimated) != len(ground_truth):
        raise LengthMismatch(f"{len(estimated)} estimated poses but {len(ground_truth)} references")
    if len(estimated) < 2:
        raise LengthMismatch("ATE needs at least 2 poses")
    est = np.stack([pose.translation for pose in estimated])
    gt = np.stack([pose.translation for pose in ground_truth])
    rotation, translation = align(est, gt)
    errors = np.linalg.norm(est @ rotation.T + translation - gt, axis=1)
    return float(np.sqrt(np.mean(errors**2))), float(np.std(errors))
