import csv
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Mapping, Sequence

import numpy as np
import scipy.linalg
from tqdm import tqdm

from exactcoreset.coreset import (
    NUM_CLUSTERS,
    CoresetConfig,
    WeightedPointSet,
    fast_caratheodory,
    nullspace_vector,
)
from exactcoreset.dataset import aligned_pair
from exactcoreset.quadratic import (
    QuadraticModel,
    ResidualSelection,
    ResidualSystem,
    extract,
    quadratic_of,
    reconstruct,
)
from exactcoreset.registration import (
    Correspondences,
    GaussianPointCloud,
    Pose,
    RegistrationConfig,
    estimate_covariances,
    evaluate_rows,
    find_correspondences,
)
from exactcoreset.utils import Degenerate, Timer, save_json, timed

logger = logging.getLogger(__name__)

ERROR_TOLERANCE = 1e-10
POINT_BUDGETS = (10, 64, 256, 1024)
TARGET_SIZES = (29, 64, 128, 256, 512, 1024)
NOISE_LEVELS = (0.0, 0.5, 1.0, 2.0, 4.0)
DEGENERATE_RATIO = 0.05


@dataclass
class EvalReport:
    """Per-trial rows, summary statistics and the config they were produced with.

    Wall-clock timings are kept apart from everything else so the JSON report of a rerun
    with the same config is byte-identical.
    """

    name: str
    config: Mapping[str, Any]
    trials: List[Mapping[str, Any]] = field(default_factory=list)
    summary: Mapping[str, Any] = field(default_factory=dict)
    timings: Mapping[str, Any] = field(default_factory=dict)
    passed: bool = True

    def state_dict(self) -> Mapping[str, Any]:
        return {
            "name": self.name,
            "config": self.config,
            "trials": self.trials,
            "summary": self.summary,
            "passed": self.passed,
        }

    def save(self, out_dir: Path):
        out_dir = Path(out_dir)
        save_json(out_dir / f"{self.name}.json", self.state_dict(), logger)
        save_json(out_dir / f"{self.name}_timing.json", self.timings, logger)
        if self.trials:
            with open(out_dir / f"{self.name}.csv", "w", newline="") as file:
                writer = csv.DictWriter(file, fieldnames=list(self.trials[0]))
                writer.writeheader()
                writer.writerows(self.trials)


def stats(values: Sequence[float]) -> Mapping[str, float]:
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    if len(finite) == 0:
        return {"mean": float("nan"), "std": float("nan"), "median": float("nan")}
    return {
        "mean": float(np.mean(finite)),
        "std": float(np.std(finite)),
        "median": float(np.median(finite)),
    }


def random_system(rng: np.random.Generator, n: int, dim: int = 6) -> ResidualSystem:
    return ResidualSystem(rng.standard_normal(n), rng.standard_normal((n, dim)))


def trial_seeds(seed: int, trials: int) -> List[np.random.SeedSequence]:
    """Per-trial seeds derived from the master seed by counter, independent of execution order."""
    return np.random.SeedSequence(seed).spawn(trials)


def warm_up():
    """Compile the jitted nullspace kernel outside the timed region."""
    nullspace_vector(np.eye(1, 2))


def _validate_trial(seed_sequence, n, target_size, cluster_count, nullspace):
    system = random_system(np.random.default_rng(seed_sequence), n)
    timer = Timer()
    start = time.perf_counter()
    selection = extract(system, CoresetConfig(target_size, cluster_count, 0, nullspace), timer)
    elapsed = 1e3 * (time.perf_counter() - start)
    full = quadratic_of(system)
    error = full.relative_error(reconstruct(system, selection))
    return {"error": float(error), "size": len(selection)}, elapsed, timer


def validate_random(
    trials: int,
    n: int,
    target_size: int,
    seed: int = 0,
    cluster_count: int = NUM_CLUSTERS,
    nullspace: str = "lu",
    threads: int = 1,
) -> EvalReport:
    """Extract coresets of random residual systems and check the reconstruction error.

    Every trial draws J (N, 6) and e (N,) from a standard normal, extracts M rows and measures
    max(|H - H~|, |b - b~|, |c - c~|) relative to the largest entry of the full model.

    Args:
        trials (int): number of trials.
        n (int): rows per trial (> 28).
        target_size (int): target size M (>= 29).
        seed (int): master seed.
        cluster_count (int): clusters K.
        nullspace (str): nullspace kernel.
        threads (int): worker processes.

    Returns:
        EvalReport: passes iff every error is below 1e-10.
    """
    config = {
        "trials": trials,
        "n": n,
        "target_size": target_size,
        "seed": seed,
        "cluster_count": cluster_count,
        "nullspace": nullspace,
    }
    args = (
        trial_seeds(seed, trials),
        itertools.repeat(n),
        itertools.repeat(target_size),
        itertools.repeat(cluster_count),
        itertools.repeat(nullspace),
    )
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as executor:
            results = list(tqdm(executor.map(_validate_trial, *args), total=trials))
    else:
        warm_up()
        results = list(tqdm(map(_validate_trial, *args), total=trials, disable=trials < 10))

    rows, times, timer = [], [], Timer()
    for k, (row, elapsed, trial_timer) in enumerate(results):
        rows.append({"trial": k, **row})
        times.append(elapsed)
        timer.merge(trial_timer)

    errors = [row["error"] for row in rows]
    passed = all(error < ERROR_TOLERANCE for error in errors)
    summary = {"max_error": max(errors), "error": stats(errors), "sizes": stats([r["size"] for r in rows])}
    logger.info(
        f"validate N={n} M={target_size}: max error {summary['max_error']:.3e} "
        f"({'pass' if passed else 'FAIL'})"
    )
    return EvalReport(
        "validate",
        config,
        rows,
        summary,
        {"extract_ms": stats(times), "phases": timer.state_dict()},
        passed,
    )


def flatten_rows_full(jacobian: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """[a^T a (all 36 entries), a^T e, e^2]: the 43-dim flattening without the symmetry reduction."""
    n = len(residuals)
    outer = (jacobian[:, :, None] * jacobian[:, None, :]).reshape(n, -1)
    return np.hstack([outer, jacobian * residuals[:, None], (residuals * residuals)[:, None]])


def extract_full_flattening(
    system: ResidualSystem, config: CoresetConfig, timer: Timer | None = None
) -> ResidualSelection:
    n = len(system)
    with timed(timer, "flatten"):
        points = flatten_rows_full(system.jacobian, system.residuals)
    coreset = fast_caratheodory(WeightedPointSet(points, np.full(n, 1.0 / n)), config, timer)
    order = np.argsort(coreset.indices)
    return ResidualSelection(coreset.indices[order], n * coreset.weights[order], n)


EXTRACTION_CONFIGURATIONS = {
    "full43_svd": ("full", "svd"),
    "compact28_svd": ("compact", "svd"),
    "compact28_lu": ("compact", "lu"),
}


def bench_configurations(
    n: int = 30000,
    target_size: int = 29,
    trials: int = 10,
    seed: int = 0,
    cluster_count: int = NUM_CLUSTERS,
    configurations: Sequence[str] = tuple(EXTRACTION_CONFIGURATIONS),
) -> EvalReport:
    """Time the flattening and nullspace variants on identical inputs.

    The 43-dim flattening needs at least 44 rows to be exact, so its target is max(M, 44).
    """
    warm_up()
    seeds = trial_seeds(seed, trials)
    rows, timings = [], {}
    for name in configurations:
        flattening, nullspace = EXTRACTION_CONFIGURATIONS[name]
        size = max(target_size, 44) if flattening == "full" else target_size
        config = CoresetConfig(size, cluster_count, 0, nullspace)
        timer, times = Timer(), []
        for k, seed_sequence in enumerate(seeds):
            system = random_system(np.random.default_rng(seed_sequence), n)
            start = time.perf_counter()
            if flattening == "full":
                selection = extract_full_flattening(system, config, timer)
            else:
                selection = extract(system, config, timer)
            times.append(1e3 * (time.perf_counter() - start))
            error = quadratic_of(system).relative_error(reconstruct(system, selection))
            rows.append(
                {"configuration": name, "trial": k, "size": len(selection), "error": float(error)}
            )
        timings[name] = {"extract_ms": stats(times), "phases": timer.state_dict()}
        logger.info(f"{name}: median {timings[name]['extract_ms']['median']:.2f} ms")

    passed = all(row["error"] < ERROR_TOLERANCE for row in rows)
    config = {"n": n, "target_size": target_size, "trials": trials, "seed": seed}
    return EvalReport("configurations", config, rows, {}, timings, passed)


def bench_extraction(
    n: int = 30000,
    target_sizes: Sequence[int] = TARGET_SIZES,
    trials: int = 10,
    seed: int = 0,
    cluster_count: int = NUM_CLUSTERS,
    nullspace: str = "lu",
) -> EvalReport:
    """Median extraction time and per-phase breakdown for every target size M."""
    warm_up()
    seeds = trial_seeds(seed, trials)
    rows, timings = [], {}
    for target_size in target_sizes:
        config = CoresetConfig(target_size, cluster_count, 0, nullspace)
        timer, times = Timer(), []
        for k, seed_sequence in enumerate(seeds):
            system = random_system(np.random.default_rng(seed_sequence), n)
            start = time.perf_counter()
            selection = extract(system, config, timer)
            times.append(1e3 * (time.perf_counter() - start))
            error = quadratic_of(system).relative_error(reconstruct(system, selection))
            rows.append(
                {"target_size": target_size, "trial": k, "size": len(selection), "error": float(error)}
            )
        timings[str(target_size)] = {"extract_ms": stats(times), "phases": timer.state_dict()}
        logger.info(f"M={target_size}: median {timings[str(target_size)]['extract_ms']['median']:.2f} ms")

    passed = all(row["error"] < ERROR_TOLERANCE for row in rows)
    config = {
        "n": n,
        "target_sizes": list(target_sizes),
        "trials": trials,
        "seed": seed,
        "cluster_count": cluster_count,
        "nullspace": nullspace,
    }
    return EvalReport("bench", config, rows, {}, timings, passed)


def random_sampling_baseline(
    system: ResidualSystem, n_points: int, seed: int | np.random.SeedSequence = 0
) -> ResidualSelection:
    """Uniformly sample whole points (all three axes) with weight total / n_points per row."""
    total = len(system) // 3
    if not 1 <= n_points <= total:
        raise ValueError(f"n_points must be in [1, {total}], got {n_points}")
    rng = np.random.default_rng(seed)
    points = np.sort(rng.choice(total, n_points, replace=False))
    rows = (3 * points[:, None] + np.arange(3)).reshape(-1)
    return ResidualSelection(rows, np.full(len(rows), total / n_points), len(system))


@dataclass
class KLDScore:
    """`score` is zero for identical matrices; `raw` is the unshifted divergence.

    `degenerate` marks a singular or nearly rank-deficient approximation; only a singular one
    gets the saturated score of 1.
    """

    score: float
    raw: float
    degenerate: bool = False

    @property
    def verbatim(self) -> float:
        return 1.0 - np.exp(-self.raw) if np.isfinite(self.raw) else 1.0


def normalized_kld(H: np.ndarray, H_tilde: np.ndarray, strict: bool = False) -> KLDScore:
    """Normalized divergence between the Gaussians with information matrices H and H~.

    raw = 1/2 (log|H| - log|H~| + tr(H^-1 H~)) and the score is 1 - exp(-(raw - D/2)), which maps
    identical matrices to 0 and saturates towards 1. H~ is flagged degenerate when it is singular
    or keeps less than DEGENERATE_RATIO of the information of H along some direction (smallest
    generalized eigenvalue of (H~, H)).

    Args:
        H (NDArray): reference information matrix (D, D).
        H_tilde (NDArray): approximate information matrix (D, D).
        strict (bool): raise Degenerate for a singular H~ instead of returning a flagged score of 1.

    Returns:
        KLDScore: score in [0, 1), the raw divergence and the degenerate flag.
    """
    try:
        factor = scipy.linalg.cho_factor(H)
        factor_tilde = scipy.linalg.cho_factor(H_tilde)
    except np.linalg.LinAlgError:
        if strict:
            raise Degenerate("Information matrix is singular")
        return KLDScore(1.0, float("inf"), True)

    logdet = 2 * np.sum(np.log(np.diag(factor[0])))
    logdet_tilde = 2 * np.sum(np.log(np.diag(factor_tilde[0])))
    trace = np.trace(scipy.linalg.cho_solve(factor, H_tilde))
    raw = 0.5 * (logdet - logdet_tilde + trace)
    score = 1.0 - np.exp(-max(0.0, raw - 0.5 * len(H)))
    ratio = scipy.linalg.eigh(H_tilde, H, eigvals_only=True)[0]
    logger.debug(
        f"raw KLD {raw:.6e}, verbatim {1.0 - np.exp(-raw):.6f}, score {score:.6f}, "
        f"smallest information ratio {ratio:.3e}"
    )
    return KLDScore(float(score), float(raw), bool(ratio < DEGENERATE_RATIO))


@dataclass
class PairProblem:
    """Two frames with fixed correspondences found at their evaluation (ground-truth) poses."""

    target: GaussianPointCloud
    source: GaussianPointCloud
    pose_i: Pose
    pose_j: Pose
    correspondences: Correspondences

    def system(self, pose_j: Pose | None = None) -> ResidualSystem:
        """Residual rows and their Jacobian w.r.t. T_j, optionally at a perturbed T_j."""
        e, _, J = evaluate_rows(
            self.correspondences,
            self.target,
            self.source,
            self.pose_i,
            self.pose_j if pose_j is None else pose_j,
        )
        return ResidualSystem(e, J)


def make_pair_problem(
    num_points: int = 10000,
    seed: int = 0,
    registration: RegistrationConfig | None = None,
    threads: int = 1,
) -> PairProblem:
    registration = registration or RegistrationConfig()
    points_i, points_j, pose_i, pose_j = aligned_pair(num_points, seed)
    target = estimate_covariances(
        points_i, registration.k_neighbors, registration.covariance_epsilon, threads
    )
    source = estimate_covariances(
        points_j, registration.k_neighbors, registration.covariance_epsilon, threads
    )
    correspondences = find_correspondences(
        target, source, pose_i.inverse() @ pose_j, registration.max_correspondence_distance, threads
    )
    logger.info(f"Pair with {len(correspondences)} correspondences")
    return PairProblem(target, source, pose_i, pose_j, correspondences)


def shuffled_extract(
    system: ResidualSystem, config: CoresetConfig, rng: np.random.Generator
) -> ResidualSelection:
    """Extract after shuffling the points (rows move in groups of three)."""
    points = rng.permutation(len(system) // 3)
    order = (3 * points[:, None] + np.arange(3)).reshape(-1)
    selection = extract(ResidualSystem(system.residuals[order], system.jacobian[order]), config)
    rows = order[selection.row_indices]
    sort = np.argsort(rows)
    return ResidualSelection(rows[sort], selection.weights[sort], len(system))


def kld_table(
    pair: PairProblem,
    point_budgets: Sequence[int] = POINT_BUDGETS,
    target_sizes: Sequence[int] = (29, 64, 256, 1024),
    trials: int = 100,
    seed: int = 0,
    cluster_count: int = NUM_CLUSTERS,
) -> EvalReport:
    """Normalized KLD of random and exact sampling against the full Hessian at the evaluation pose."""
    system = pair.system()
    H = quadratic_of(system).H
    seeds = trial_seeds(seed, trials)

    rows = []
    for n_points in point_budgets:
        for k, seed_sequence in enumerate(seeds):
            selection = random_sampling_baseline(system, n_points, seed_sequence)
            result = normalized_kld(H, reconstruct(system, selection).H)
            rows.append(
                {
                    "method": "random",
                    "budget": n_points,
                    "trial": k,
                    "score": result.score,
                    "raw": result.raw,
                    "degenerate": result.degenerate,
                }
            )
    for target_size in target_sizes:
        config = CoresetConfig(target_size, cluster_count)
        for k, seed_sequence in enumerate(seeds):
            selection = shuffled_extract(system, config, np.random.default_rng(seed_sequence))
            result = normalized_kld(H, reconstruct(system, selection).H)
            rows.append(
                {
                    "method": "exact",
                    "budget": target_size,
                    "trial": k,
                    "score": result.score,
                    "raw": result.raw,
                    "degenerate": result.degenerate,
                }
            )

    summary = {}
    for (method, budget), group in itertools.groupby(rows, key=lambda r: (r["method"], r["budget"])):
        group = list(group)
        summary[f"{method}_{budget}"] = {
            **stats([r["score"] for r in group]),
            "degenerate": sum(r["degenerate"] for r in group),
        }
        logger.info(
            f"{method:>6} {budget:>5}: {summary[f'{method}_{budget}']['mean']:.3f} "
            f"+- {summary[f'{method}_{budget}']['std']:.3f}"
        )

    exact = [r["score"] for r in rows if r["method"] == "exact"]
    passed = all(score <= 1e-9 for score in exact)
    config = {
        "point_budgets": list(point_budgets),
        "target_sizes": list(target_sizes),
        "trials": trials,
        "seed": seed,
        "correspondences": len(pair.correspondences),
    }
    return EvalReport("kld", config, rows, summary, {}, passed)


def random_rotation_noise(angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Tangent [w; 0] with the axis uniform on the sphere and |w| = angle."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return np.concatenate([np.deg2rad(angle_deg) * axis, np.zeros(3)])


def displacement(model: QuadraticModel) -> np.ndarray:
    """Displacement claimed by the linearized system, H^-1 b."""
    return np.linalg.solve(model.H, model.b)


def displacement_error_sweep(
    pair: PairProblem,
    target_sizes: Sequence[int] = (29,),
    noise_levels: Sequence[float] = NOISE_LEVELS,
    trials: int = 20,
    seed: int = 0,
    cluster_count: int = NUM_CLUSTERS,
) -> EvalReport:
    """Displacement-vector error of exact and random sampling under rotation noise.

    Selections are made once per trial at the evaluation pose; T_j is then rotated by the
    noise and every method reweights the same perturbed rows. Random sampling gets the same
    residual budget rounded up to whole points.
    """
    evaluation = pair.system()
    seeds = trial_seeds(seed, trials)

    rows = []
    for k, seed_sequence in enumerate(seeds):
        rng = np.random.default_rng(seed_sequence)
        selections = {}
        for target_size in target_sizes:
            config = CoresetConfig(target_size, cluster_count)
            selections[("exact", target_size)] = shuffled_extract(evaluation, config, rng)
            selections[("random", target_size)] = random_sampling_baseline(
                evaluation, -(-target_size // 3), rng
            )
        for level in noise_levels:
            pose_j = pair.pose_j.retract(random_rotation_noise(level, rng))
            system = pair.system(pose_j)
            reference = displacement(quadratic_of(system))
            for (method, target_size), selection in selections.items():
                try:
                    error = np.linalg.norm(displacement(reconstruct(system, selection)) - reference)
                except np.linalg.LinAlgError:
                    error = float("nan")
                rows.append(
                    {
                        "method": method,
                        "budget": target_size,
                        "noise_deg": level,
                        "trial": k,
                        "error": float(error),
                    }
                )

    summary = {}
    key = lambda r: (r["method"], r["budget"], r["noise_deg"])
    for (method, budget, level), group in itertools.groupby(sorted(rows, key=key), key=key):
        summary[f"{method}_{budget}_{level:g}"] = stats([r["error"] for r in group])

    passed = all(
        r["error"] <= 1e-9 for r in rows if r["method"] == "exact" and r["noise_deg"] == 0
    )
    config = {
        "target_sizes": list(target_sizes),
        "noise_levels": list(noise_levels),
        "trials": trials,
        "seed": seed,
    }
    return EvalReport("displacement", config, rows, summary, {}, passed)
