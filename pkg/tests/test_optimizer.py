import numpy as np
import pytest

from exactcoreset.dataset import SyntheticLoop
from exactcoreset.downsample import FullFactor
from exactcoreset.optimizer import (
    FactorGraph,
    OptimizerConfig,
    ate,
    build_factor_graph,
    detect_overlaps,
    gauss_newton_step,
    optimize,
)
from exactcoreset.registration import (
    Correspondences,
    Pose,
    estimate_covariances,
    whiteners_for,
)
from exactcoreset.utils import LengthMismatch, SingularSystem


def positions(*translations):
    return [Pose.from_rotvec(np.zeros(3), t) for t in translations]


def test_ate_of_identical_trajectories():
    poses = positions([0, 0, 0], [1, 0, 0], [1, 1, 0])
    rmse, std = ate(poses, poses)
    assert rmse == pytest.approx(0.0, abs=1e-12)
    assert std == pytest.approx(0.0, abs=1e-12)


def test_ate_is_invariant_to_translation():
    poses = positions([0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 2, 1])
    shifted = [Pose.from_rotvec(np.zeros(3), [1, 0, 0]) @ pose for pose in poses]
    rmse, _ = ate(shifted, poses)
    assert rmse == pytest.approx(0.0, abs=1e-12)


def test_ate_of_two_poses():
    rmse, std = ate(positions([0, 0, 0], [1.2, 0, 0]), positions([0, 0, 0], [1, 0, 0]))
    assert rmse == pytest.approx(0.1)
    assert std == pytest.approx(0.0, abs=1e-12)


def test_ate_length_mismatch():
    with pytest.raises(LengthMismatch):
        ate(positions([0, 0, 0], [1, 0, 0]), positions([0, 0, 0]))


def grid_frames():
    """Three frames on a line, each seeing a 1 m block of a shared grid."""
    xs, ys, zs = np.meshgrid(np.arange(21) / 10, np.arange(11) / 10, np.arange(11) / 10)
    world = np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])
    poses = positions([0, 0, 0], [0.5, 0, 0], [1.0, 0, 0])
    clouds = []
    for pose in poses:
        local = world - pose.translation
        clouds.append(local[(local[:, 0] >= -1e-9) & (local[:, 0] <= 1.0 + 1e-9)])
    return clouds, poses


def test_overlaps_of_identical_clouds(rng):
    points = rng.uniform(size=(200, 3))
    assert detect_overlaps([points, points], positions([0, 0, 0], [0, 0, 0]), 0.99, 1e-6) == [(0, 1)]


def test_overlaps_of_disjoint_clouds(rng):
    points = rng.uniform(size=(200, 3))
    assert detect_overlaps([points, points], positions([0, 0, 0], [10, 0, 0]), 0.1, 0.5) == []


def test_overlaps_of_adjacent_frames():
    clouds, poses = grid_frames()
    assert detect_overlaps(clouds, poses, 0.3, 0.05) == [(0, 1), (1, 2)]


def perfect_pair(loop_points, offset):
    """Two clouds of the same points with index-matched correspondences."""
    target = estimate_covariances(loop_points)
    source_points = offset.inverse().transform(loop_points)
    source = estimate_covariances(source_points)
    return target, source


def fixed_correspondences(target, source, relative):
    n = len(source)
    whiteners = whiteners_for(target.covariances, source.covariances, relative.rotation)
    return Correspondences(np.arange(n), np.arange(n), whiteners)


def test_already_optimal_graph():
    points, _ = SyntheticLoop(num_frames=8, points_per_frame=600, seed=2)[0]
    cloud = estimate_covariances(points)
    correspondences = fixed_correspondences(cloud, cloud, Pose.identity())
    graph = FactorGraph(
        [Pose.identity(), Pose.identity()], [cloud, cloud], [FullFactor(0, 1, correspondences)]
    )
    result = optimize(graph)
    assert result.converged
    assert result.iterations == 1
    assert result.costs == [pytest.approx(0.0, abs=1e-20)]


def test_two_frames_recover_rigid_offset():
    points, _ = SyntheticLoop(num_frames=8, points_per_frame=600, seed=2)[0]
    truth = Pose.from_rotvec([0.02, -0.03, 0.05], [0.3, -0.1, 0.05])
    target, source = perfect_pair(points, truth)
    initial = truth.retract(np.array([0.01, 0.005, -0.01, 0.02, -0.03, 0.01]))
    correspondences = fixed_correspondences(target, source, initial)
    graph = FactorGraph(
        [Pose.identity(), initial], [target, source], [FullFactor(0, 1, correspondences)]
    )
    result = optimize(graph, OptimizerConfig(convergence_threshold=1e-10))

    assert result.poses[0] is graph.poses[0]
    error = result.poses[1].inverse() @ truth
    assert error.angle() < 1e-6
    assert np.linalg.norm(result.poses[1].translation - truth.translation) < 1e-6
    assert np.all(np.diff(result.costs) < 0)


def test_unconstrained_frame_is_singular(small_loop):
    loop, clouds = small_loop
    graph = build_factor_graph(clouds[:3], loop.poses[:3], [(0, 1)], target_size=None)
    with pytest.raises(SingularSystem):
        optimize(graph)


def test_first_step_matches_full_residuals(small_loop):
    loop, clouds = small_loop
    initial = loop.initial_poses(rotation_noise=1.0, translation_noise=0.05)
    overlaps = detect_overlaps(clouds, initial)
    assert len(overlaps) >= 3

    full = build_factor_graph(clouds, initial, overlaps, target_size=None)
    sampled = build_factor_graph(clouds, initial, overlaps, target_size=29, seed=4)
    dx_full = gauss_newton_step(full)
    dx_sampled = gauss_newton_step(sampled)
    assert np.linalg.norm(dx_sampled - dx_full) <= 1e-8 * np.linalg.norm(dx_full)
    assert np.all(dx_full[:6] == 0)


def test_optimization_decreases_cost_and_keeps_gauge(small_loop):
    loop, clouds = small_loop
    initial = loop.initial_poses(rotation_noise=1.0, translation_noise=0.05)
    overlaps = detect_overlaps(clouds, initial)
    graph = build_factor_graph(clouds, initial, overlaps, target_size=29, seed=4, threads=2)
    result = optimize(graph, OptimizerConfig(max_iterations=30, threads=2))

    assert np.all(np.diff(result.costs) < 0)
    assert np.array_equal(result.poses[0].matrix, initial[0].matrix)
    per_linearization = sum(len(factor.selection) for factor in graph.factors)
    assert result.row_evaluations >= per_linearization
    assert result.row_evaluations % per_linearization == 0
    assert result.row_evaluations <= per_linearization * (result.iterations + 1)


@pytest.mark.slow
def test_sampled_loop_matches_full_loop():
    loop = SyntheticLoop(num_frames=20, points_per_frame=2000, seed=0)
    frames = [loop[index] for index in range(len(loop))]
    clouds = [estimate_covariances(points) for points, _ in frames]
    initial = loop.initial_poses(rotation_noise=1.0, translation_noise=0.05)
    overlaps = detect_overlaps(clouds, initial)

    full = optimize(build_factor_graph(clouds, initial, overlaps, target_size=None))
    sampled = optimize(build_factor_graph(clouds, initial, overlaps, target_size=29))

    full_rmse, _ = ate(full.poses, loop.poses)
    sampled_rmse, _ = ate(sampled.poses, loop.poses)
    initial_rmse, _ = ate(initial, loop.poses)
    assert full_rmse < initial_rmse
    assert abs(sampled_rmse - full_rmse) < max(0.05 * full_rmse, 1e-3)
    assert sampled.row_evaluations < 0.02 * full.row_evaluations
