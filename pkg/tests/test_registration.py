import numpy as np
import pytest

from exactcoreset.registration import (
    Correspondence,
    Correspondences,
    GaussianPointCloud,
    Pose,
    estimate_covariances,
    evaluate_rows,
    find_correspondences,
    jacobian,
    residual,
    skew,
    whiteners_for,
)
from exactcoreset.utils import NoOverlap, TooFewPoints


def random_pose(rng, angle=0.5, offset=1.0):
    return Pose.from_rotvec(angle * rng.standard_normal(3), offset * rng.standard_normal(3))


def random_covariance(rng):
    A = rng.standard_normal((3, 3))
    return A @ A.T + 0.1 * np.eye(3)


def random_problem(rng):
    target = GaussianPointCloud(rng.standard_normal((1, 3)), random_covariance(rng)[None])
    source = GaussianPointCloud(rng.standard_normal((1, 3)), random_covariance(rng)[None])
    pose_i, pose_j = random_pose(rng), random_pose(rng)
    R = (pose_i.inverse() @ pose_j).rotation
    whitener = whiteners_for(target.covariances, source.covariances, R)[0]
    return target, source, pose_i, pose_j, Correspondence(0, 0, whitener)


def test_skew_is_cross_product(rng):
    a, b = rng.standard_normal((2, 3))
    assert np.allclose(skew(a) @ b, np.cross(a, b))


def test_pose_inverse_and_retraction(rng):
    pose = random_pose(rng)
    assert np.allclose((pose @ pose.inverse()).matrix, np.eye(4))
    xi = 0.1 * rng.standard_normal(6)
    assert np.allclose(pose.local(pose.retract(xi)), xi)


def test_pose_state_dict(rng):
    pose = random_pose(rng)
    restored = Pose.from_state_dict(pose.state_dict())
    assert np.allclose(restored.matrix, pose.matrix)


def test_whitening_identity(rng):
    for _ in range(20):
        target, source, pose_i, pose_j, correspondence = random_problem(rng)
        relative = pose_i.inverse() @ pose_j
        d = target.means[0] - relative.transform(source.means[0])
        omega = np.linalg.inv(
            target.covariances[0] + relative.rotation @ source.covariances[0] @ relative.rotation.T
        )
        e = residual(correspondence, target, source, pose_i, pose_j)
        assert np.isclose(e @ e, d @ omega @ d, rtol=1e-9)


def numeric_jacobian(function, h=1e-6):
    columns = []
    for k in range(6):
        step = np.zeros(6)
        step[k] = h
        columns.append((function(step) - function(-step)) / (2 * h))
    return np.stack(columns, axis=1)


def test_jacobians_match_finite_differences(rng):
    for _ in range(100):
        target, source, pose_i, pose_j, correspondence = random_problem(rng)
        single = Correspondences.single(correspondence)

        analytic_j = jacobian(correspondence, target, source, pose_i, pose_j)
        numeric_j = numeric_jacobian(
            lambda xi: evaluate_rows(single, target, source, pose_i, pose_j.retract(xi))[0]
        )
        assert np.linalg.norm(analytic_j - numeric_j) <= 1e-5 * max(1.0, np.linalg.norm(analytic_j))

        _, analytic_i, _ = evaluate_rows(single, target, source, pose_i, pose_j)
        numeric_i = numeric_jacobian(
            lambda xi: evaluate_rows(single, target, source, pose_i.retract(xi), pose_j)[0]
        )
        assert np.linalg.norm(analytic_i - numeric_i) <= 1e-5 * max(1.0, np.linalg.norm(analytic_i))


def test_covariances_are_flat_discs(rng):
    points = np.column_stack([rng.uniform(size=(500, 2)), np.zeros(500)])
    cloud = estimate_covariances(points, k_neighbors=10, epsilon=1e-3)
    eigenvalues, eigenvectors = np.linalg.eigh(cloud.covariances)
    assert np.allclose(eigenvalues[:, 0] / eigenvalues[:, 2], 1e-3)
    assert np.allclose(eigenvalues[:, 1], eigenvalues[:, 2])
    assert np.allclose(np.abs(eigenvectors[:, 2, 0]), 1.0)


def test_covariances_need_enough_points(rng):
    with pytest.raises(TooFewPoints):
        estimate_covariances(rng.standard_normal((5, 3)), k_neighbors=10)


def test_correspondences_of_distant_clouds(rng):
    cloud = estimate_covariances(rng.standard_normal((50, 3)))
    with pytest.raises(NoOverlap):
        find_correspondences(cloud, cloud, Pose.from_rotvec(np.zeros(3), [100.0, 0, 0]), 1.0)


def test_correspondences_of_identical_clouds(rng):
    cloud = estimate_covariances(rng.standard_normal((50, 3)))
    correspondences = find_correspondences(cloud, cloud, Pose.identity(), 0.1)
    assert np.array_equal(correspondences.source_indices, np.arange(50))
    assert np.array_equal(correspondences.target_indices, np.arange(50))
    e, _, _ = evaluate_rows(correspondences, cloud, cloud, Pose.identity(), Pose.identity())
    assert np.allclose(e, 0.0)


def test_selected_rows_match_full_evaluation(rng):
    cloud = estimate_covariances(rng.standard_normal((50, 3)))
    correspondences = find_correspondences(cloud, cloud, Pose.identity(), 10.0)
    pose_j = random_pose(rng, 0.05, 0.05)
    full = evaluate_rows(correspondences, cloud, cloud, Pose.identity(), pose_j)
    rows = np.array([0, 4, 17, 149])
    subset = evaluate_rows(correspondences, cloud, cloud, Pose.identity(), pose_j, rows)
    for a, b in zip(full, subset):
        assert np.allclose(a[rows], b)


def test_covariances_on_a_sphere(rng):
    points = rng.standard_normal((2000, 3))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    cloud = estimate_covariances(points, k_neighbors=9)
    assert np.allclose(cloud.covariances, cloud.covariances.transpose(0, 2, 1))
    eigenvalues, eigenvectors = np.linalg.eigh(cloud.covariances)
    assert np.all(eigenvalues > 0)
    assert np.allclose(eigenvalues[:, 0] / eigenvalues[:, 2], 1e-3)
    normals = np.abs(np.einsum("ni,ni->n", eigenvectors[:, :, 0], points))
    assert np.median(normals) > 0.99


def test_correspondences_match_exhaustive_search(rng):
    target = estimate_covariances(rng.uniform(size=(300, 3)))
    source = estimate_covariances(rng.uniform(size=(200, 3)))
    relative = random_pose(rng, 0.1, 0.1)
    correspondences = find_correspondences(target, source, relative, 0.08)

    moved = relative.transform(source.means)
    distances = np.linalg.norm(moved[:, None] - target.means[None], axis=2)
    matched = np.flatnonzero(distances.min(axis=1) <= 0.08)
    assert len(matched) > 0
    assert np.array_equal(correspondences.source_indices, matched)
    assert np.array_equal(correspondences.target_indices, distances[matched].argmin(axis=1))


@pytest.mark.parametrize("perturbed", [False, True])
def test_constant_term_is_symmetric_in_the_frames(pair, perturbed):
    pose_i, pose_j = pair.pose_i, pair.pose_j
    if perturbed:
        pose_j = pose_j.retract(np.array([0.01, -0.02, 0.015, 0.03, 0.0, -0.02]))
    forward = pair.correspondences
    mirrored = Correspondences(forward.target_indices, forward.source_indices, forward.whiteners)

    e_ij, _, _ = evaluate_rows(forward, pair.target, pair.source, pose_i, pose_j, None, True)
    e_ji, _, _ = evaluate_rows(mirrored, pair.source, pair.target, pose_j, pose_i, None, True)
    c_ij = (e_ij.reshape(-1, 3) ** 2).sum(axis=1)
    c_ji = (e_ji.reshape(-1, 3) ** 2).sum(axis=1)
    assert abs(c_ij.sum() - c_ji.sum()) <= 1e-9 * c_ij.sum()
    assert np.allclose(c_ij, c_ji, rtol=1e-9, atol=1e-12)
