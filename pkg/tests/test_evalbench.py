import numpy as np
import pytest

from exactcoreset.evalbench import (
    bench_configurations,
    bench_extraction,
    displacement_error_sweep,
    kld_table,
    make_pair_problem,
    normalized_kld,
    random_sampling_baseline,
    validate_random,
)
from exactcoreset.quadratic import ResidualSystem, quadratic_of, reconstruct
from exactcoreset.utils import Degenerate, dumps, load_json


def test_validate_random_passes():
    report = validate_random(trials=3, n=3000, target_size=29, seed=7)
    assert report.passed
    assert len(report.trials) == 3
    assert all(row["size"] == 29 for row in report.trials)
    assert report.summary["max_error"] == max(row["error"] for row in report.trials)


def test_validate_random_is_deterministic():
    first = validate_random(trials=2, n=2000, target_size=64, seed=11)
    second = validate_random(trials=2, n=2000, target_size=64, seed=11)
    assert dumps(first.state_dict()) == dumps(second.state_dict())


def test_validate_random_passthrough():
    report = validate_random(trials=1, n=29, target_size=29)
    assert report.passed
    assert report.trials[0]["error"] == 0.0


def test_validate_random_in_processes():
    threaded = validate_random(trials=2, n=1000, target_size=29, seed=5, threads=2)
    serial = validate_random(trials=2, n=1000, target_size=29, seed=5)
    assert threaded.trials == serial.trials


def test_report_files(tmp_path):
    report = validate_random(trials=2, n=500, target_size=29, seed=1)
    report.save(tmp_path)
    assert load_json(tmp_path / "validate.json")["passed"]
    assert "extract_ms" in load_json(tmp_path / "validate_timing.json")
    lines = (tmp_path / "validate.csv").read_text().splitlines()
    assert lines[0] == "trial,error,size"
    assert len(lines) == 3


def test_normalized_kld_of_identical_matrices(rng):
    A = rng.standard_normal((20, 6))
    H = A.T @ A
    result = normalized_kld(H, H)
    assert result.score == pytest.approx(0.0, abs=1e-12)
    assert result.raw == pytest.approx(3.0)
    assert result.verbatim == pytest.approx(1 - np.exp(-3.0))
    assert not result.degenerate


def test_normalized_kld_of_singular_matrix(rng):
    A = rng.standard_normal((20, 6))
    H = A.T @ A
    singular = np.diag([1.0, 1.0, 1.0, 1.0, 1.0, 0.0])
    result = normalized_kld(H, singular)
    assert result.degenerate
    assert result.score == 1.0
    with pytest.raises(Degenerate):
        normalized_kld(H, singular, strict=True)


def test_normalized_kld_flags_a_lost_direction(rng):
    A = rng.standard_normal((20, 6))
    H = A.T @ A
    L = np.linalg.cholesky(H)
    lost = L @ np.diag([1.0, 1.0, 1.0, 1.0, 1.0, 0.01]) @ L.T
    result = normalized_kld(H, lost)
    assert result.degenerate
    assert np.isfinite(result.raw)
    assert result.score == pytest.approx(1 - np.exp(-0.5 * (0.01 - 1 - np.log(0.01))))
    assert not normalized_kld(H, 0.5 * H).degenerate


def test_normalized_kld_grows_with_distortion(rng):
    A = rng.standard_normal((50, 6))
    H = A.T @ A
    scores = [normalized_kld(H, scale * H).score for scale in (1.0, 1.5, 3.0, 10.0)]
    assert scores[0] < scores[1] < scores[2] < scores[3] < 1.0


def test_random_sampling_of_every_point(rng):
    system = ResidualSystem(rng.standard_normal(300), rng.standard_normal((300, 6)))
    selection = random_sampling_baseline(system, 100, seed=0)
    assert np.array_equal(selection.row_indices, np.arange(300))
    assert np.array_equal(selection.weights, np.ones(300))
    assert quadratic_of(system).relative_error(reconstruct(system, selection)) < 1e-12


def test_random_sampling_takes_whole_points(rng):
    system = ResidualSystem(rng.standard_normal(300), rng.standard_normal((300, 6)))
    selection = random_sampling_baseline(system, 10, seed=0)
    assert len(selection) == 30
    _, counts = np.unique(selection.row_indices // 3, return_counts=True)
    assert np.all(counts == 3)
    assert np.allclose(selection.weights, 10.0)
    with pytest.raises(ValueError):
        random_sampling_baseline(system, 101)


def test_exact_sampling_scores_zero(pair):
    report = kld_table(pair, point_budgets=(10, 256), target_sizes=(29, 64), trials=3, seed=2)
    assert report.passed
    assert all(row["score"] <= 1e-9 for row in report.trials if row["method"] == "exact")
    assert report.summary["random_10"]["mean"] > report.summary["random_256"]["mean"]


def test_displacement_at_zero_noise(pair):
    report = displacement_error_sweep(pair, target_sizes=(29, 64), noise_levels=(0.0, 1.0), trials=3)
    assert report.passed
    assert set(report.summary) == {
        f"{method}_{size}_{level}"
        for method in ("exact", "random")
        for size in (29, 64)
        for level in ("0", "1")
    }
    zero = [r["error"] for r in report.trials if r["method"] == "exact" and r["noise_deg"] == 0.0]
    assert max(zero) <= 1e-9


def test_exact_displacement_error_grows_with_noise(pair):
    report = displacement_error_sweep(pair, target_sizes=(29,), noise_levels=(0.0, 1.0, 4.0), trials=5)
    means = [report.summary[f"exact_29_{level}"]["mean"] for level in ("0", "1", "4")]
    assert means[0] <= 1e-9
    assert means[0] < means[1] < means[2]


def test_bench_records_phases():
    report = bench_extraction(n=2000, target_sizes=(29, 128), trials=2)
    assert report.passed
    assert set(report.timings) == {"29", "128"}
    assert {"flatten", "nullspace", "caratheodory"} <= set(report.timings["29"]["phases"])


def test_full_flattening_is_exact():
    report = bench_configurations(n=2000, target_size=29, trials=2, configurations=("full43_svd",))
    assert report.passed
    assert all(row["size"] <= 44 for row in report.trials)


@pytest.mark.slow
def test_lu_nullspace_is_faster_than_svd():
    report = bench_configurations(
        n=30000, target_size=29, trials=5, configurations=("compact28_svd", "compact28_lu")
    )
    svd = report.timings["compact28_svd"]["phases"]["nullspace"]["ms"]
    lu = report.timings["compact28_lu"]["phases"]["nullspace"]["ms"]
    assert svd >= 2 * lu


@pytest.mark.slow
def test_extraction_time_grows_with_target_size():
    report = bench_extraction(n=30000, target_sizes=(29, 1024), trials=5)
    assert report.passed
    assert report.timings["1024"]["extract_ms"]["median"] >= report.timings["29"]["extract_ms"]["median"]


@pytest.mark.slow
def test_kld_table_ordering():
    pair = make_pair_problem(num_points=10000, seed=0)
    report = kld_table(pair, trials=100, seed=0)
    means = [report.summary[f"random_{n}"]["mean"] for n in (10, 64, 256, 1024)]
    assert all(a > b for a, b in zip(means, means[1:]))
    assert means[0] > 0.9
    assert report.summary["random_10"]["degenerate"] > 0
    assert all(report.summary[f"exact_{m}"]["degenerate"] == 0 for m in (29, 64, 256, 1024))
    assert report.passed


@pytest.mark.slow
def test_displacement_errors_favor_exact_sampling(pair):
    report = displacement_error_sweep(pair, target_sizes=(29,), trials=20, seed=0)
    for level in ("0.5", "1", "2", "4"):
        exact = report.summary[f"exact_29_{level}"]["mean"]
        random = report.summary[f"random_29_{level}"]["mean"]
        assert exact < random
