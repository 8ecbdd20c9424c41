import numpy as np
import pytest

from exactcoreset.cli import main
from exactcoreset.dataset import SyntheticLoop, save_points, write_pose
from exactcoreset.utils import load_json


def test_validate_passthrough(capsys):
    assert main(["validate", "--trials", "1", "--n", "29", "--m", "29"]) == 0
    assert "pass" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        ["validate", "--m", "10"],
        ["validate", "--k", "8"],
        ["validate", "--trials", "0"],
        ["bench", "--m", "29,12"],
        ["optimize", "--frames", "1"],
        ["validate", "--threads", "0"],
        ["downsample", "target.txt", "source.txt"],
    ],
)
def test_invalid_arguments(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


def test_validate_reports_are_reproducible(tmp_path):
    argv = ["validate", "--trials", "2", "--n", "2000", "--seed", "3", "--out", str(tmp_path)]
    assert main(argv) == 0
    first = (tmp_path / "validate.json").read_bytes()
    assert main(argv) == 0
    assert (tmp_path / "validate.json").read_bytes() == first
    assert (tmp_path / "validate_timing.json").exists()
    assert (tmp_path / "exactcoreset.log").exists()


def write_frames(directory, shift=(0.0, 0.0, 0.0)):
    loop = SyntheticLoop(num_frames=20, points_per_frame=1500, seed=0)
    (points_i, pose_i), (points_j, pose_j) = loop[0], loop[1]
    save_points(directory / "target.xyz", points_i)
    save_points(directory / "source.xyz", points_j + np.asarray(shift))
    write_pose(directory / "pose_i.json", pose_i)
    write_pose(directory / "pose_j.json", pose_j)
    return [
        "downsample",
        str(directory / "target.xyz"),
        str(directory / "source.xyz"),
        "--pose-i",
        str(directory / "pose_i.json"),
        "--pose-j",
        str(directory / "pose_j.json"),
    ]


def test_downsample(tmp_path):
    out = tmp_path / "out"
    assert main(write_frames(tmp_path) + ["--out", str(out)]) == 0
    factor = load_json(out / "factor.json")
    assert len(factor["selection"]["indices"]) == 29
    summary = load_json(out / "summary.json")
    assert summary["rows"] == 29
    assert summary["relative_error"] < 1e-10


def test_downsample_without_overlap(tmp_path):
    assert main(write_frames(tmp_path, shift=(100.0, 0.0, 0.0))) == 1


def test_optimize_writes_trajectories(tmp_path):
    argv = [
        "optimize",
        "--frames", "4",
        "--points-per-frame", "800",
        "--max-iterations", "5",
        "--seed", "1",
        "--out", str(tmp_path),
    ]
    assert main(argv) == 0
    assert len((tmp_path / "trajectory.txt").read_text().splitlines()) == 4
    report = load_json(tmp_path / "optimize.json")
    assert report["ate"]["rmse"] >= 0.0
    assert report["memory_bytes"] > 0
    costs = (tmp_path / "costs.csv").read_text().splitlines()
    assert costs[0] == "iteration,cost"
