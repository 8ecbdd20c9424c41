import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import open3d as o3d
from scipy.spatial.transform import Rotation

from exactcoreset.registration import Pose
from exactcoreset.utils import TooFewPoints, load_json, save_json

logger = logging.getLogger(__name__)

POINT_FORMATS = (".xyz", ".xyzn", ".xyzrgb", ".pts", ".ply", ".pcd")


def load_points(path: Path) -> np.ndarray:
    """Read point positions with Open3D; the format follows the file extension."""
    path = Path(path)
    if path.suffix.lower() not in POINT_FORMATS:
        raise ValueError(f"{path}: unsupported point cloud format, expected one of {POINT_FORMATS}")
    if not path.is_file():
        raise FileNotFoundError(path)
    cloud = o3d.io.read_point_cloud(path.as_posix())
    points = np.asarray(cloud.points, dtype=np.float64)
    if len(points) == 0:
        raise TooFewPoints(f"{path}: no points could be read")
    return points


def save_points(path: Path, points: np.ndarray):
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    cloud = o3d.geometry.PointCloud(
        o3d.utility.Vector3dVector(np.asarray(points, dtype=np.float64))
    )
    if not o3d.io.write_point_cloud(path.as_posix(), cloud):
        raise OSError(f"Could not write {path}")


def read_pose(path: Path) -> Pose:
    return Pose.from_state_dict(load_json(path))


def write_pose(path: Path, pose: Pose):
    save_json(path, pose.state_dict())


def write_trajectory(path: Path, poses: Sequence[Pose], timestamps: Sequence[float] = None):
    """One line per frame: "timestamp tx ty tz qx qy qz qw"."""
    if timestamps is None:
        timestamps = np.arange(len(poses), dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with open(path, "w") as file:
        for stamp, pose in zip(timestamps, poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()
            values = [stamp, *pose.translation, *q]
            file.write(" ".join(f"{v:.9f}" for v in values) + "\n")


def read_trajectory(path: Path) -> Tuple[np.ndarray, List[Pose]]:
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    poses = [Pose(Rotation.from_quat(row[4:8]).as_matrix(), row[1:4]) for row in data]
    return data[:, 0], poses


@dataclass
class SyntheticScene:
    """A desk-scale room: floor, three walls and a few spheres.

    A zero `wall_height` leaves out the walls.

    Args:
        half_size (float): half the side length of the square floor in meters.
        wall_height (float): height of the walls in meters.
        spheres (Sequence[Tuple[float, float, float, float]]): (x, y, z, radius) of each sphere.
    """

    half_size: float = 4.0
    wall_height: float = 2.5
    spheres: Sequence[Tuple[float, float, float, float]] = field(
        default_factory=lambda: (
            (1.5, 1.0, 0.6, 0.6),
            (-1.8, 0.5, 0.4, 0.4),
            (0.3, -2.0, 0.8, 0.5),
            (-0.8, -1.2, 1.6, 0.3),
        )
    )

    def _surfaces(self):
        s, h = self.half_size, self.wall_height
        surfaces = [
            ("floor", 4 * s * s),
            ("wall_x", 2 * s * h),
            ("wall_y", 2 * s * h),
            ("wall_-x", 2 * s * h),
        ]
        surfaces += [(k, 4 * np.pi * r * r) for k, (*_, r) in enumerate(self.spheres)]
        return surfaces

    def sample(self, num_points: int, rng: np.random.Generator) -> np.ndarray:
        """Sample points uniformly by area over all surfaces."""
        s, h = self.half_size, self.wall_height
        surfaces = self._surfaces()
        areas = np.array([area for _, area in surfaces])
        counts = rng.multinomial(num_points, areas / areas.sum())

        points = []
        for (name, _), n in zip(surfaces, counts):
            u, v = rng.uniform(size=(2, n))
            if name == "floor":
                points.append(np.stack([(2 * u - 1) * s, (2 * v - 1) * s, np.zeros(n)], 1))
            elif name == "wall_x":
                points.append(np.stack([np.full(n, s), (2 * u - 1) * s, v * h], 1))
            elif name == "wall_y":
                points.append(np.stack([(2 * u - 1) * s, np.full(n, s), v * h], 1))
            elif name == "wall_-x":
                points.append(np.stack([np.full(n, -s), (2 * u - 1) * s, v * h], 1))
            else:
                x, y, z, r = self.spheres[name]
                directions = rng.standard_normal((n, 3))
                directions /= np.linalg.norm(directions, axis=1, keepdims=True)
                points.append(np.array([x, y, z]) + r * directions)
        points = np.concatenate(points)
        return points[rng.permutation(len(points))]


class SyntheticLoop:
    """Frames observing a SyntheticScene from poses on a circular loop.

    Every frame draws its own surface samples, keeps those within `max_range` of the sensor and
    expresses them in the sensor frame, so overlapping frames share surfaces but not points.
    """

    def __init__(
        self,
        num_frames: int = 20,
        points_per_frame: int = 2000,
        radius: float = 1.5,
        height: float = 1.0,
        max_range: float = 4.0,
        point_noise: float = 0.0,
        scene: SyntheticScene | None = None,
        seed: int = 0,
    ):
        self.scene = scene or SyntheticScene()
        self.num_frames = num_frames
        self.points_per_frame = points_per_frame
        self.max_range = max_range
        self.point_noise = point_noise
        self.seed = seed

        angles = 2 * np.pi * np.arange(num_frames) / num_frames
        self.poses = [
            Pose.from_rotvec(
                [0.0, 0.0, angle + np.pi / 2],
                [radius * np.cos(angle), radius * np.sin(angle), height],
            )
            for angle in angles
        ]

    def __len__(self) -> int:
        return self.num_frames

    def __getitem__(self, index: int) -> Tuple[np.ndarray, Pose]:
        rng = np.random.default_rng([self.seed, index])
        pose = self.poses[index]
        world = self.scene.sample(8 * self.points_per_frame, rng)
        world = world[np.linalg.norm(world - pose.translation, axis=1) <= self.max_range]
        world = world[: self.points_per_frame]
        points = pose.inverse().transform(world)
        if self.point_noise > 0:
            points = points + self.point_noise * rng.standard_normal(points.shape)
        return points, pose

    def initial_poses(
        self, rotation_noise: float = 1.0, translation_noise: float = 0.05, fixed_frame: int = 0
    ) -> List[Pose]:
        """Ground truth perturbed by a random rotation (degrees) and translation (meters) per frame."""
        rng = np.random.default_rng([self.seed, self.num_frames, 7])
        poses = []
        for index, pose in enumerate(self.poses):
            if index == fixed_frame:
                poses.append(pose)
                continue
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            xi = np.concatenate(
                [np.deg2rad(rotation_noise) * axis, translation_noise * rng.standard_normal(3)]
            )
            poses.append(pose.retract(xi))
        return poses


def open_ground() -> SyntheticScene:
    """A wall-less floor with three small spheres, the layout of a street scan.

    Around 90% of the samples near the loop fall on the floor, which alone leaves the in-plane
    translation and the yaw constrained only by the covariance regularization.
    """
    return SyntheticScene(
        half_size=6.0,
        wall_height=0.0,
        spheres=((3.0, 1.5, 0.5, 0.35), (0.5, -2.0, 0.6, 0.35), (-0.5, 1.5, 0.9, 0.3)),
    )


def aligned_pair(
    num_points: int = 10000,
    seed: int = 0,
    step: float = 0.15,
    scene: SyntheticScene | None = None,
) -> Tuple[np.ndarray, np.ndarray, Pose, Pose]:
    """Two nearby frames with their ground-truth (aligned) poses, over `open_ground` by default.

    Returns:
        NDArray: points of frame i (N, 3).
        NDArray: points of frame j (N, 3).
        Pose: pose of frame i.
        Pose: pose of frame j.
    """
    loop = SyntheticLoop(
        num_frames=int(round(2 * np.pi * 1.5 / step)),
        points_per_frame=num_points,
        scene=scene or open_ground(),
        seed=seed,
    )
    points_i, pose_i = loop[0]
    points_j, pose_j = loop[1]
    return points_i, points_j, pose_i, pose_j
