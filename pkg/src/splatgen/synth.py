"""Procedural scenes, trajectory families, and dataset generation.

Scenes are a handful of colored ellipsoid Gaussians on a thin ground disk
(world frame: z up, ground in the xy-plane). Trajectories come from two
parametric families — low orbits and high arcs around the scene — with
per-scene jitter. Everything is generated in world coordinates, then scene
and cameras are mapped together into the normalized trajectory frame, so
stored frames are exact renders of the stored Gaussians under the stored
(normalized) cameras.

The hand-written trajectory classifier used for evaluation measures the
mean angle between the camera forward axes and the best-fit plane of the
camera centers; it is invariant to the rigid-plus-scale normalization.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .cameras import (
    Camera,
    Intrinsics,
    Pose,
    Trajectory,
    matrix_to_quat,
    normalization_transform,
    normalize_trajectory,
)
from .errors import ConfigError
from .gmldm.dataset import write_classes, write_scene
from .seeding import numpy_rng
from .splat import GaussianCloud, render

WORLD_UP = np.array([0.0, 0.0, 1.0])


def look_at(position, target, up=WORLD_UP) -> Pose:
    """Camera-to-world pose looking from position to target (image y down)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    if abs(np.dot(forward, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), position)


@dataclass
class TrajectoryFamily:
    name: str
    elevation_deg: float
    elevation_jitter: float = 4.0
    radius: float = 2.5
    radius_jitter: float = 0.3
    span_deg: float = 360.0
    span_jitter: float = 0.0
    focal: float = 1.2
    focal_jitter: float = 0.08
    target_jitter: float = 0.05
    per_frame_jitter: float = 0.02


ORBIT_LOW = TrajectoryFamily("orbit_low", elevation_deg=10.0)
ARC_HIGH = TrajectoryFamily(
    "arc_high", elevation_deg=55.0, elevation_jitter=5.0, radius=2.2,
    span_deg=130.0, span_jitter=20.0,
)

DEFAULT_FAMILIES = (ORBIT_LOW, ARC_HIGH)


def generate_trajectory(family: TrajectoryFamily, m: int, rng: np.random.Generator,
                        normalized=True) -> Trajectory:
    elev = np.deg2rad(family.elevation_deg + family.elevation_jitter * rng.normal())
    elev = np.clip(elev, np.deg2rad(2.0), np.deg2rad(75.0))
    radius = max(0.5, family.radius + family.radius_jitter * rng.normal())
    span = np.deg2rad(family.span_deg + family.span_jitter * rng.normal())
    theta0 = rng.uniform(0.0, 2.0 * np.pi)
    target = family.target_jitter * rng.normal(size=3)
    f = max(0.4, family.focal + family.focal_jitter * rng.normal())
    full_circle = family.span_deg >= 355.0
    cams = []
    for i in range(m):
        frac = i / m if full_circle else (i / (m - 1) if m > 1 else 0.0)
        theta = theta0 + span * frac
        r_i = radius * (1.0 + family.per_frame_jitter * rng.normal())
        e_i = elev + np.deg2rad(1.0) * family.per_frame_jitter * rng.normal()
        pos = np.array(
            [r_i * np.cos(e_i) * np.cos(theta), r_i * np.cos(e_i) * np.sin(theta),
             r_i * np.sin(e_i)]
        )
        cams.append(Camera(look_at(pos, target), Intrinsics((f, f), (0.5, 0.5))))
    traj = Trajectory(cams)
    return normalize_trajectory(traj) if normalized else traj


def trajectory_plane_angle(traj: Trajectory) -> float:
    """Mean angle (degrees) between forward axes and the camera-center plane.

    For orbits/arcs looking at the scene center this recovers the camera
    elevation, and it survives normalization (rigid transform plus scale).
    """
    centers = traj.centers()
    rel = centers - centers.mean(axis=0)
    _, _, vt = np.linalg.svd(rel, full_matrices=True)
    normal = vt[-1]
    angles = [
        np.arcsin(min(1.0, abs(float(np.dot(c.pose.R[:, 2], normal)))))
        for c in traj.cameras
    ]
    return float(np.degrees(np.mean(angles)))


def classify_trajectory(traj: Trajectory, threshold_deg: float = 30.0) -> str:
    """Geometric rule separating the two default families."""
    return "orbit_low" if trajectory_plane_angle(traj) < threshold_deg else "arc_high"


def make_scene_cloud(rng: np.random.Generator) -> GaussianCloud:
    """3-8 colored ellipsoids on a thin ground disk (world frame)."""
    k = int(rng.integers(3, 9))
    mus = [np.array([0.0, 0.0, -0.02])]
    qs = [np.array([1.0, 0.0, 0.0, 0.0])]
    ss = [np.array([1.6, 1.6, 0.02])]
    alphas = [0.95]
    colors = [np.array([0.35, 0.4, 0.3]) + 0.1 * rng.uniform(-1, 1, 3)]
    for _ in range(k):
        radial = rng.uniform(0.0, 0.8)
        angle = rng.uniform(0.0, 2 * np.pi)
        mus.append(
            np.array([radial * np.cos(angle), radial * np.sin(angle), rng.uniform(0.12, 0.5)])
        )
        q = rng.normal(size=4)
        qs.append(q / np.linalg.norm(q))
        ss.append(rng.uniform(0.08, 0.3, size=3))
        alphas.append(rng.uniform(0.7, 0.95))
        colors.append(rng.uniform(0.15, 0.95, size=3))
    return GaussianCloud(
        np.array(mus, dtype=np.float32), np.array(qs, dtype=np.float32),
        np.array(ss, dtype=np.float32), np.array(alphas, dtype=np.float32),
        np.array(colors, dtype=np.float32)[:, None, :],
    )


def transform_cloud(cloud: GaussianCloud, R0, t0, scale) -> GaussianCloud:
    """Apply the trajectory-normalization similarity to a scene cloud."""
    mu = (cloud.mu.astype(np.float64) - t0) @ R0 / scale
    from .cameras import quat_to_matrix

    q = np.stack([matrix_to_quat(R0.T @ quat_to_matrix(qk)) for qk in cloud.q])
    return GaussianCloud(
        mu.astype(np.float32), q.astype(np.float32),
        (cloud.s / scale).astype(np.float32), cloud.alpha.copy(), cloud.sh.copy(),
    )


@dataclass
class DatasetSpec:
    scenes_per_class: int = 2
    views: int = 12
    image_size: int = 32
    families: tuple = DEFAULT_FAMILIES
    distinct_scene_classes: bool = False  # one class id per scene (overfit runs)

    def class_names(self):
        if self.distinct_scene_classes:
            return [
                f"{fam.name}_{i}"
                for fam in self.families
                for i in range(self.scenes_per_class)
            ]
        return [fam.name for fam in self.families]


def render_scene_frames(cloud: GaussianCloud, traj: Trajectory, image_size: int):
    frames = [
        render(cloud, cam, (image_size, image_size)).rgb.astype(np.float32)
        for cam in traj.cameras
    ]
    return np.stack(frames)


def build_scene(family: TrajectoryFamily, m: int, image_size: int,
                rng: np.random.Generator):
    """One synthetic scene: (normalized trajectory, frames, cloud).

    The cloud is expressed in the normalized frame, so frames are exact
    renders of it under the stored trajectory.
    """
    world_traj = generate_trajectory(family, m, rng, normalized=False)
    R0, t0, scale = normalization_transform(world_traj)
    traj = normalize_trajectory(world_traj)
    cloud = transform_cloud(make_scene_cloud(rng), R0, t0, scale)
    frames = render_scene_frames(cloud, traj, image_size)
    return traj, frames, cloud


def make_dataset(root, spec: DatasetSpec, seed: int):
    """Write a full dataset directory; deterministic under the seed."""
    if spec.scenes_per_class < 1:
        raise ConfigError("scenes_per_class must be >= 1")
    os.makedirs(root, exist_ok=True)
    class_names = spec.class_names()
    write_classes(root, class_names)
    scene_index = 0
    for fam in spec.families:
        for i in range(spec.scenes_per_class):
            rng = numpy_rng(seed, f"scene:{fam.name}:{i}")
            traj, frames, _cloud = build_scene(fam, spec.views, spec.image_size, rng)
            name = (
                f"{fam.name}_{i}" if spec.distinct_scene_classes else fam.name
            )
            write_scene(
                os.path.join(root, f"scene_{scene_index:04d}"), traj, frames, name
            )
            scene_index += 1
    return root


def make_single_images(count, image_size, seed, families=DEFAULT_FAMILIES):
    """Random single-view renders for 2D co-training: list of (image, class_id)."""
    out = []
    for i in range(count):
        rng = numpy_rng(seed, f"single:{i}")
        fam = families[int(rng.integers(0, len(families)))]
        traj, frames, _ = build_scene(fam, 4, image_size, rng)
        pick = int(rng.integers(0, len(frames)))
        class_id = 1 + list(families).index(fam)
        out.append((frames[pick], class_id))
    return out
