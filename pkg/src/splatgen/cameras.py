"""Cameras, trajectories, ray maps, token encoding and interpolation.

Conventions, fixed project-wide:

* Poses are camera-to-world: ``R``'s columns are the camera axes expressed
  in world coordinates and ``t`` is the camera center.
* Camera frame is right-handed; the camera looks down +z, image x points
  right and image y points down.
* Intrinsics are resolution-independent: focal lengths are fractions of the
  image side (fx of width, fy of height) and the principal point lives in
  normalized [0, 1] image coordinates.
* Pixel (row i, col j) has its center at ((j + 0.5) / W, (i + 0.5) / H).

Trajectory tokens are 13-dimensional per camera: the first two columns of R
(6 values), the translation (3), focal lengths (2) and principal point (2).
Decoding applies Gram-Schmidt so arbitrary real inputs (e.g. denoised
diffusion states) always map back to a valid rotation.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataFormatError, DegenerateTrajectoryError

TOKEN_DIM = 13

_ORTHO_TOL = 1e-6


@dataclass
class Intrinsics:
    f: np.ndarray  # (2,) focal lengths, normalized by image side
    p: np.ndarray  # (2,) principal point in [0, 1]

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64).reshape(2)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(2)
        if not np.all(self.f > 0):
            raise ConfigError(f"focal lengths must be positive, got {self.f}")


@dataclass
class Pose:
    R: np.ndarray  # (3, 3) camera-to-world rotation
    t: np.ndarray  # (3,) camera center in world/scene units

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def validate(self, tol=_ORTHO_TOL):
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err > tol:
            raise ConfigError(f"rotation is not orthonormal (error {err:.2e})")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise ConfigError("rotation determinant is not +1")


def identity_pose() -> Pose:
    return Pose(np.eye(3), np.zeros(3))


@dataclass
class Camera:
    pose: Pose
    intrinsics: Intrinsics

    def validate(self):
        self.pose.validate()


def default_camera(f=(1.2, 1.2), p=(0.5, 0.5)) -> Camera:
    return Camera(identity_pose(), Intrinsics(np.array(f), np.array(p)))


@dataclass
class Trajectory:
    cameras: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ConfigError("a trajectory needs at least one camera")

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, i) -> Camera:
        return self.cameras[i]

    def centers(self) -> np.ndarray:
        return np.stack([c.pose.t for c in self.cameras])

    def is_normalized(self, tol=1e-5) -> bool:
        c0 = self.cameras[0].pose
        if np.abs(c0.R - np.eye(3)).max() > tol or np.abs(c0.t).max() > tol:
            return False
        return abs(np.linalg.norm(self.centers(), axis=1).max() - 1.0) <= tol


def normalization_transform(traj: Trajectory):
    """(R0, t0, scale) of the similarity that normalizes this trajectory.

    World points map as p' = R0^T (p - t0) / scale; applying it to the
    trajectory makes camera 0 the identity and the farthest camera center
    sit at distance 1.
    """
    if len(traj) < 2:
        raise ConfigError("normalization needs at least two cameras")
    R0 = traj[0].pose.R
    t0 = traj[0].pose.t
    dists = [np.linalg.norm(R0.T @ (c.pose.t - t0)) for c in traj.cameras]
    scale = max(dists)
    if scale < 1e-9:
        raise DegenerateTrajectoryError("all cameras coincide with camera 0")
    return R0, t0, scale


def normalize_trajectory(traj: Trajectory) -> Trajectory:
    """Re-express poses relative to camera 0 and scale the farthest camera
    center to distance 1. Intrinsics are untouched.
    """
    R0, t0, scale = normalization_transform(traj)
    cams = [
        Camera(
            Pose(R0.T @ c.pose.R, R0.T @ (c.pose.t - t0) / scale),
            Intrinsics(c.intrinsics.f.copy(), c.intrinsics.p.copy()),
        )
        for c in traj.cameras
    ]
    return Trajectory(cams)


def compute_ray_map(camera: Camera, resolution) -> np.ndarray:
    """Per-pixel 6-channel ray encoding (o x d, d), shape (6, H, W).

    Rays pass through pixel centers; directions are unit length in world
    coordinates, and o is the camera center.
    """
    h, w = int(resolution[0]), int(resolution[1])
    if h < 1 or w < 1:
        raise ConfigError(f"invalid resolution {resolution}")
    fx, fy = camera.intrinsics.f
    px, py = camera.intrinsics.p
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - px) / fx, (vv - py) / fy, np.ones_like(uu)])
    d_world = np.einsum("ij,jhw->ihw", camera.pose.R, d_cam)
    d_world /= np.linalg.norm(d_world, axis=0, keepdims=True)
    o = camera.pose.t
    moment = np.cross(o, np.moveaxis(d_world, 0, -1))  # (H, W, 3)
    return np.concatenate([np.moveaxis(moment, -1, 0), d_world], axis=0)


def pixel_rays(camera: Camera, resolution):
    """Camera origin and unit directions as (o (3,), d (H, W, 3))."""
    ray_map = compute_ray_map(camera, resolution)
    return camera.pose.t.copy(), np.moveaxis(ray_map[3:], 0, -1)


def encode_tokens(traj: Trajectory) -> np.ndarray:
    """Trajectory -> (M, 13) array of continuous camera tokens."""
    rows = []
    for cam in traj.cameras:
        R = cam.pose.R
        rows.append(
            np.concatenate(
                [R[:, 0], R[:, 1], cam.pose.t, cam.intrinsics.f, cam.intrinsics.p]
            )
        )
    return np.stack(rows)


def gram_schmidt_rotation(six: np.ndarray, eps=1e-8):
    """Two raw 3-vectors -> orthonormal rotation; flags a degenerate input."""
    a1 = six[:3]
    a2 = six[3:6]
    n1 = np.linalg.norm(a1)
    fallback = False
    if n1 < eps:
        return np.eye(3), True
    b1 = a1 / n1
    a2p = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(a2p)
    if n2 < eps:
        return np.eye(3), True
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1), fallback


def decode_tokens(tokens: np.ndarray, warn=True) -> Trajectory:
    """(M, 13) real-valued tokens -> Trajectory with valid SO(3) rotations.

    Noisy inputs are fine: rotations are re-orthonormalized, focal lengths
    clamped positive. Near-zero rotation columns fall back to the identity
    (with a warning unless suppressed).
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != TOKEN_DIM:
        raise ConfigError(f"tokens must be (M, {TOKEN_DIM}), got {tokens.shape}")
    cams = []
    for row in tokens:
        R, fell_back = gram_schmidt_rotation(row[:6])
        if fell_back and warn:
            warnings.warn("degenerate rotation token; falling back to identity")
        f = np.maximum(row[9:11], 1e-4)
        cams.append(Camera(Pose(R, row[6:9]), Intrinsics(f, row[11:13])))
    return Trajectory(cams)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> rotation matrix."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-3:
        raise ConfigError(f"quaternion norm {n:.4f} too far from 1")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    trace = np.trace(R)
    if trace > 0:
        s = np.sqrt(trace + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array(
                [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = np.array(
                [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = np.array(
                [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
            )
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Spherical-linear interpolation between unit quaternions."""
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 0.9995:
        out = q0 + u * (q1 - q0)
        return out / np.linalg.norm(out)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s0 = np.sin((1 - u) * theta) / np.sin(theta)
    s1 = np.sin(u * theta) / np.sin(theta)
    return s0 * q0 + s1 * q1


def interpolate_camera(traj: Trajectory, s: float) -> Camera:
    """Piecewise interpolation along the trajectory at s in [0, 1].

    Rotation is slerped, translation and intrinsics are linear; s = k/(M-1)
    returns stored camera k exactly.
    """
    if not 0.0 <= s <= 1.0:
        raise ConfigError(f"interpolation parameter s={s} outside [0, 1]")
    if len(traj) < 2:
        raise ConfigError("interpolation needs at least two cameras")
    m = len(traj)
    u = s * (m - 1)
    k = min(int(np.floor(u)), m - 2)
    frac = u - k
    a, b = traj[k], traj[k + 1]
    if frac == 0.0:
        return Camera(
            Pose(a.pose.R.copy(), a.pose.t.copy()),
            Intrinsics(a.intrinsics.f.copy(), a.intrinsics.p.copy()),
        )
    q = slerp(matrix_to_quat(a.pose.R), matrix_to_quat(b.pose.R), frac)
    t = (1 - frac) * a.pose.t + frac * b.pose.t
    f = (1 - frac) * a.intrinsics.f + frac * b.intrinsics.f
    p = (1 - frac) * a.intrinsics.p + frac * b.intrinsics.p
    return Camera(Pose(quat_to_matrix(q), t), Intrinsics(f, p))


def save_trajectory(path, traj: Trajectory, header=None):
    """Text format: one camera per line, 16 numbers: 9 rotation entries
    (row-major), 3 translation, 2 focal, 2 principal point.
    """
    lines = ["# rotation(9 row-major) translation(3) focal(2) principal(2)"]
    if header:
        lines.insert(0, f"# {header}")
    for cam in traj.cameras:
        vals = np.concatenate(
            [cam.pose.R.reshape(-1), cam.pose.t, cam.intrinsics.f, cam.intrinsics.p]
        )
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_trajectory(path) -> Trajectory:
    cams = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 16:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 16 values per camera, got {len(parts)}"
                )
            try:
                vals = np.array([float(p) for p in parts])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            cams.append(
                Camera(
                    Pose(vals[:9].reshape(3, 3), vals[9:12]),
                    Intrinsics(vals[12:14], vals[14:16]),
                )
            )
    if not cams:
        raise DataFormatError(f"{path}: no cameras found")
    return Trajectory(cams)
