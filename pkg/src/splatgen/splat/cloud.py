"""Gaussian cloud container and PLY import/export."""

import re
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataFormatError, NumericError

_PROPS = ["x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "opacity", "r", "g", "b"]


@dataclass
class GaussianCloud:
    """K anisotropic 3D Gaussians: position, rotation, scale, opacity, color.

    ``sh`` keeps an explicit coefficient axis (K, n_coeffs, 3); only the
    degree-0 (view-independent) coefficient is used, stored as plain RGB.
    """

    mu: np.ndarray  # (K, 3)
    q: np.ndarray  # (K, 4) unit quaternions, (w, x, y, z)
    s: np.ndarray  # (K, 3) positive scales
    alpha: np.ndarray  # (K,) opacities in (0, 1)
    sh: np.ndarray  # (K, 1, 3) color coefficients

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu))
        self.q = np.atleast_2d(np.asarray(self.q))
        self.s = np.atleast_2d(np.asarray(self.s))
        self.alpha = np.asarray(self.alpha).reshape(-1)
        self.sh = np.asarray(self.sh)
        if self.sh.ndim == 2:
            self.sh = self.sh[:, None, :]
        k = len(self.mu)
        shapes = (self.q.shape, self.s.shape, self.alpha.shape, self.sh.shape)
        if shapes != ((k, 4), (k, 3), (k,), (k, 1, 3)):
            raise ConfigError(f"inconsistent cloud field shapes: {shapes}")

    def __len__(self):
        return len(self.mu)

    @property
    def colors(self) -> np.ndarray:
        return self.sh[:, 0, :]

    def validate(self):
        for name in ("mu", "q", "s", "alpha", "sh"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"non-finite values in cloud field {name!r}")
        if len(self) == 0:
            return
        qn = np.linalg.norm(self.q, axis=1)
        if np.abs(qn - 1).max() > 1e-5:
            raise ConfigError("quaternions are not unit length")
        if not np.all(self.s > 0):
            raise ConfigError("scales must be positive")
        if not np.all((self.alpha > 0) & (self.alpha < 1)):
            raise ConfigError("opacities must lie in (0, 1)")

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            self.mu.astype(dtype),
            self.q.astype(dtype),
            self.s.astype(dtype),
            self.alpha.astype(dtype),
            self.sh.astype(dtype),
        )


def empty_cloud(dtype=np.float32) -> GaussianCloud:
    z = np.zeros((0, 3), dtype=dtype)
    return GaussianCloud(
        z, np.zeros((0, 4), dtype=dtype), z.copy(), np.zeros(0, dtype=dtype),
        np.zeros((0, 1, 3), dtype=dtype),
    )


def save_ply(path, cloud: GaussianCloud):
    """Binary little-endian PLY, one vertex per Gaussian, 14 float32 props:
    x y z, qw qx qy qz, sx sy sz, opacity, r g b.
    """
    k = len(cloud)
    header = ["ply", "format binary_little_endian 1.0",
              "comment splatgen gaussian cloud v1",
              "comment rotation quaternion is (qw qx qy qz); r g b in [0, 1]",
              f"element vertex {k}"]
    header += [f"property float {p}" for p in _PROPS]
    header.append("end_header")
    data = np.concatenate(
        [cloud.mu, cloud.q, cloud.s, cloud.alpha[:, None], cloud.colors], axis=1
    ).astype("<f4")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def load_ply(path) -> GaussianCloud:
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise DataFormatError(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in header[1]:
        raise DataFormatError(f"{path}: expected binary little-endian PLY")
    count = None
    props = []
    for line in header:
        m = re.match(r"element vertex (\d+)", line)
        if m:
            count = int(m.group(1))
        m = re.match(r"property float (\w+)", line)
        if m:
            props.append(m.group(1))
    if count is None:
        raise DataFormatError(f"{path}: missing 'element vertex' line")
    if props != _PROPS:
        raise DataFormatError(f"{path}: unexpected property list {props}")
    body = blob[end + len(b"end_header\n"):]
    expected = count * len(_PROPS) * 4
    if len(body) < expected:
        raise DataFormatError(f"{path}: truncated vertex data")
    data = np.frombuffer(body[:expected], dtype="<f4").reshape(count, len(_PROPS))
    return GaussianCloud(
        data[:, 0:3].copy(), data[:, 3:7].copy(), data[:, 7:10].copy(),
        data[:, 10].copy(), data[:, 11:14].copy()[:, None, :],
    )
