"""Trajectory normalization, ray maps, tokens, interpolation, quaternions."""

import numpy as np
import pytest

from splatgen.cameras import (
    Camera,
    Intrinsics,
    Pose,
    Trajectory,
    compute_ray_map,
    decode_tokens,
    default_camera,
    encode_tokens,
    interpolate_camera,
    load_trajectory,
    matrix_to_quat,
    normalize_trajectory,
    quat_to_matrix,
    save_trajectory,
    slerp,
)
from splatgen.errors import ConfigError, DegenerateTrajectoryError
from helpers import random_rotation


def random_trajectory(rng, m, spread=2.0):
    cams = []
    for _ in range(m):
        cams.append(
            Camera(
                Pose(random_rotation(rng), rng.uniform(-spread, spread, 3)),
                Intrinsics(rng.uniform(0.8, 1.5, 2), rng.uniform(0.4, 0.6, 2)),
            )
        )
    return Trajectory(cams)


def pairwise_distances(traj):
    centers = traj.centers()
    diffs = centers[:, None, :] - centers[None, :, :]
    return np.linalg.norm(diffs, axis=-1)


# normalize_trajectory -------------------------------------------------------


def test_normalize_random_trajectory_invariants():
    rng = np.random.default_rng(0)
    traj = random_trajectory(rng, 10)
    before = pairwise_distances(traj)
    out = normalize_trajectory(traj)
    assert np.abs(out[0].pose.R - np.eye(3)).max() < 1e-12
    assert np.abs(out[0].pose.t).max() < 1e-12
    dists = np.linalg.norm(out.centers(), axis=1)
    assert abs(dists.max() - 1.0) < 1e-6
    # distance ratios preserved: after / before is one constant
    after = pairwise_distances(out)
    mask = before > 1e-9
    ratios = after[mask] / before[mask]
    assert ratios.max() - ratios.min() < 1e-9
    # intrinsics untouched
    for a, b in zip(traj.cameras, out.cameras):
        assert np.array_equal(a.intrinsics.f, b.intrinsics.f)


def test_normalize_is_fixed_point_on_normalized_input():
    rng = np.random.default_rng(1)
    once = normalize_trajectory(random_trajectory(rng, 6))
    twice = normalize_trajectory(once)
    for a, b in zip(once.cameras, twice.cameras):
        assert np.abs(a.pose.R - b.pose.R).max() < 1e-6
        assert np.abs(a.pose.t - b.pose.t).max() < 1e-6


def test_normalize_rejects_coincident_cameras():
    cam = default_camera()
    with pytest.raises(DegenerateTrajectoryError):
        normalize_trajectory(Trajectory([cam, default_camera()]))


def test_normalize_requires_two_cameras():
    with pytest.raises(ConfigError):
        normalize_trajectory(Trajectory([default_camera()]))


def test_normalize_idempotent_and_ratio_preserving_many():
    rng = np.random.default_rng(7)
    for _ in range(50):
        traj = random_trajectory(rng, int(rng.integers(2, 9)))
        out = normalize_trajectory(traj)
        assert out.is_normalized(tol=1e-6)
        again = normalize_trajectory(out)
        for a, b in zip(out.cameras, again.cameras):
            assert np.abs(a.pose.t - b.pose.t).max() < 1e-6


# ray maps -------------------------------------------------------------------


def test_ray_map_identity_camera_center_pixel():
    cam = default_camera(f=(1.0, 1.0), p=(0.5, 0.5))
    ray_map = compute_ray_map(cam, (5, 5))
    # center pixel of a 5x5 grid sits exactly at the principal point
    d = ray_map[3:, 2, 2]
    assert np.allclose(d, [0, 0, 1], atol=1e-12)
    assert np.abs(ray_map[:3]).max() < 1e-12  # origin 0 -> zero moment


def test_ray_map_directions_unit_and_moment_consistent():
    rng = np.random.default_rng(3)
    cam = Camera(
        Pose(random_rotation(rng), rng.uniform(-1, 1, 3)),
        Intrinsics((1.3, 1.1), (0.45, 0.55)),
    )
    ray_map = compute_ray_map(cam, (6, 8))
    d = ray_map[3:]
    norms = np.linalg.norm(d, axis=0)
    assert np.abs(norms - 1).max() < 1e-6
    moment = ray_map[:3]
    expected = np.cross(cam.pose.t, np.moveaxis(d, 0, -1))
    assert np.abs(moment - np.moveaxis(expected, -1, 0)).max() < 1e-12


def test_ray_map_corner_pixel_matches_scalar_pinhole():
    cam = default_camera(f=(1.0, 1.0), p=(0.5, 0.5))
    ray_map = compute_ray_map(cam, (4, 4))
    # corner pixel (0, 0): u = 0.5/4, v = 0.5/4 in normalized coordinates
    u, v = 0.125, 0.125
    d = np.array([(u - 0.5) / 1.0, (v - 0.5) / 1.0, 1.0])
    d /= np.linalg.norm(d)
    assert np.allclose(ray_map[3:, 0, 0], d, atol=1e-12)


def test_ray_map_varies_continuously():
    cam = default_camera()
    ray_map = compute_ray_map(cam, (16, 16))
    d = ray_map[3:]
    dx = np.abs(np.diff(d, axis=2)).max()
    dy = np.abs(np.diff(d, axis=1)).max()
    assert max(dx, dy) < 0.1


# token encode/decode --------------------------------------------------------


def test_identity_camera_tokens():
    tokens = encode_tokens(Trajectory([default_camera(f=(1.2, 1.2))]))
    assert np.allclose(tokens[0, :6], [1, 0, 0, 0, 1, 0])
    assert np.allclose(tokens[0, 6:9], 0)
    assert np.allclose(tokens[0, 9:11], 1.2)


def test_token_round_trip_100_random_cameras():
    rng = np.random.default_rng(5)
    traj = random_trajectory(rng, 100)
    out = decode_tokens(encode_tokens(traj))
    for a, b in zip(traj.cameras, out.cameras):
        assert np.abs(a.pose.R - b.pose.R).max() < 1e-5
        assert np.abs(a.pose.t - b.pose.t).max() < 1e-5
        assert np.abs(a.intrinsics.f - b.intrinsics.f).max() < 1e-5
        assert np.abs(a.intrinsics.p - b.intrinsics.p).max() < 1e-5


def test_decode_noisy_tokens_still_orthonormal():
    rng = np.random.default_rng(6)
    traj = random_trajectory(rng, 20)
    tokens = encode_tokens(traj) + 0.1 * rng.normal(size=(20, 13))
    out = decode_tokens(tokens)
    for cam in out.cameras:
        R = cam.pose.R
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
        assert abs(np.linalg.det(R) - 1) < 1e-6


def test_decode_arbitrary_finite_input_valid_rotations():
    rng = np.random.default_rng(8)
    out = decode_tokens(10.0 * rng.normal(size=(30, 13)), warn=False)
    for cam in out.cameras:
        R = cam.pose.R
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
        assert abs(np.linalg.det(R) - 1) < 1e-6


def test_decode_zero_rotation_falls_back_to_identity():
    tokens = np.zeros((1, 13))
    tokens[0, 9:11] = 1.0
    with pytest.warns(UserWarning):
        out = decode_tokens(tokens)
    assert np.allclose(out[0].pose.R, np.eye(3))


# interpolation ---------------------------------------------------------------


def test_interpolation_hits_knots_exactly():
    rng = np.random.default_rng(9)
    traj = normalize_trajectory(random_trajectory(rng, 5))
    for k in range(5):
        cam = interpolate_camera(traj, k / 4)
        assert np.abs(cam.pose.R - traj[k].pose.R).max() < 1e-12
        assert np.abs(cam.pose.t - traj[k].pose.t).max() < 1e-12


def test_interpolation_midpoint_90deg_is_45deg():
    # two cameras rotated 0 and 90 degrees about z; midpoint must be 45
    Rz = lambda a: np.array(
        [[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]]
    )
    cams = [
        Camera(Pose(np.eye(3), np.zeros(3)), Intrinsics((1, 1), (0.5, 0.5))),
        Camera(Pose(Rz(np.pi / 2), np.array([1.0, 0, 0])), Intrinsics((1, 1), (0.5, 0.5))),
    ]
    mid = interpolate_camera(Trajectory(cams), 0.5)
    # independent quaternion slerp oracle
    q = slerp(matrix_to_quat(np.eye(3)), matrix_to_quat(Rz(np.pi / 2)), 0.5)
    assert np.abs(mid.pose.R - quat_to_matrix(q)).max() < 1e-12
    assert np.abs(mid.pose.R - Rz(np.pi / 4)).max() < 1e-9
    assert np.allclose(mid.pose.t, [0.5, 0, 0])


def test_interpolation_is_continuous():
    rng = np.random.default_rng(11)
    traj = normalize_trajectory(random_trajectory(rng, 6))
    ss = np.linspace(0, 1, 400)
    prev = interpolate_camera(traj, ss[0])
    for s in ss[1:]:
        cur = interpolate_camera(traj, s)
        assert np.abs(cur.pose.R - prev.pose.R).max() < 0.1
        assert np.abs(cur.pose.t - prev.pose.t).max() < 0.1
        prev = cur


def test_interpolation_rejects_out_of_range():
    rng = np.random.default_rng(12)
    traj = random_trajectory(rng, 3)
    with pytest.raises(ConfigError):
        interpolate_camera(traj, 1.5)


# quaternions -----------------------------------------------------------------


def test_identity_quaternion_to_matrix():
    assert np.array_equal(quat_to_matrix([1, 0, 0, 0]), np.eye(3))


def test_quat_matrix_round_trips():
    rng = np.random.default_rng(13)
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        back = matrix_to_quat(quat_to_matrix(q))
        assert np.abs(back - q).max() < 1e-6


def test_quaternion_double_cover():
    rng = np.random.default_rng(14)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    assert np.abs(quat_to_matrix(q) - quat_to_matrix(-q)).max() < 1e-12


def test_non_unit_quaternion_rejected_beyond_tolerance():
    with pytest.raises(ConfigError):
        quat_to_matrix([2.0, 0, 0, 0])


# text format -----------------------------------------------------------------


def test_trajectory_text_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    traj = normalize_trajectory(random_trajectory(rng, 7))
    path = tmp_path / "traj.txt"
    save_trajectory(path, traj)
    back = load_trajectory(path)
    for a, b in zip(traj.cameras, back.cameras):
        assert np.array_equal(a.pose.R, b.pose.R)  # %.17g is lossless
        assert np.array_equal(a.pose.t, b.pose.t)
        assert np.array_equal(a.intrinsics.f, b.intrinsics.f)


def test_trajectory_text_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# comment\n1 2 3\n")
    with pytest.raises(Exception) as err:
        load_trajectory(path)
    assert ":2:" in str(err.value)
