import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewmt.geometry import (Box, CameraIntrinsics, CameraPose, DegenerateAim, GeometryError, NoIntersection,
                             PlaneBehindCamera, PlaneModel, PoseFile, PoseFrame, PoseTransform, TauKind,
                             apply_homography, apply_transform, look_at, pixel_directions, pixel_ray, plane_homography,
                             project, ray_box, ray_from, raycast_plane, rot_x, rot_y, rot_z, ypr_matrix)

INTR = CameraIntrinsics(100.0, 100.0, 63.5, 35.5, 128, 72)
BIG_BOX = Box((-100.0, -100.0, -100.0), (100.0, 100.0, 100.0))
WALL = PlaneModel((0.0, -1.0, 0.0), 0.0)


def identity_pose(position=(0.0, 0.0, 0.0)):
    return CameraPose(np.array(position, dtype=float), np.eye(3))


# --------------------------------------------------------------------------
# intrinsics and poses

def test_from_fov_principal_point_is_image_center():
    intr = CameraIntrinsics.from_fov(128, 72, 90.0)
    assert intr.cx == 63.5 and intr.cy == 35.5
    assert intr.fx == pytest.approx(64.0)


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        CameraIntrinsics(0.0, 1.0, 0, 0, 10, 10)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1.0, 1.0, 0, 0, 0, 10)


def test_scaled_keeps_field_of_view():
    s = INTR.scaled(256, 144)
    assert s.fx == pytest.approx(200.0)
    # the image-edge ray keeps its angle
    assert (-0.5 - s.cx) / s.fx == pytest.approx((-0.5 - INTR.cx) / INTR.fx)


def test_intrinsics_dict_roundtrip():
    assert CameraIntrinsics.from_dict(INTR.to_dict()) == INTR


def test_pose_rejects_non_rotation():
    with pytest.raises(GeometryError):
        CameraPose(np.zeros(3), np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(GeometryError):
        CameraPose(np.zeros(3), np.diag([1.0, 1.0, -1.0]))


def test_pose_is_immutable():
    p = identity_pose()
    with pytest.raises(ValueError):
        p.position[0] = 1.0


def test_pose_matrix_roundtrip():
    p = look_at([3.0, -20.0, 4.0], [0.0, 0.0, 0.0])
    q = CameraPose.from_matrix(p.matrix())
    assert q == p


# --------------------------------------------------------------------------
# rotations and look-at

def test_rotations_are_proper():
    for r in (rot_x(0.3), rot_y(-1.1), rot_z(2.0), ypr_matrix(0.1, 0.2, 0.3)):
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


def test_positive_yaw_turns_view_right():
    fwd = ypr_matrix(0.2, 0.0, 0.0) @ np.array([0.0, 0.0, 1.0])
    assert fwd[0] > 0


def test_look_at_points_at_target_and_keeps_up():
    p = look_at([10.0, -40.0, 5.0], [0.0, 0.0, 0.0])
    fwd = -p.position / np.linalg.norm(p.position)
    assert np.allclose(p.forward, fwd, atol=1e-12)
    # camera -y (image up) has a positive world-z component
    assert -p.rotation[2, 1] > 0
    # the camera x axis stays horizontal
    assert abs(p.rotation[2, 0]) < 1e-12


def test_look_at_straight_down_falls_back():
    p = look_at([0.0, 0.0, 10.0], [0.0, 0.0, 0.0])
    assert np.allclose(p.forward, [0, 0, -1])


def test_look_at_degenerate():
    with pytest.raises(DegenerateAim):
        look_at([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


# --------------------------------------------------------------------------
# rays

def test_center_pixel_looks_down_principal_axis():
    r = pixel_ray(INTR, identity_pose((0, 0, -50)), (INTR.cx, INTR.cy), BIG_BOX)
    assert np.allclose(r.direction, [0.0, 0.0, 1.0], atol=1e-15)


def test_pixel_one_focal_right_is_45_degrees():
    intr = CameraIntrinsics(40.0, 40.0, 63.5, 35.5, 128, 72)
    r = pixel_ray(intr, identity_pose((0, 0, -50)), (intr.cx + intr.fx, intr.cy), BIG_BOX)
    assert np.allclose(r.direction, np.array([1.0, 0.0, 1.0]) / math.sqrt(2), atol=1e-15)


def test_pixel_ray_rejects_outside_pixels():
    with pytest.raises(GeometryError):
        pixel_ray(INTR, identity_pose(), (INTR.width, 0), BIG_BOX)


def test_ray_aimed_away_misses():
    unit = Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    with pytest.raises(NoIntersection):
        ray_from([2.0, 0.5, 0.5], [1.0, 0.0, 0.0], unit)


def test_ray_box_against_sampling_oracle(rng):
    box = Box((-1.0, -2.0, -0.5), (2.0, 1.0, 3.0))
    o = rng.uniform(-6, 6, (300, 3))
    d = rng.normal(size=(300, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tn, tf, hit = ray_box(o, d, box)
    t = np.linspace(0, 30, 30001)
    for i in range(len(o)):
        pts = o[i] + t[:, None] * d[i]
        inside = np.all((pts >= box.lo) & (pts <= box.hi), axis=1)
        assert hit[i] == inside.any()
        if hit[i]:
            assert t[inside].min() == pytest.approx(max(tn[i], 0.0), abs=2e-3)
            assert t[inside].max() == pytest.approx(tf[i], abs=2e-3)


def test_ray_from_inside_box_starts_at_floor():
    r = ray_from([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], BIG_BOX)
    assert r.t_near == pytest.approx(1e-4)


def test_ray_validation():
    from viewmt.geometry import Ray

    with pytest.raises(GeometryError):
        Ray(np.zeros(3), np.array([0.0, 0.0, 2.0]), 0.0, 1.0)
    with pytest.raises(GeometryError):
        Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 1.0)


def test_project_inverts_pixel_directions(rng):
    pose = look_at([5.0, -30.0, 3.0], [0.0, 0.0, 0.0])
    px = rng.uniform([0, 0], [INTR.width - 1, INTR.height - 1], (50, 2))
    d = pixel_directions(INTR, pose, px)
    pts = pose.position + d * rng.uniform(1, 50, (50, 1))
    uv, z = project(INTR, pose, pts)
    assert np.all(z > 0)
    assert np.allclose(uv, px, atol=1e-9)


def test_default_pixel_directions_are_row_major():
    intr = CameraIntrinsics(10.0, 10.0, 1.5, 0.5, 4, 2)
    d = pixel_directions(intr, identity_pose())
    explicit = pixel_directions(intr, identity_pose(), [[x, y] for y in range(2) for x in range(4)])
    assert np.array_equal(d, explicit)


# --------------------------------------------------------------------------
# transforms

def test_tau0_returns_identical_pose():
    pose = look_at([1.0, -30.0, 2.0], [0.0, 0.0, 0.0])
    out = apply_transform(pose, PoseTransform(TauKind.TAU0), np.zeros(3))
    assert out is pose


def test_tau0_must_be_identity():
    with pytest.raises(GeometryError):
        PoseTransform(TauKind.TAU0, dx=1.0)


def test_roll_pi_negates_image_axes():
    pose = look_at([1.0, -30.0, 2.0], [0.0, 0.0, 0.0])
    out = apply_transform(pose, PoseTransform(TauKind.TAU5, droll=math.pi))
    assert np.array_equal(out.position, pose.position)
    assert np.allclose(out.rotation[:, 0], -pose.rotation[:, 0], atol=1e-12)
    assert np.allclose(out.rotation[:, 1], -pose.rotation[:, 1], atol=1e-12)
    assert np.allclose(out.rotation[:, 2], pose.rotation[:, 2], atol=1e-12)


def test_reaim_keeps_target_on_principal_point():
    center = np.array([0.5, 0.2, -0.3])
    pose = look_at([1.0, -3.0, 0.5], center)
    out = apply_transform(pose, PoseTransform(TauKind.TAU1, dx=0.1, reaim=True), center)
    uv, z = project(INTR, out, center)
    assert z[0] > 0
    assert np.allclose(uv[0], [INTR.cx, INTR.cy], atol=1e-6 * INTR.fx)
    assert np.allclose(out.position, pose.position + 0.1 * pose.rotation[:, 0])


def test_translation_is_in_camera_axes():
    pose = look_at([0.0, -30.0, 0.0], [0.0, 0.0, 0.0])
    out = apply_transform(pose, PoseTransform(TauKind.TAU2, dy=2.0))
    # camera +y is world -z (image down)
    assert np.allclose(out.position, [0.0, -30.0, -2.0])


def test_reaim_without_target():
    with pytest.raises(DegenerateAim):
        apply_transform(identity_pose(), PoseTransform(TauKind.TAU1, dx=1.0, reaim=True))


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-3.2, 3.2),
       st.floats(-5, 5), st.floats(-5, 5))
def test_transforms_preserve_pose_invariants(yaw, pitch, roll, dx, dy):
    pose = look_at([3.0, -30.0, 1.0], [0.0, 0.0, 0.0])
    out = apply_transform(pose, PoseTransform(TauKind.TAU5, dx=dx, dy=dy, dyaw=yaw, dpitch=pitch, droll=roll))
    r = out.rotation
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


# --------------------------------------------------------------------------
# homography

def raycast_oracle(intr, pose_a, pose_b, plane, px):
    pts, t = raycast_plane(intr, pose_a, px, plane)
    assert np.all(t > 0)
    uv, z = project(intr, pose_b, pts)
    assert np.all(z > 0)
    return uv


def test_homography_same_pose_is_identity():
    pose = look_at([0.0, -40.0, 0.0], [0.0, 0.0, 0.0])
    assert np.allclose(plane_homography(INTR, pose, pose, WALL), np.eye(3), atol=1e-12)


def test_homography_translation_parallel_to_plane(rng):
    a = look_at([2.0, -40.0, 1.0], [0.0, 0.0, 0.0])
    b = CameraPose(a.position + np.array([3.0, 0.0, -2.0]), a.rotation)
    px = rng.uniform([0, 0], [INTR.width - 1, INTR.height - 1], (100, 2))
    h = plane_homography(INTR, a, b, WALL)
    assert h[2, 2] == 1.0
    assert np.max(np.abs(apply_homography(h, px) - raycast_oracle(INTR, a, b, WALL, px))) < 1e-6


def test_homography_five_degree_yaw(rng):
    a = look_at([-4.0, -35.0, 2.0], [0.0, 0.0, 0.0])
    b = CameraPose(a.position, a.rotation @ rot_y(math.radians(5.0)))
    px = rng.uniform([0, 0], [INTR.width - 1, INTR.height - 1], (100, 2))
    h = plane_homography(INTR, a, b, WALL)
    assert np.max(np.abs(apply_homography(h, px) - raycast_oracle(INTR, a, b, WALL, px))) < 1e-6


def test_homography_general_motion(rng):
    a = look_at([-4.0, -35.0, 2.0], [0.0, 0.0, 0.0])
    b = apply_transform(a, PoseTransform(TauKind.TAU6, dx=2.0, dy=3.0, dz=-4.0, droll=0.1, reaim=True),
                        np.zeros(3))
    px = rng.uniform([0, 0], [INTR.width - 1, INTR.height - 1], (100, 2))
    h = plane_homography(INTR, a, b, WALL)
    assert np.max(np.abs(apply_homography(h, px) - raycast_oracle(INTR, a, b, WALL, px))) < 1e-6


def test_homography_plane_behind_camera():
    a = look_at([0.0, -40.0, 0.0], [0.0, 0.0, 0.0])
    away = look_at([0.0, -40.0, 0.0], [0.0, -80.0, 0.0])
    with pytest.raises(PlaneBehindCamera):
        plane_homography(INTR, a, away, WALL)
    on_plane = look_at([0.0, 0.0, 0.0], [0.0, 10.0, 0.0])
    with pytest.raises(PlaneBehindCamera):
        plane_homography(INTR, on_plane, a, WALL)


def test_plane_normal_must_be_unit():
    with pytest.raises(GeometryError):
        PlaneModel((0.0, 2.0, 0.0), 1.0)


# --------------------------------------------------------------------------
# pose files

def test_pose_file_roundtrip(tmp_path):
    frames = [PoseFrame(f"{k:05d}", look_at([k - 2.0, -30.0, 0.3 * k], [0.0, 0.0, 0.0]), f"images/{k:05d}.ppm")
              for k in range(5)]
    PoseFile(INTR, frames).save(tmp_path / "poses.json")
    back = PoseFile.load(tmp_path / "poses.json")
    assert back.intrinsics == INTR
    for f, g in zip(frames, back.frames):
        assert f.id == g.id and f.image == g.image
        assert np.max(np.abs(f.pose.matrix() - g.pose.matrix())) <= 1e-12
