# coding: utf-8
import math

import numpy as np
import pytest

from bevprompt.errors import BehindCameraException, DataException, OffImageException
from bevprompt.geometry import (Box2D, CameraCalib, Cuboid3D, RotatedBoxBEV, back_project,
                                box_from_center, camera_depth, cuboid_corners, cuboid_to_bev,
                                iou_aabb, iou_rotated, perturb_calib, polygon_area, polygon_clip,
                                project_cuboid, project_point)
from bevprompt.rotations import normalize_angle, rand_rotation_matrix

from conftest import roadside_calib

OCTAGON_AREA = 2.0 * (math.sqrt(2.0) - 1.0)


def test_optical_axis_projects_to_principal_point(calib):
    pitch = math.radians(12.0)
    p = np.array([0.0, 0.0, 7.0]) + 10.0 * np.array([math.cos(pitch), 0.0, -math.sin(pitch)])
    uv, depth = project_point(calib, p)
    assert np.allclose(uv, [calib.cx, calib.cy], atol=1e-9)
    assert depth == pytest.approx(10.0, abs=1e-12)


def test_back_project_inverts_project(calib):
    rng = np.random.RandomState(3)
    for _ in range(20):
        p = np.array([rng.uniform(10, 80), rng.uniform(-10, 10), rng.uniform(0, 3)])
        uv, depth = project_point(calib, p)
        assert np.allclose(back_project(calib, uv, depth), p, atol=1e-9)


def test_point_behind_camera(calib):
    with pytest.raises(BehindCameraException):
        project_point(calib, np.array([-20.0, 0.0, 0.0]))


def test_project_cuboid_copies_label_and_score(calib, car):
    box = project_cuboid(calib, car)
    assert (box.label, box.score, box.frame) == ('car', 0.9, 0)
    assert box.is_inside(calib.image_width, calib.image_height)
    u_center, _ = project_point(calib, car.center)[0]
    assert box.x_min < u_center < box.x_max


def test_project_cuboid_off_image_and_behind(calib, car):
    with pytest.raises(OffImageException):
        project_cuboid(calib, car.replace(y=200.0))
    with pytest.raises(BehindCameraException):
        project_cuboid(calib, car.replace(x=-30.0))


def test_project_cuboid_clipping(calib, car):
    edge = car.replace(y=-9.0, x=16.0)
    full = project_cuboid(calib, edge, clip=False)
    clipped = project_cuboid(calib, edge)
    assert full.x_max > calib.image_width
    assert clipped.x_max == calib.image_width
    assert clipped.area < full.area


def test_cuboid_corners_bottom_on_ground(car):
    corners = cuboid_corners(car)
    assert corners.shape == (8, 3)
    assert np.allclose(corners[:4, 2], 0.0)
    assert np.allclose(corners[4:, 2], car.h)
    assert np.allclose(corners.mean(axis=0), car.center)


def test_cuboid_validation_and_yaw_normalization():
    with pytest.raises(DataException):
        Cuboid3D(0, 0, 0, 0.0, 1, 1, 0, 'car')
    c = Cuboid3D(0, 0, 0, 1, 1, 1, 3 * math.pi, 'car')
    assert c.yaw == pytest.approx(math.pi)
    assert Cuboid3D(0, 0, 0, 1, 1, 1, -math.pi, 'car').yaw == pytest.approx(math.pi)
    assert normalize_angle(-math.pi) == pytest.approx(math.pi)


def test_cuboid_dict_round_trip(car):
    tagged = car.replace(occlusion=0.25, truncation=0.0, frame=3)
    again = Cuboid3D.from_dict(tagged.to_dict())
    assert again.to_dict() == tagged.to_dict()


def test_box_forms(unit_box):
    assert Box2D.from_xywh(1, 2, 3, 4).to_xywh() == (1.0, 2.0, 3.0, 4.0)
    b = box_from_center(5.0, 5.0, 10.0, 10.0)
    assert b.corners().tolist() == unit_box.corners().tolist()
    with pytest.raises(DataException):
        Box2D(1, 1, 1, 2)


def test_iou_aabb(unit_box):
    assert iou_aabb(unit_box, unit_box) == 1.0
    assert iou_aabb(unit_box, Box2D(0, 0, 10, 6)) == pytest.approx(0.6)
    assert iou_aabb(unit_box, Box2D(10, 0, 20, 10)) == 0.0
    assert iou_aabb(unit_box, Box2D(5, 0, 15, 10)) == pytest.approx(1.0 / 3.0)


def test_polygon_area_and_clip():
    square = RotatedBoxBEV(0, 0, 2, 2, 0).corners()
    assert polygon_area(square) == pytest.approx(4.0)
    assert polygon_clip(square, RotatedBoxBEV(10, 10, 1, 1, 0).corners()) is None
    inter = polygon_clip(square, RotatedBoxBEV(1, 1, 2, 2, 0).corners())
    assert polygon_area(inter) == pytest.approx(1.0)


def test_rotated_square_octagon():
    a = RotatedBoxBEV(0, 0, 1, 1, 0)
    b = RotatedBoxBEV(0, 0, 1, 1, math.pi / 4)
    inter = polygon_area(polygon_clip(a.corners(), b.corners()))
    assert abs(inter - OCTAGON_AREA) < 1e-9
    assert abs(iou_rotated(a, b) - OCTAGON_AREA / (2.0 - OCTAGON_AREA)) < 1e-9
    assert abs(iou_rotated(a, b) - math.sqrt(0.5)) < 1e-9


def test_iou_rotated_basic_cases():
    a = RotatedBoxBEV(1.0, 2.0, 1.8, 4.5, 0.3)
    assert iou_rotated(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_rotated(a, RotatedBoxBEV(50, 50, 1, 1, 0)) == 0.0
    # touching edges have no area in common
    assert iou_rotated(RotatedBoxBEV(0, 0, 1, 1, 0), RotatedBoxBEV(1, 0, 1, 1, 0)) == 0.0
    # a box and its 180 degree turn are the same footprint
    assert iou_rotated(a, RotatedBoxBEV(1.0, 2.0, 1.8, 4.5, 0.3 + math.pi)) == pytest.approx(1.0)


def test_iou_rotated_symmetric_bitwise():
    rng = np.random.RandomState(11)
    for _ in range(200):
        a = RotatedBoxBEV(*rng.uniform(-2, 2, 2), *rng.uniform(0.5, 4, 2), rng.uniform(-math.pi, math.pi))
        b = RotatedBoxBEV(*rng.uniform(-2, 2, 2), *rng.uniform(0.5, 4, 2), rng.uniform(-math.pi, math.pi))
        assert iou_rotated(a, b) == iou_rotated(b, a)
        assert 0.0 <= iou_rotated(a, b) <= 1.0


def _raster_iou(a, b, n=1000):
    """IoU from an n x n grid of sample points over the joint bounding square."""
    pts = np.vstack([a.corners(), b.corners()])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    t = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(lo[0] + t * (hi[0] - lo[0]), lo[1] + t * (hi[1] - lo[1]))

    def inside(box):
        dx, dy = X - box.cx, Y - box.cy
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        along, across = dx * c + dy * s, -dx * s + dy * c
        return (np.abs(along) <= box.l / 2) & (np.abs(across) <= box.w / 2)

    ia, ib = inside(a), inside(b)
    union = (ia | ib).sum()
    return (ia & ib).sum() / union if union else 0.0


@pytest.mark.slow
def test_iou_rotated_against_rasterization():
    rng = np.random.RandomState(5)
    worst = 0.0
    for _ in range(500):
        a = RotatedBoxBEV(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 3, 2), rng.uniform(-math.pi, math.pi))
        b = RotatedBoxBEV(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 3, 2), rng.uniform(-math.pi, math.pi))
        worst = max(worst, abs(iou_rotated(a, b) - _raster_iou(a, b)))
    assert worst <= 2e-3


def test_cuboid_to_bev(car):
    bev = cuboid_to_bev(car)
    assert (bev.cx, bev.cy, bev.w, bev.l, bev.yaw) == (car.x, car.y, car.w, car.l, car.yaw)


def test_calib_validation(calib):
    with pytest.raises(DataException):
        calib.replace(rotation=[1, 0, 0, 0, 1, 0, 0, 0, 2])
    with pytest.raises(DataException):
        calib.replace(cx=-5.0)
    assert CameraCalib.from_dict(calib.to_dict()) == calib
    assert np.allclose(calib.camera_center, [0.0, 0.0, 7.0])


def test_perturb_calib(calib, car):
    assert perturb_calib(calib, 0.0, 0.0, seed=1) == calib
    noisy = perturb_calib(calib, 0.02, 0.02, seed=1)
    assert noisy == perturb_calib(calib, 0.02, 0.02, seed=1)
    assert noisy != calib
    assert np.allclose(noisy.camera_center, calib.camera_center, atol=1e-9)
    with pytest.raises(DataException):
        perturb_calib(calib, -0.1, 0.0, seed=0)


def test_random_extrinsics_keep_depth_consistent():
    rng = np.random.RandomState(2)
    R = rand_rotation_matrix(rng)
    base = roadside_calib()
    cam = base.replace(rotation=R.reshape(-1).tolist(), translation=[0.0, 0.0, 0.0])
    p = R.T @ np.array([0.3, -0.2, 5.0])
    assert camera_depth(cam, p) == pytest.approx(5.0)
    uv, _ = project_point(cam, p)
    assert np.allclose(back_project(cam, uv, 5.0), p, atol=1e-9)
