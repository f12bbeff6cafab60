# coding: utf-8
import math

import pytest
import torch

from bevprompt.errors import ConfigurationException
from bevprompt.geometry import Box2D, project_cuboid
from bevprompt.metrics import evaluate, map_coco_2d
from bevprompt.synth import (DetectorNoise, SceneConfig, Scene, derive_2d, gen_scene,
                             gen_scenes, occlusion_fraction, read_synth_dir,
                             render_toy_features, simulate_2d_detector, simulate_3d_detector,
                             tag_occlusion, write_synth_dir)

TINY = SceneConfig(seed=4, frames=3, objects_min=3, objects_max=6)


@pytest.fixture(scope='module')
def scenes():
    return gen_scenes(TINY)


def test_generation_is_deterministic(scenes):
    again = gen_scenes(TINY)
    for a, b in zip(scenes, again):
        assert a.calib == b.calib
        assert [c.to_dict() for c in a.cuboids] == [c.to_dict() for c in b.cuboids]
    other = gen_scene(TINY.replace(seed=5), 0)
    assert [c.to_dict() for c in other.cuboids] != [c.to_dict() for c in scenes[0].cuboids]


def test_scene_contents(scenes):
    for s in scenes:
        assert 1 <= len(s.cuboids) <= TINY.objects_max
        for c in s.cuboids:
            assert c.z == pytest.approx(c.h / 2.0)
            assert c.frame == s.frame
            assert 0.0 <= c.occlusion <= 1.0 and 0.0 <= c.truncation <= 1.0
            project_cuboid(s.calib, c)


def test_bad_scene_config():
    with pytest.raises(ConfigurationException):
        SceneConfig(objects_min=5, objects_max=2)
    with pytest.raises(ConfigurationException):
        SceneConfig(class_weights={'tram': 1.0})
    with pytest.raises(ConfigurationException):
        DetectorNoise(fn_rate=1.5)


def test_zero_noise_2d_detector(scenes):
    for s in scenes:
        dets = simulate_2d_detector(s, DetectorNoise(), seed=1)
        expected = derive_2d(s)
        assert [d.to_dict() for d in dets] == [b.replace(score=1.0).to_dict() for b in expected]


def test_missed_detections_leave_false_positives(scenes):
    s = scenes[0]
    assert simulate_2d_detector(s, DetectorNoise(fn_rate=1.0), seed=1) == []
    fps = simulate_2d_detector(s, DetectorNoise(fn_rate=1.0, fp_rate=1.0), seed=1)
    assert len(fps) == len(s.cuboids)
    assert all(d.score <= 0.6 and 20.0 <= d.width <= 200.0 for d in fps)


def test_noise_streams_are_independent(scenes):
    s = scenes[0]
    base = simulate_2d_detector(s, DetectorNoise(center_sigma=3.0), seed=2)
    confused = simulate_2d_detector(s, DetectorNoise(center_sigma=3.0, confusion_rate=0.5), seed=2)
    assert [(d.x_min, d.y_min) for d in base] == [(d.x_min, d.y_min) for d in confused]


def test_3d_detector(scenes):
    s = scenes[1]
    exact = simulate_3d_detector(s, DetectorNoise(), seed=0)
    assert [d.to_dict() for d in exact] == \
        [c.replace(score=1.0, occlusion=None, truncation=None).to_dict() for c in s.cuboids]
    turned = simulate_3d_detector(s, DetectorNoise(yaw_sigma=0.3), seed=0)
    for d, c in zip(turned, s.cuboids):
        assert (d.x, d.y) == (c.x, c.y)
        assert d.score < 1.0 or d.yaw == c.yaw


def test_depth_bias_moves_along_ray(scenes):
    s = scenes[0]
    shifted = simulate_3d_detector(s, DetectorNoise(depth_bias=2.0), seed=0)
    for d, c in zip(shifted, s.cuboids):
        assert math.hypot(d.x, d.y) == pytest.approx(math.hypot(c.x, c.y) + 2.0)


def test_toy_features_of_empty_scene(calib):
    feat = render_toy_features([], calib, grid=(8, 16), channels=8)
    assert feat.I.shape == (128, 8)
    assert feat.I.dtype == torch.float64
    assert float(feat.I[:, :5].abs().max()) == 0.0
    assert float(feat.I[:, 5:].abs().max()) > 0.0


def test_toy_features_single_object(calib, car):
    feat = render_toy_features([car], calib, grid=(8, 16), channels=5)
    box = project_cuboid(calib, car)
    cw, ch = calib.image_width / 16, calib.image_height / 8
    for k in range(128):
        r, q = divmod(k, 16)
        cell = Box2D(q * cw, r * ch, (q + 1) * cw, (r + 1) * ch)
        ox = max(0.0, min(box.x_max, cell.x_max) - max(box.x_min, cell.x_min))
        oy = max(0.0, min(box.y_max, cell.y_max) - max(box.y_min, cell.y_min))
        assert float(feat.I[k, 0]) == pytest.approx(ox * oy / (cw * ch), abs=1e-12)
        if ox * oy > 0:
            assert feat.I[k, 2:5].tolist() == [1.0, 0.0, 0.0]


def test_toy_features_bad_grid(calib):
    with pytest.raises(ConfigurationException):
        render_toy_features([], calib, grid=(7, 16))
    with pytest.raises(ConfigurationException):
        render_toy_features([], calib, channels=4)


def test_occlusion_tags(calib, car):
    box = Box2D(0, 0, 10, 10)
    assert occlusion_fraction(box, [], 16) == 0.0
    assert occlusion_fraction(box, [Box2D(0, 0, 5, 10)], 16) == 0.5
    behind = car.replace(x=car.x + 6.0)
    front, back = tag_occlusion(calib, [car, behind])
    assert front.occlusion == 0.0
    assert back.occlusion > 0.0
    twin, rear = tag_occlusion(calib, [car, car.replace(l=4.4)])
    assert rear.occlusion == pytest.approx(1.0) or twin.occlusion == pytest.approx(1.0)


def test_zero_noise_evaluates_perfectly(scenes):
    dets3d = [d for s in scenes for d in simulate_3d_detector(s, DetectorNoise(), seed=0)]
    gts = [c for s in scenes for c in s.cuboids]
    report = evaluate(dets3d, gts)
    assert all(ap == 1.0 for ap in report.ap_table().values() if ap is not None)
    dets2d = [d for s in scenes for d in simulate_2d_detector(s, DetectorNoise(), seed=0)]
    assert map_coco_2d(dets2d, [b for s in scenes for b in derive_2d(s)]) == pytest.approx(1.0)


def test_synth_dir_round_trip(scenes, tmp_path):
    dets2d = [d for s in scenes for d in simulate_2d_detector(s, DetectorNoise(fp_rate=0.5), 0)]
    write_synth_dir(str(tmp_path), scenes, dets2d=dets2d)
    loaded, by_frame = read_synth_dir(str(tmp_path))
    assert [s.frame for s in loaded] == [s.frame for s in scenes]
    for a, b in zip(loaded, scenes):
        assert a.calib == b.calib
        assert [c.to_dict() for c in a.cuboids] == [c.to_dict() for c in b.cuboids]
    assert sum(len(v) for v in by_frame.values()) == len(dets2d)
    assert isinstance(loaded[0], Scene)
