# coding: utf-8
"""
Synthetic roadside scenes, simulated noisy 2D/3D detectors and a toy image
feature renderer.

Every output is a pure function of (config, seed, frame index). Random
numbers come from independent streams per purpose, so changing one noise
dial never perturbs another stream.
"""

import logging
import math
import os

import numpy as np
import torch
from tqdm import tqdm

from bevprompt.errors import ConfigurationException, GeometryException, GenerationException
from bevprompt.data import (CalibrationSet, group_by_frame, read_boxes, read_calibs,
                            read_cuboids, write_boxes, write_calibs, write_cuboids)
from bevprompt.fusion import ImageFeature
from bevprompt.geometry import (Box2D, CameraCalib, Cuboid3D, camera_depth, cuboid_to_bev,
                                iou_rotated, project_cuboid)
from bevprompt.grouping import FINE_CLASSES, builtin_grouping
from bevprompt.numerics import DTYPE
from bevprompt.rotations import camera_rotation
from bevprompt.utils import Config

PLACEMENT, NOISE_2D, NOISE_3D, FEATURES = 0, 1, 2, 3

# mean (w, h, l) per fine class, meters
CLASS_SIZES = {
    'car': [1.8, 1.5, 4.5],
    'van': [1.9, 2.0, 5.0],
    'truck': [2.5, 3.2, 9.0],
    'bus': [2.6, 3.2, 11.0],
    'bicyclist': [0.6, 1.7, 1.7],
    'tricyclist': [1.2, 1.6, 2.5],
    'motorcyclist': [0.7, 1.6, 1.9],
    'barrowlist': [1.0, 1.4, 1.8],
    'pedestrian': [0.6, 1.7, 0.6],
}

INVERSE_DEPTH_SCALE = 10.0
CLASS_MIX_CHANNELS = ['vehicle', 'cyclist', 'pedestrian']


def rng_for(seed, frame, purpose):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(frame), int(purpose)]))


class SceneConfig(Config):
    defaults = {
        'seed': 0,
        'frames': 10,
        'objects_min': 5,
        'objects_max': 20,
        'image_width': 1536,
        'image_height': 864,
        'focal': 1400.0,
        'camera_height': [6.0, 8.0],
        'camera_pitch': [math.radians(10.0), math.radians(14.0)],
        'lanes': [-7.0, -3.5, 0.0, 3.5, 7.0],
        'lane_jitter': 0.3,
        'heading_jitter': 0.05,
        'x_range': [15.0, 80.0],
        'sidewalk': [-11.0, 11.0],
        'class_weights': {'car': 6.0, 'van': 2.0, 'truck': 1.0, 'bus': 1.0,
                          'bicyclist': 1.0, 'tricyclist': 0.5, 'motorcyclist': 1.0,
                          'barrowlist': 0.5, 'pedestrian': 2.0},
        'size_sigma': 0.05,
        'occlusion_samples': 16,
        'max_attempts': 1000,
    }

    def validate(self):
        if not 1 <= self.objects_min <= self.objects_max:
            raise ConfigurationException('need 1 <= objects_min <= objects_max')
        for key in ('camera_height', 'camera_pitch', 'x_range', 'sidewalk'):
            lo, hi = getattr(self, key)
            if not lo < hi:
                raise ConfigurationException('{:s} must be a non-degenerate range'.format(key))
        if self.frames < 1 or self.focal <= 0 or self.size_sigma < 0:
            raise ConfigurationException('frames and focal must be positive, size_sigma >= 0')
        if set(self.class_weights) - set(CLASS_SIZES) or sum(self.class_weights.values()) <= 0:
            raise ConfigurationException('class_weights must name known classes with positive total')


class DetectorNoise(Config):
    defaults = {
        # 2D detector
        'center_sigma': 0.0,
        'size_sigma': 0.0,
        'fn_rate': 0.0,
        'fp_rate': 0.0,
        'confusion_rate': 0.0,
        'score_scale': 10.0,
        'fp_score_max': 0.6,
        # 3D detector
        'position_sigma': 0.0,
        'yaw_sigma': 0.0,
        'size3d_sigma': 0.0,
        'depth_bias': 0.0,
    }

    def validate(self):
        for key in ('fn_rate', 'fp_rate', 'confusion_rate', 'fp_score_max'):
            if not 0 <= getattr(self, key) <= 1:
                raise ConfigurationException('{:s} must lie in [0, 1]'.format(key))
        for key in ('center_sigma', 'size_sigma', 'position_sigma', 'yaw_sigma', 'size3d_sigma'):
            if getattr(self, key) < 0:
                raise ConfigurationException('{:s} must be non-negative'.format(key))
        if self.score_scale <= 0:
            raise ConfigurationException('score_scale must be positive')


class Scene:
    """One synthetic frame; unpacks as (calib, cuboids)."""

    def __init__(self, frame, calib, cuboids):
        self.frame = frame
        self.calib = calib
        self.cuboids = cuboids

    def __iter__(self):
        return iter((self.calib, self.cuboids))


def make_calib(cfg, height, pitch):
    R = camera_rotation(pitch)
    center = np.array([0.0, 0.0, height])
    return CameraCalib(cfg.focal, cfg.focal, cfg.image_width / 2.0, cfg.image_height / 2.0,
                       R, -R @ center, cfg.image_width, cfg.image_height)


def _sample_object(cfg, rng, classes, probs, frame):
    label = classes[rng.choice(len(classes), p=probs)]
    mean = np.array(CLASS_SIZES[label])
    w, h, l = np.maximum(mean * (1.0 + cfg.size_sigma * rng.standard_normal(3)), 0.5 * mean)
    x = rng.uniform(*cfg.x_range)
    if label == 'pedestrian':
        y = rng.uniform(*cfg.sidewalk)
        yaw = rng.uniform(-math.pi, math.pi)
    else:
        lane = cfg.lanes[rng.integers(len(cfg.lanes))]
        y = lane + cfg.lane_jitter * rng.standard_normal()
        heading = 0.0 if lane <= 0 else math.pi
        yaw = heading + cfg.heading_jitter * rng.standard_normal()
    return Cuboid3D(x, y, h / 2.0, w, h, l, yaw, label, 1.0, frame)


def occlusion_fraction(box, nearer_boxes, samples):
    """Fraction of a regular sample grid over `box` covered by any of `nearer_boxes`."""
    if not nearer_boxes:
        return 0.0
    t = (np.arange(samples) + 0.5) / samples
    us = box.x_min + t * box.width
    vs = box.y_min + t * box.height
    U, V = np.meshgrid(us, vs)
    covered = np.zeros(U.shape, dtype=bool)
    for b in nearer_boxes:
        covered |= (U >= b.x_min) & (U <= b.x_max) & (V >= b.y_min) & (V <= b.y_max)
    return float(covered.mean())


def truncation_fraction(calib, c):
    full = project_cuboid(calib, c, clip=False)
    clipped = project_cuboid(calib, c, clip=True)
    return float(min(max(1.0 - clipped.area / full.area, 0.0), 1.0))


def tag_occlusion(calib, cuboids, samples=16):
    """Cuboids with occlusion and truncation tags from their projected boxes."""
    boxes = [project_cuboid(calib, c) for c in cuboids]
    depths = [camera_depth(calib, c.center) for c in cuboids]
    tagged = []
    for i, c in enumerate(cuboids):
        nearer = [boxes[j] for j in range(len(cuboids))
                  if j != i and (depths[j], j) < (depths[i], i)]
        tagged.append(c.replace(occlusion=occlusion_fraction(boxes[i], nearer, samples),
                                truncation=truncation_fraction(calib, c)))
    return tagged


def gen_scene(cfg, frame_index):
    """
    Camera and ground-truth cuboids of one frame.

    Raises:
        GenerationException: not a single object could be placed.
    """
    rng = rng_for(cfg.seed, frame_index, PLACEMENT)
    calib = make_calib(cfg, rng.uniform(*cfg.camera_height), rng.uniform(*cfg.camera_pitch))
    n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))

    classes = sorted(cfg.class_weights)
    weights = np.array([cfg.class_weights[k] for k in classes], dtype=np.float64)
    probs = weights / weights.sum()

    placed, attempts = [], 0
    while len(placed) < n and attempts < cfg.max_attempts:
        attempts += 1
        c = _sample_object(cfg, rng, classes, probs, frame_index)
        footprint = cuboid_to_bev(c)
        if any(iou_rotated(footprint, cuboid_to_bev(p)) > 0 for p in placed):
            continue
        try:
            project_cuboid(calib, c)
        except GeometryException:
            continue
        placed.append(c)

    if not placed:
        raise GenerationException('frame {:d}: no object placed after {:d} attempts'.format(
            frame_index, attempts))
    if len(placed) < n:
        logging.warning('frame %d: placed %d of %d objects', frame_index, len(placed), n)
    return Scene(frame_index, calib, tag_occlusion(calib, placed, cfg.occlusion_samples))


def gen_scenes(cfg, progress=False):
    return [gen_scene(cfg, i) for i in tqdm(range(cfg.frames), ncols=100, disable=not progress)]


def simulate_2d_detector(scene, noise, seed):
    """
    Projected ground truth with center/size jitter, misses, label confusion
    and uniformly placed false positives. True-positive scores decay with the
    jitter magnitude; zero noise yields the projected boxes with score 1.
    """
    calib, cuboids = scene
    rng = rng_for(seed, scene.frame, NOISE_2D)
    W, H = calib.image_width, calib.image_height
    dets = []
    for c in cuboids:
        u_miss, u_confuse = rng.random(2)
        jitter = rng.standard_normal(4)
        other = FINE_CLASSES[rng.integers(len(FINE_CLASSES))]
        if u_miss < noise.fn_rate:
            continue
        box = project_cuboid(calib, c)
        dx, dy = noise.center_sigma * jitter[:2]
        dw, dh = noise.size_sigma * jitter[2:]
        cx, cy = box.center
        cx, cy = cx + dx, cy + dy
        bw, bh = max(box.width + dw, 1.0), max(box.height + dh, 1.0)
        x_min, x_max = max(cx - bw / 2.0, 0.0), min(cx + bw / 2.0, float(W))
        y_min, y_max = max(cy - bh / 2.0, 0.0), min(cy + bh / 2.0, float(H))
        if not (x_min < x_max and y_min < y_max):
            continue
        if noise.center_sigma == 0 and noise.size_sigma == 0:
            x_min, y_min, x_max, y_max = box.x_min, box.y_min, box.x_max, box.y_max
        label = other if (u_confuse < noise.confusion_rate and other != c.label) else c.label
        score = math.exp(-math.sqrt(dx * dx + dy * dy + dw * dw + dh * dh) / noise.score_scale)
        dets.append(Box2D(x_min, y_min, x_max, y_max, label, score, scene.frame))

    for _ in range(rng.binomial(len(cuboids), noise.fp_rate)):
        bw, bh = rng.uniform(20.0, 200.0, size=2)
        x0, y0 = rng.uniform(0.0, W - bw), rng.uniform(0.0, H - bh)
        label = FINE_CLASSES[rng.integers(len(FINE_CLASSES))]
        dets.append(Box2D(x0, y0, x0 + bw, y0 + bh, label,
                          noise.fp_score_max * rng.random(), scene.frame))
    return dets


def simulate_3d_detector(scene, noise, seed):
    """Ground truth with position, yaw, size noise and a depth bias along the viewing ray."""
    calib, cuboids = scene
    rng = rng_for(seed, scene.frame, NOISE_3D)
    cam = calib.camera_center
    dets = []
    for c in cuboids:
        dxy = noise.position_sigma * rng.standard_normal(2)
        dyaw = noise.yaw_sigma * rng.standard_normal()
        dsize = noise.size3d_sigma * rng.standard_normal(3)
        x, y = c.x + dxy[0], c.y + dxy[1]
        if noise.depth_bias != 0:
            ray = np.array([c.x - cam[0], c.y - cam[1]])
            ray /= np.linalg.norm(ray)
            x, y = x + noise.depth_bias * ray[0], y + noise.depth_bias * ray[1]
        w, h, l = np.array([c.w, c.h, c.l]) * np.exp(dsize)
        err = math.hypot(dxy[0], dxy[1]) + abs(dyaw) + float(np.abs(dsize).sum())
        dets.append(Cuboid3D(x, y, h / 2.0, w, h, l, c.yaw + dyaw, c.label,
                             math.exp(-err), scene.frame))
    return dets


def derive_2d(scene):
    """Projected ground-truth boxes (clipped), labels copied."""
    calib, cuboids = scene
    return [project_cuboid(calib, c) for c in cuboids]


def _positional(rows, cols, channels):
    r = (np.arange(rows) + 0.5) / rows
    q = (np.arange(cols) + 0.5) / cols
    R, Q = np.meshgrid(r, q, indexing='ij')
    out = np.zeros((rows * cols, channels))
    for k in range(channels):
        freq = math.pi * (2 ** (k // 4))
        coord = R if (k // 2) % 2 == 0 else Q
        out[:, k] = (np.sin if k % 2 == 0 else np.cos)(freq * coord).reshape(-1)
    return out


def render_toy_features(scene, calib=None, grid=(8, 16), channels=16):
    """
    Toy image features on a rows x cols grid.

    Channels: 0 coverage (sum of exact overlap fractions of projected boxes
    with the cell, capped at 1); 1 coverage-weighted mean inverse depth;
    2-4 coverage-weighted vehicle/cyclist/pedestrian mix; the rest fixed
    sinusoidal positional channels.

    Returns:
        ImageFeature: (rows * cols, channels) float64 features.
    """
    cuboids = scene.cuboids if isinstance(scene, Scene) else scene
    calib = calib if calib is not None else scene.calib
    rows, cols = grid
    W, H = calib.image_width, calib.image_height
    if W % cols or H % rows:
        raise ConfigurationException('grid {!r} does not divide the {:d}x{:d} image'.format(
            tuple(grid), W, H))
    if channels < 5:
        raise ConfigurationException('toy features need at least 5 channels')
    grouping = builtin_grouping('functionality')

    cw, ch = W / cols, H / rows
    x_lo, y_lo = np.arange(cols) * cw, np.arange(rows) * ch
    coverage = np.zeros((rows, cols))
    inv_depth = np.zeros((rows, cols))
    mix = np.zeros((3, rows, cols))
    for c in cuboids:
        try:
            box = project_cuboid(calib, c)
        except GeometryException:
            continue
        ox = np.clip(np.minimum(box.x_max, x_lo + cw) - np.maximum(box.x_min, x_lo), 0.0, None)
        oy = np.clip(np.minimum(box.y_max, y_lo + ch) - np.maximum(box.y_min, y_lo), 0.0, None)
        frac = np.outer(oy, ox) / (cw * ch)
        coverage += frac
        inv_depth += frac * (INVERSE_DEPTH_SCALE / camera_depth(calib, c.center))
        mix[CLASS_MIX_CHANNELS.index(grouping.superclass(c.label))] += frac

    feats = np.zeros((rows * cols, channels))
    safe = np.where(coverage > 0, coverage, 1.0)
    feats[:, 0] = np.minimum(coverage, 1.0).reshape(-1)
    feats[:, 1] = (inv_depth / safe).reshape(-1)
    feats[:, 2:5] = (mix / safe).reshape(3, -1).T
    if channels > 5:
        feats[:, 5:] = _positional(rows, cols, channels - 5)
    return ImageFeature(torch.as_tensor(feats, dtype=DTYPE), (rows, cols))


CALIB_FILE = 'calib.json'
GT_FILE = 'gt.jsonl'
DET2D_FILE = 'det2d.jsonl'
DET3D_FILE = 'det3d.jsonl'
GT2D_FILE = 'gt2d.jsonl'


def write_synth_dir(path, scenes, dets2d=None, dets3d=None):
    """Calibrations, ground truth and (optionally) detections of `scenes` as JSON files in `path`."""
    os.makedirs(path, exist_ok=True)
    write_calibs(os.path.join(path, CALIB_FILE),
                 CalibrationSet(frames={s.frame: s.calib for s in scenes}))
    write_cuboids(os.path.join(path, GT_FILE), [c for s in scenes for c in s.cuboids])
    if dets2d is not None:
        write_boxes(os.path.join(path, DET2D_FILE), dets2d)
    if dets3d is not None:
        write_cuboids(os.path.join(path, DET3D_FILE), dets3d)


def read_synth_dir(path):
    """
    Returns:
        tuple: scenes ordered by frame and the 2D detections by frame (empty
            if the directory holds none).
    """
    calibs = read_calibs(os.path.join(path, CALIB_FILE))
    gts = group_by_frame(read_cuboids(os.path.join(path, GT_FILE)))
    frames = sorted(set(calibs.frames) | set(gts))
    scenes = [Scene(f, calibs[f], gts.get(f, [])) for f in frames]
    det_path = os.path.join(path, DET2D_FILE)
    dets2d = group_by_frame(read_boxes(det_path)) if os.path.exists(det_path) else {}
    return scenes, dets2d
