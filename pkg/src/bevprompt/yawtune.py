# coding: utf-8
"""
Post-hoc yaw refinement: rotate a 3D detection about its vertical axis so
that its projected 2D box best overlaps the matched 2D detection.

The search is a coarse grid centered on the initial yaw followed by a
golden-section refinement around the best grid point. The initial yaw is
always a grid candidate, so tuning never lowers the projected IoU.
"""

import logging
import math

import numpy as np
from tqdm import tqdm

from bevprompt.data import group_by_frame
from bevprompt.errors import ConfigurationException, GeometryException
from bevprompt.geometry import iou_aabb, perturb_calib, project_cuboid
from bevprompt.grouping import load_grouping
from bevprompt.metrics import EvalConfig, evaluate_3d, mean_defined
from bevprompt.rotations import angle_diff
from bevprompt.utils import Config

INV_PHI = (math.sqrt(5) - 1) / 2
INV_PHI_SQUARE = (3 - math.sqrt(5)) / 2
TIE_TOLERANCE = 1e-12


class YawTuneConfig(Config):
    defaults = {
        'search_half_range': math.pi / 2,
        'coarse_step': math.pi / 180,
        'refine_iterations': 20,
        'min_match_iou': 0.3,
        'score_threshold': 0.3,
        'grouping': 'functionality',
        # superclasses to tune, None for all
        'classes': ['vehicle'],
    }

    def validate(self):
        if not 0 < self.search_half_range <= math.pi:
            raise ConfigurationException('search_half_range must lie in (0, pi]')
        if not self.coarse_step > 0:
            raise ConfigurationException('coarse_step must be positive')
        if self.refine_iterations < 0:
            raise ConfigurationException('refine_iterations must be non-negative')
        if not 0 <= self.min_match_iou <= 1:
            raise ConfigurationException('min_match_iou must lie in [0, 1]')


def projected_iou(calib, c, box, yaw=None):
    """IoU of the projection of `c` (optionally rotated to `yaw`) with `box`; 0 off-image."""
    if yaw is not None:
        c = c.replace(yaw=yaw)
    try:
        return iou_aabb(project_cuboid(calib, c), box)
    except GeometryException:
        return 0.0


def match_3d_to_2d(cuboids, boxes, calib, cfg=None, grouping=None):
    """
    Greedy one-to-one pairing by descending projected IoU, within the same
    superclass. Pairs below `min_match_iou` stay unmatched.

    Returns:
        list(tuple): (cuboid index, box index, IoU), in selection order.
    """
    cfg = cfg if cfg is not None else YawTuneConfig()
    grouping = grouping if grouping is not None else load_grouping(cfg.grouping)

    candidates = []
    for i, c in enumerate(cuboids):
        try:
            projected = project_cuboid(calib, c)
        except GeometryException:
            continue
        for j, b in enumerate(boxes):
            if grouping.superclass(c.label) != grouping.superclass(b.label):
                continue
            iou = iou_aabb(projected, b)
            if iou >= cfg.min_match_iou and iou > 0:
                candidates.append((iou, i, j))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))

    used_c, used_b, pairs = set(), set(), []
    for iou, i, j in candidates:
        if i in used_c or j in used_b:
            continue
        used_c.add(i)
        used_b.add(j)
        pairs.append((i, j, iou))
    return pairs


def golden_section_max(f, a, b, iterations):
    """
    Golden-section search for a maximum of `f` on [a, b].

    Returns:
        tuple: (best argument, best value) over all evaluated points.
    """
    h = b - a
    c = a + INV_PHI_SQUARE * h
    d = a + INV_PHI * h
    fc, fd = f(c), f(d)
    best = max([(fc, c), (fd, d)], key=lambda t: t[0])
    for _ in range(iterations):
        if fc > fd:
            b, d, fd = d, c, fc
            h = INV_PHI * h
            c = a + INV_PHI_SQUARE * h
            fc = f(c)
            if fc > best[0]:
                best = (fc, c)
        else:
            a, c, fc = c, d, fd
            h = INV_PHI * h
            d = a + INV_PHI * h
            fd = f(d)
            if fd > best[0]:
                best = (fd, d)
    return best[1], best[0]


def yaw_grid(yaw0, cfg):
    n = int(math.floor(cfg.search_half_range / cfg.coarse_step + 1e-9))
    offsets = np.arange(-n, n + 1) * cfg.coarse_step
    return yaw0 + offsets, offsets


def tune_yaw(c, box, calib, cfg=None):
    """
    Maximize f(theta) = iou_aabb(project_cuboid(calib, c with yaw=theta), box).

    Ties, within 1e-12, go to the candidate closest to the initial yaw.

    Returns:
        tuple: (tuned yaw in (-pi, pi], its projected IoU)

    Raises:
        BehindCameraException: the cuboid is behind the camera.
    """
    cfg = cfg if cfg is not None else YawTuneConfig()
    yaw0 = c.yaw
    project_cuboid(calib, c, clip=False)

    def f(theta):
        return projected_iou(calib, c, box, theta)

    thetas, offsets = yaw_grid(yaw0, cfg)
    values = np.array([f(t) for t in thetas])
    top = values.max()
    ties = np.flatnonzero(values >= top - TIE_TOLERANCE)
    k = min(ties, key=lambda i: (abs(offsets[i]), offsets[i]))
    best_theta, best_value = thetas[k], values[k]

    if cfg.refine_iterations > 0 and best_value > 0:
        lo = max(best_theta - cfg.coarse_step, yaw0 - cfg.search_half_range)
        hi = min(best_theta + cfg.coarse_step, yaw0 + cfg.search_half_range)
        theta, value = golden_section_max(f, lo, hi, cfg.refine_iterations)
        if value > best_value:
            best_theta, best_value = theta, value

    if best_value == 0.0:
        return yaw0, 0.0
    return c.replace(yaw=best_theta).yaw, float(best_value)


def tune_frame(cuboids, boxes, calib, cfg=None, grouping=None, report=None):
    """
    Match and tune one frame.

    Cuboids below the score threshold, outside the tuned superclasses or
    without a match pass through unchanged. Output order follows the input.
    When `report` is a list, one entry per tuned pair is appended to it.
    """
    cfg = cfg if cfg is not None else YawTuneConfig()
    grouping = grouping if grouping is not None else load_grouping(cfg.grouping)
    refined = list(cuboids)

    keep_c = [i for i, c in enumerate(cuboids)
              if c.score >= cfg.score_threshold
              and (cfg.classes is None or grouping.superclass(c.label) in cfg.classes)]
    keep_b = [j for j, b in enumerate(boxes) if b.score >= cfg.score_threshold]
    pairs = match_3d_to_2d([cuboids[i] for i in keep_c], [boxes[j] for j in keep_b],
                           calib, cfg, grouping)

    for ci, bj, match_iou in pairs:
        i, j = keep_c[ci], keep_b[bj]
        c = cuboids[i]
        before = projected_iou(calib, c, boxes[j])
        yaw, after = tune_yaw(c, boxes[j], calib, cfg)
        refined[i] = c.replace(yaw=yaw)
        logging.debug('frame %d: cuboid %d yaw %.4f -> %.4f, IoU %.4f -> %.4f',
                      c.frame, i, c.yaw, yaw, before, after)
        if report is not None:
            report.append({'frame': c.frame, 'index': i, 'box_index': j,
                           'label': c.label, 'match_iou': float(match_iou),
                           'yaw_before': c.yaw, 'yaw_after': yaw,
                           'iou_before': float(before), 'iou_after': float(after)})
    return refined


def tune_frames(cuboids, boxes, calibs, cfg=None, report=None, progress=False):
    """Run `tune_frame` for every frame; `calibs` maps frame to calibration."""
    cfg = cfg if cfg is not None else YawTuneConfig()
    grouping = load_grouping(cfg.grouping)
    by_frame_c = group_by_frame(cuboids)
    by_frame_b = group_by_frame(boxes)
    tuned = {}
    frames = sorted(by_frame_c)
    for frame in tqdm(frames, ncols=100, disable=not progress):
        tuned[frame] = iter(tune_frame(by_frame_c[frame], by_frame_b.get(frame, []),
                                       calibs[frame], cfg, grouping, report))
    return [next(tuned[c.frame]) for c in cuboids]


def yaw_error(yaw, reference):
    """Absolute yaw difference modulo pi, in [0, pi / 2]."""
    d = abs(angle_diff(yaw, reference)) % math.pi
    return min(d, math.pi - d)


def calib_noise_robustness(cuboids, boxes, gts, calibs, noise_levels, cfg=None,
                           eval_cfg=None, seed=0):
    """
    Tune with calibrations whose pitch and roll are perturbed by each noise
    magnitude and report the resulting AOS next to the untuned AOS.

    Returns:
        list(dict): {'noise', 'aos_before', 'aos_after'} per noise level, AOS
            averaged over the superclasses that have ground truth.
    """
    cfg = cfg if cfg is not None else YawTuneConfig()
    eval_cfg = eval_cfg if eval_cfg is not None else EvalConfig()
    before = mean_defined(evaluate_3d(cuboids, gts, eval_cfg).aos_table())
    rows = []
    frames = sorted({c.frame for c in cuboids})
    for noise in noise_levels:
        noisy = {f: perturb_calib(calibs[f], noise, noise, seed + f) for f in frames}
        tuned = tune_frames(cuboids, boxes, noisy, cfg)
        after = mean_defined(evaluate_3d(tuned, gts, eval_cfg).aos_table())
        rows.append({'noise': float(noise), 'aos_before': before, 'aos_after': after})
        logging.info('calibration noise %.4f rad: AOS %s -> %s', noise, before, after)
    return rows
