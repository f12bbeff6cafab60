# coding: utf-8
"""
Detection metrics: BEV average precision, average orientation similarity
(AOS), COCO-style 2D mAP, a Rope-style composite score, and breakdowns by
difficulty, occlusion and truncation.

Matching is greedy per frame in descending score order. Ground truth
outside the evaluated slice is ignored: detections matched to it count
neither as true nor as false positives.
"""

import logging
import math
import os

import numpy as np

from bevprompt.data import group_by_frame
from bevprompt.errors import ConfigurationException, DataException, GeometryException
from bevprompt.geometry import cuboid_to_bev, iou_aabb, iou_rotated, project_cuboid
from bevprompt.grouping import load_grouping
from bevprompt.matching import FP, IGNORED, TP, match_greedy
from bevprompt.utils import Config

OVERALL = 'overall'
DIFFICULTIES = ('easy', 'moderate', 'hard')

PRESETS = {
    'benchmark': {'vehicle': 0.5, 'cyclist': 0.25, 'pedestrian': 0.25},
    'ablation': {'vehicle': 0.7, 'cyclist': 0.5, 'pedestrian': 0.5},
}
COCO_THRESHOLDS = [round(0.5 + 0.05 * i, 2) for i in range(10)]


class EvalConfig(Config):
    defaults = {
        'preset': 'benchmark',
        # per-superclass IoU thresholds, None to take them from the preset
        'thresholds': None,
        'default_threshold': 0.5,
        'n_points': 40,
        'coco_points': 101,
        'score_threshold': 0.3,
        'grouping': 'functionality',
        'difficulties': {
            'easy': {'min_height': 40.0, 'max_occlusion': 0.25, 'max_truncation': 0.15},
            'moderate': {'min_height': 25.0, 'max_occlusion': 0.5, 'max_truncation': 0.3},
            'hard': {'min_height': 25.0, 'max_occlusion': 1.0, 'max_truncation': 0.5},
        },
        'ranges': [[0.0, 0.5], [0.5, 1.0]],
        'rope_weight': 0.5,
        'rope_center_distance': 2.0,
    }

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigurationException('unknown preset {!r}'.format(self.preset))
        for t in list(self.iou_thresholds.values()) + [self.default_threshold]:
            if not 0 < t <= 1:
                raise ConfigurationException('IoU thresholds must lie in (0, 1], got {!r}'.format(t))
        if self.n_points < 2 or self.coco_points < 2:
            raise ConfigurationException('interpolation needs at least 2 points')
        if not 0 <= self.rope_weight <= 1:
            raise ConfigurationException('rope_weight must lie in [0, 1]')
        for lo, hi in self.ranges:
            if not 0 <= lo < hi <= 1:
                raise ConfigurationException('bad range [{!r}, {!r}]'.format(lo, hi))

    @property
    def iou_thresholds(self):
        return self.thresholds if self.thresholds is not None else PRESETS[self.preset]

    def threshold(self, superclass):
        return self.iou_thresholds.get(superclass, self.default_threshold)


class PRCurve:
    """
    Ranked detections of one evaluation cell.

    Args:
        scores (list(float)): detection scores, ignored detections excluded.
        tp (list(bool)): true-positive flag per detection.
        similarity (list(float)): orientation similarity per detection, 0
            for false positives.
        n_gt (int): number of non-ignored ground truths.
    """

    def __init__(self, scores, tp, similarity, n_gt):
        scores = np.asarray(scores, dtype=np.float64)
        order = np.argsort(-scores, kind='stable')
        self.scores = scores[order]
        self.tp = np.asarray(tp, dtype=bool)[order]
        self.similarity = np.asarray(similarity, dtype=np.float64)[order]
        self.n_gt = int(n_gt)

        count = np.arange(1, len(self.scores) + 1, dtype=np.float64)
        tp_cum = np.cumsum(self.tp).astype(np.float64)
        self.recall = tp_cum / self.n_gt if self.n_gt else np.zeros_like(tp_cum)
        self.precision = tp_cum / count if len(count) else np.zeros(0)
        self.orientation = np.cumsum(self.similarity) / count if len(count) else np.zeros(0)

    @property
    def n_tp(self):
        return int(self.tp.sum())

    @property
    def n_fp(self):
        return int((~self.tp).sum())

    def interpolated(self, recall_points, values=None):
        """Max of `values` (precision by default) over ranks reaching each recall."""
        values = self.precision if values is None else values
        out = np.zeros(len(recall_points))
        if len(values) == 0:
            return out
        suffix_max = np.maximum.accumulate(values[::-1])[::-1]
        idx = np.searchsorted(self.recall, recall_points, side='left')
        hit = idx < len(values)
        out[hit] = suffix_max[idx[hit]]
        return out

    def to_rows(self):
        return np.stack([self.scores, self.tp.astype(np.float64), self.recall,
                         self.precision, self.orientation], axis=1)


def recall_points(n_points, include_zero=False):
    if include_zero:
        return np.linspace(0.0, 1.0, n_points)
    return np.arange(1, n_points + 1, dtype=np.float64) / n_points


def average_precision(curve, n_points, include_zero=False):
    """Mean interpolated precision at `n_points` recall values; None without ground truth."""
    if curve.n_gt == 0:
        return None
    return float(np.mean(curve.interpolated(recall_points(n_points, include_zero))))


def average_orientation_similarity(curve, n_points):
    if curve.n_gt == 0:
        return None
    return float(np.mean(curve.interpolated(recall_points(n_points), curve.orientation)))


def orientation_similarity(det, gt):
    return (1.0 + math.cos(det.yaw - gt.yaw)) / 2.0


def bev_iou(a, b):
    return iou_rotated(cuboid_to_bev(a), cuboid_to_bev(b))


def accumulate(dets, gts, iou_fn, threshold, score_threshold, gt_ignored=None,
               det_ignored=None, similarity=None):
    """
    Match frame by frame and collect the ranked detections of one cell.

    Args:
        dets, gts (dict): frame -> list of detections / ground truths.
        gt_ignored (callable): gt -> bool, ground truth outside the cell.
        det_ignored (callable): det -> bool, unmatched detections that do
            not count as false positives.
        similarity (callable): (det, gt) -> similarity of a true positive.

    Returns:
        tuple: (PRCurve, list of matched (det, gt) pairs)
    """
    scores, flags, sims, pairs = [], [], [], []
    n_gt = 0
    for frame in sorted(set(dets) | set(gts)):
        frame_dets = sorted([d for d in dets.get(frame, []) if d.score >= score_threshold],
                            key=lambda d: -d.score)
        frame_gts = gts.get(frame, [])
        ignored = np.array([bool(gt_ignored(g)) if gt_ignored else False for g in frame_gts],
                           dtype=bool)
        n_gt += int((~ignored).sum())
        flag, det_to_gt, _ = match_greedy(frame_dets, frame_gts, iou_fn, threshold, ignored)
        for i, d in enumerate(frame_dets):
            if flag[i] == IGNORED:
                continue
            if flag[i] == FP and det_ignored is not None and det_ignored(d):
                continue
            scores.append(d.score)
            flags.append(flag[i] == TP)
            if flag[i] == TP:
                g = frame_gts[det_to_gt[i]]
                sims.append(similarity(d, g) if similarity else 1.0)
                pairs.append((d, g))
            else:
                sims.append(0.0)
    return PRCurve(scores, flags, sims, n_gt), pairs


class EvalCell:

    def __init__(self, superclass, difficulty, threshold, curve, ap, aos=None, pairs=None):
        self.superclass = superclass
        self.difficulty = difficulty
        self.threshold = threshold
        self.curve = curve
        self.ap = ap
        self.aos = aos
        self.pairs = pairs or []

    def to_dict(self, include_curve=False):
        d = {'superclass': self.superclass, 'difficulty': self.difficulty,
             'threshold': self.threshold, 'ap': self.ap, 'aos': self.aos,
             'n_gt': self.curve.n_gt, 'n_tp': self.curve.n_tp, 'n_fp': self.curve.n_fp}
        if include_curve:
            d['curve'] = self.curve.to_rows().tolist()
        return d


class EvalReport:
    """Evaluation cells keyed by (superclass, difficulty, threshold) plus summary scores."""

    def __init__(self, cells=None, map_2d=None, ap_2d=None, rope=None, slice_name=None):
        self.cells = list(cells or [])
        self.map_2d = map_2d
        self.ap_2d = ap_2d
        self.rope = rope
        self.slice_name = slice_name

    def get(self, superclass, difficulty=OVERALL, threshold=None):
        for c in self.cells:
            if (c.superclass == superclass and c.difficulty == difficulty
                    and (threshold is None or c.threshold == threshold)):
                return c
        raise KeyError((superclass, difficulty, threshold))

    def ap_table(self, difficulty=OVERALL):
        return {c.superclass: c.ap for c in self.cells if c.difficulty == difficulty}

    def aos_table(self, difficulty=OVERALL):
        return {c.superclass: c.aos for c in self.cells if c.difficulty == difficulty}

    def to_dict(self, include_curves=False):
        return {'slice': self.slice_name,
                'cells': [c.to_dict(include_curves) for c in self.cells],
                'map_2d': self.map_2d, 'ap_2d': self.ap_2d, 'rope': self.rope}


def mean_defined(table):
    values = [v for v in (table.values() if isinstance(table, dict) else table) if v is not None]
    if not values:
        return None
    return float(np.mean(values))


def _by_superclass(items, grouping):
    out = {s: [] for s in grouping.superclass_names}
    for item in items:
        out[grouping.superclass(item.label)].append(item)
    return out


def box_height(calib, c):
    """Clipped projected box height in pixels, 0 when the cuboid is not visible."""
    try:
        return project_cuboid(calib, c).height
    except GeometryException:
        return 0.0


def _require(gt, field):
    value = getattr(gt, field)
    if value is None:
        raise DataException('ground truth {!r} has no {:s} tag'.format(gt, field))
    return value


def difficulty_filters(rule, calibs):
    """(gt_ignored, det_ignored) predicates of one difficulty rule."""

    def gt_ignored(g):
        return (box_height(calibs[g.frame], g) < rule['min_height']
                or _require(g, 'occlusion') > rule['max_occlusion']
                or _require(g, 'truncation') > rule['max_truncation'])

    def det_ignored(d):
        return box_height(calibs[d.frame], d) < rule['min_height']

    return gt_ignored, det_ignored


def range_filter(axis, lo, hi, closed):
    def gt_ignored(g):
        v = _require(g, axis)
        return not (lo <= v < hi or (closed and v == hi))
    return gt_ignored


def evaluate_3d(dets, gts, cfg=None, calibs=None, gt_ignored=None, slice_name=None):
    """
    BEV AP and AOS per superclass.

    The 'overall' difficulty is always evaluated; with `calibs` (frame ->
    CameraCalib) the easy/moderate/hard cells are evaluated as well.
    """
    cfg = cfg if cfg is not None else EvalConfig()
    grouping = load_grouping(cfg.grouping)
    det_sc = _by_superclass(dets, grouping)
    gt_sc = _by_superclass(gts, grouping)

    levels = [(OVERALL, gt_ignored, None)]
    if calibs is not None:
        for name in DIFFICULTIES:
            g_ign, d_ign = difficulty_filters(cfg.difficulties[name], calibs)
            if gt_ignored is not None:
                g_ign = (lambda a, b: lambda g: a(g) or b(g))(g_ign, gt_ignored)
            levels.append((name, g_ign, d_ign))

    cells = []
    for superclass in grouping.superclass_names:
        threshold = cfg.threshold(superclass)
        frame_dets = group_by_frame(det_sc[superclass])
        frame_gts = group_by_frame(gt_sc[superclass])
        for difficulty, g_ign, d_ign in levels:
            curve, pairs = accumulate(frame_dets, frame_gts, bev_iou, threshold,
                                      cfg.score_threshold, g_ign, d_ign,
                                      orientation_similarity)
            cells.append(EvalCell(superclass, difficulty, threshold, curve,
                                  average_precision(curve, cfg.n_points),
                                  average_orientation_similarity(curve, cfg.n_points), pairs))
    report = EvalReport(cells, slice_name=slice_name)
    report.rope = rope_from_report(report, cfg)
    logging.debug('evaluate_3d: %s', report.ap_table())
    return report


def ap_bev(dets3d, gts3d, cfg=None):
    """Per-superclass BEV AP (None for superclasses without ground truth)."""
    return evaluate_3d(dets3d, gts3d, cfg).ap_table()


def aos(dets3d, gts3d, cfg=None):
    return evaluate_3d(dets3d, gts3d, cfg).aos_table()


def coco_ap_per_class(dets2d, gts2d, cfg=None):
    """Per-label mean over IoU 0.50:0.05:0.95 of 101-point AP; labels without ground truth are skipped."""
    cfg = cfg if cfg is not None else EvalConfig()
    result = {}
    for label in sorted({g.label for g in gts2d}):
        frame_dets = group_by_frame([d for d in dets2d if d.label == label])
        frame_gts = group_by_frame([g for g in gts2d if g.label == label])
        aps = []
        for t in COCO_THRESHOLDS:
            curve, _ = accumulate(frame_dets, frame_gts, iou_aabb, t, cfg.score_threshold)
            aps.append(average_precision(curve, cfg.coco_points, include_zero=True))
        result[label] = float(np.mean(aps))
    return result


def map_coco_2d(dets2d, gts2d, cfg=None):
    return mean_defined(coco_ap_per_class(dets2d, gts2d, cfg))


def rope_similarities(det, gt, max_distance):
    """(center, orientation, area) similarities of a matched pair, each in [0, 1]."""
    distance = math.hypot(det.x - gt.x, det.y - gt.y)
    center = max(0.0, 1.0 - distance / max_distance)
    area_det, area_gt = det.w * det.l, gt.w * gt.l
    area = min(area_det, area_gt) / max(area_det, area_gt)
    return center, orientation_similarity(det, gt), area


def rope_from_report(report, cfg):
    """
    w * AP + (1 - w) * mean similarity of the true positives, per
    superclass on the overall cells. None when there is no true positive.
    """
    w = cfg.rope_weight
    scores = {}
    for cell in report.cells:
        if cell.difficulty != OVERALL:
            continue
        if cell.ap is None or not cell.pairs:
            scores[cell.superclass] = None
            continue
        sims = [np.mean(rope_similarities(d, g, cfg.rope_center_distance)) for d, g in cell.pairs]
        scores[cell.superclass] = float(w * cell.ap + (1.0 - w) * np.mean(sims))
    return scores


def rope_score(dets3d, gts3d, cfg=None):
    return evaluate_3d(dets3d, gts3d, cfg).rope


def breakdown(dets, gts, axis, cfg=None, calibs=None):
    """
    Reports per slice of the ground truth.

    Args:
        axis (str): 'occlusion' or 'truncation' (slices from `cfg.ranges`,
            the last range closed) or 'difficulty' (needs `calibs`).

    Returns:
        dict: slice name -> EvalReport
    """
    cfg = cfg if cfg is not None else EvalConfig()
    if axis == 'difficulty':
        if calibs is None:
            raise DataException('difficulty breakdown needs calibrations')
        full = evaluate_3d(dets, gts, cfg, calibs)
        return {name: EvalReport([c for c in full.cells if c.difficulty == name],
                                 slice_name=name) for name in DIFFICULTIES}
    if axis not in ('occlusion', 'truncation'):
        raise ConfigurationException('unknown breakdown axis {!r}'.format(axis))

    for g in gts:
        _require(g, axis)
    reports = {}
    for k, (lo, hi) in enumerate(cfg.ranges):
        name = '{:s}_{:.2f}-{:.2f}'.format(axis, lo, hi)
        ignored = range_filter(axis, lo, hi, closed=(k == len(cfg.ranges) - 1))
        reports[name] = evaluate_3d(dets, gts, cfg, gt_ignored=ignored, slice_name=name)
    return reports


def evaluate(dets3d, gts3d, cfg=None, calibs=None, dets2d=None, gts2d=None):
    """Full report: BEV AP/AOS cells, Rope scores and, given 2D inputs, COCO mAP."""
    cfg = cfg if cfg is not None else EvalConfig()
    report = evaluate_3d(dets3d, gts3d, cfg, calibs)
    if dets2d is not None and gts2d is not None:
        report.ap_2d = coco_ap_per_class(dets2d, gts2d, cfg)
        report.map_2d = mean_defined(report.ap_2d)
    logging.info('evaluated %d detections against %d ground truths', len(dets3d), len(gts3d))
    return report


def write_pr_csv(report, path):
    """One CSV per cell with columns score, tp, recall, precision, orientation."""
    os.makedirs(path, exist_ok=True)
    for cell in report.cells:
        name = '{:s}_{:s}_{:.2f}.csv'.format(cell.superclass, cell.difficulty, cell.threshold)
        np.savetxt(os.path.join(path, name), cell.curve.to_rows().reshape(-1, 5),
                   header='score,tp,recall,precision,orientation', delimiter=',',
                   fmt='%.17g', comments='')
