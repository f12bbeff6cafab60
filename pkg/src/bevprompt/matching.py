# coding: utf-8

import numpy as np

TP, FP, IGNORED = 1, 0, -1


def iou_matrix(dets, gts, iou_fn):
    ious = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            ious[i, j] = iou_fn(d, g)
    return ious


def match_greedy(dets, gts, iou_fn, threshold, gt_ignored=None, ious=None):
    """
    One-to-one greedy matching in detection order.

    Each detection takes the highest-IoU unmatched ground truth with
    IoU >= threshold, preferring ground truths that are not ignored. A
    detection whose only candidate is an ignored ground truth consumes it and
    is itself ignored.

    Args:
        dets (list): detections, sorted by descending score.
        gts (list): ground truths of the same class.
        iou_fn (callable): symmetric IoU between a detection and a ground truth.
        threshold (float): minimal IoU of a match.
        gt_ignored (np.ndarray): optional boolean flag per ground truth.
        ious (np.ndarray): optional precomputed (n_det, n_gt) IoU matrix.

    Returns:
        tuple: per-detection flags (TP/FP/IGNORED), per-detection matched gt
            index (-1 if none) and per-gt matched detection index (-1 if none).
    """
    n_det, n_gt = len(dets), len(gts)
    if ious is None:
        ious = iou_matrix(dets, gts, iou_fn)
    if gt_ignored is None:
        gt_ignored = np.zeros(n_gt, dtype=bool)

    flags = np.full(n_det, FP, dtype=np.int64)
    det_to_gt = np.full(n_det, -1, dtype=np.int64)
    gt_to_det = np.full(n_gt, -1, dtype=np.int64)

    for i in range(n_det):
        best, best_iou, best_ignored = -1, -1.0, True
        for j in range(n_gt):
            if gt_to_det[j] >= 0 or ious[i, j] < threshold:
                continue
            if best_ignored and not gt_ignored[j]:
                best, best_iou, best_ignored = j, ious[i, j], False
            elif gt_ignored[j] == best_ignored and ious[i, j] > best_iou:
                best, best_iou = j, ious[i, j]
        if best < 0:
            continue
        det_to_gt[i] = best
        gt_to_det[best] = i
        flags[i] = IGNORED if best_ignored else TP
    return flags, det_to_gt, gt_to_det
