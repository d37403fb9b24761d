"""Brute-force average-precision oracle.

Matching enumerates every one-to-one assignment of detections to ground truths
and keeps the lexicographically best one when detections are ranked by
confidence: each detection in turn takes the highest similarity still
possible, lowest ground-truth index on ties. The precision-recall curve is
then read off rank by rank, with no cumulative-sum or envelope shortcuts.
"""

import itertools
import math


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def keypoint_oks(det_kps, gt_kps, area, k):
    total, count = 0.0, 0
    for (px, py, _), (gx, gy, v) in zip(det_kps, gt_kps):
        if v > 0:
            total += math.exp(-((px - gx) ** 2 + (py - gy) ** 2) / (2 * area * k * k))
            count += 1
    return total / count


def assignments(n_det, n_gt):
    """Every partial injective map from detections to ground truths."""
    options = [None] + list(range(n_gt))
    for combo in itertools.product(options, repeat=n_det):
        used = [j for j in combo if j is not None]
        if len(used) == len(set(used)):
            yield combo


def best_assignment(S, threshold):
    best, best_key = None, None
    for combo in assignments(len(S), len(S[0]) if S else 0):
        if any(j is not None and S[i][j] < threshold for i, j in enumerate(combo)):
            continue
        key = tuple((S[i][j], -j) if j is not None else (-1.0, 0) for i, j in enumerate(combo))
        if best_key is None or key > best_key:
            best, best_key = combo, key
    return best


def ap_from_ranking(tp_flags, n_gt):
    ranks = []
    for k in range(1, len(tp_flags) + 1):
        tp = sum(tp_flags[:k])
        ranks.append((tp / n_gt, tp / k))
    total = 0.0
    for r in range(101):
        level = r / 100
        reachable = [p for rec, p in ranks if rec >= level - 1e-12]
        total += max(reachable) if reachable else 0.0
    return total / 101


def oracle_ap(images, similarity, thresholds, floor=0.7, max_det=100, k=0.05):
    """``images`` is a list of (detections, ground_truths) in plain-list form.

    detection: (box, keypoints, confidence); ground truth: (box, keypoints).
    """
    n_gt = sum(len(g) for _, g in images)
    per_image = []
    for dets, gts in images:
        kept = [d for d in dets if d[2] >= floor]
        kept = sorted(kept, key=lambda d: -d[2])[:max_det]
        per_image.append((kept, gts))
    results = []
    for t in thresholds:
        pool = []
        for img, (kept, gts) in enumerate(per_image):
            if similarity == "iou":
                S = [[box_iou(d[0], g[0]) for g in gts] for d in kept]
            else:
                S = [
                    [keypoint_oks(d[1], g[1], (g[0][2] - g[0][0]) * (g[0][3] - g[0][1]), k) for g in gts]
                    for d in kept
                ]
            combo = best_assignment(S, t) if gts else [None] * len(kept)
            for pos, (d, j) in enumerate(zip(kept, combo)):
                pool.append((-d[2], img, pos, j is not None))
        pool.sort()
        results.append(ap_from_ranking([f for *_, f in pool], n_gt))
    return sum(results) / len(results)
