"""Region, contour, part and keypoint scores for label propagation."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def jaccard(pred_mask, gt_mask) -> float:
    """Intersection over union of two binary masks; two empty masks score 1."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    _same_shape(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary_map(mask) -> np.ndarray:
    """Pixels of ``mask`` removed by one 4-neighbour erosion.

    The image border counts as inside, so a mask touching the border has no
    contour along it.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, mode="edge")
    eroded = (padded[1:-1, 1:-1] & padded[:-2, 1:-1] & padded[2:, 1:-1]
              & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~eroded


def _matched_fraction(src: np.ndarray, dst: np.ndarray, tol: float) -> float:
    # distance from every pixel to the nearest dst boundary pixel
    dist = ndimage.distance_transform_edt(~dst)
    return float(np.count_nonzero(dist[src] <= tol)) / np.count_nonzero(src)


def boundary_f(pred_mask, gt_mask, tol_px: float = 2.0) -> float:
    """Contour F-measure with a Euclidean matching tolerance in pixels."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    _same_shape(pred, gt)
    bp, bg = boundary_map(pred), boundary_map(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = _matched_fraction(bp, bg, tol_px)
    recall = _matched_fraction(bg, bp, tol_px)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def miou(pred_labels, gt_labels, n_classes: int | None = None) -> float:
    """Per-class IoU averaged over classes present in the ground truth."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    _same_shape(pred, gt)
    classes = np.unique(gt)
    if n_classes is not None:
        classes = classes[classes < n_classes]
    if len(classes) == 0:
        return 1.0
    scores = []
    for c in classes:
        p, g = pred == c, gt == c
        scores.append(np.count_nonzero(p & g) / np.count_nonzero(p | g))
    return float(np.mean(scores))


def pck(pred_kps, gt_kps, alpha: float, ref_size) -> float:
    """Fraction of keypoints within ``alpha * ref_size`` of the ground truth.

    ``ref_size`` is a scalar or one value per keypoint (max side of the
    instance bounding box).
    """
    pred = np.asarray(pred_kps, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt_kps, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError(f"{len(pred)} predicted keypoints vs {len(gt)} ground truth")
    if len(gt) == 0:
        return 1.0
    err = np.linalg.norm(pred - gt, axis=1)
    thr = alpha * np.broadcast_to(np.asarray(ref_size, dtype=np.float64), err.shape)
    return float(np.mean(err <= thr))


def bbox_size(mask) -> int:
    """max(height, width) of the bounding box of ``mask`` (0 if empty)."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return 0
    return int(max(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1))
