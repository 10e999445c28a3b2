"""k-NN label propagation over dense patch features.

Frame 0 carries ground-truth labels.  Every later frame takes its labels
from the top-k most similar patches, restricted to a spatial window,
among frame 0 and the ``queue_len`` most recent predicted frames.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, asdict
from typing import Callable, Sequence

import numpy as np

from . import metrics as M
from .data import resize_bilinear
from .nn import grid_positions


@dataclass(frozen=True)
class PropagationConfig:
    top_k: int = 7
    queue_len: int = 20
    neighborhood: int = 20
    temperature: float = 0.07
    bf_tol: float = 2.0
    kp_sigma: float = 0.5

    def __post_init__(self):
        if self.top_k < 1 or self.queue_len < 0 or self.neighborhood < 0:
            raise ValueError("need top_k >= 1, queue_len >= 0, neighborhood >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "davis": PropagationConfig(top_k=7, queue_len=20, neighborhood=20),
    "vip": PropagationConfig(top_k=10, queue_len=20, neighborhood=8),
    "jhmdb": PropagationConfig(top_k=7, queue_len=20, neighborhood=20),
}


@dataclass
class FeatureMap:
    features: np.ndarray        # [h*w, D], unit rows
    grid: tuple[int, int]
    frame_index: int = 0

    @classmethod
    def from_raw(cls, raw: np.ndarray, grid, frame_index: int = 0) -> "FeatureMap":
        raw = np.asarray(raw, dtype=np.float64)
        norm = np.linalg.norm(raw, axis=-1, keepdims=True)
        return cls(raw / np.maximum(norm, 1e-12), tuple(grid), frame_index)


@dataclass
class LabelMap:
    probs: np.ndarray           # [h*w, C], non-negative
    grid: tuple[int, int]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


def extract_features(model, frame: np.ndarray, frame_index: int = 0) -> FeatureMap:
    g = model.pcfg.grid
    return FeatureMap.from_raw(model.features(frame), (g, g), frame_index)


def extract_clip_features(model, frames: np.ndarray, batch: int = 16) -> list[FeatureMap]:
    g = model.pcfg.grid
    out = []
    for s in range(0, len(frames), batch):
        z = model.features(frames[s:s + batch])
        out += [FeatureMap.from_raw(zi, (g, g), s + i) for i, zi in enumerate(z)]
    return out


def _window(grid: tuple[int, int], radius: int) -> np.ndarray:
    pos = grid_positions(grid[1]) if grid[0] == grid[1] else \
        np.stack(np.divmod(np.arange(grid[0] * grid[1]), grid[1]), axis=1)
    d = np.abs(pos[:, None, :] - pos[None, :, :]).max(axis=-1)
    return d <= radius


def propagate_labels(context: Sequence[tuple[FeatureMap, LabelMap]], target: FeatureMap,
                     cfg: PropagationConfig) -> LabelMap:
    """Affinity-weighted average of the top-k in-window source labels per target patch."""
    if not context:
        raise ValueError("context must hold at least one frame")
    grid = target.grid
    for f, lab in context:
        if f.grid != grid or lab.grid != grid:
            raise ValueError(f"grid mismatch: context {f.grid}/{lab.grid} vs target {grid}")
    n = target.features.shape[0]
    window = _window(grid, cfg.neighborhood)
    src_feat = np.concatenate([f.features for f, _ in context], axis=0)
    src_lab = np.concatenate([lab.probs for _, lab in context], axis=0)
    allowed = np.tile(window, (1, len(context)))
    if not allowed.any(axis=1).all():
        raise ValueError("empty candidate set for some target patch")
    sim = target.features @ src_feat.T
    sim = np.where(allowed, sim, -np.inf)
    k = min(cfg.top_k, sim.shape[1])
    # stable sort: ties resolve to the earliest source (frame order, then patch order)
    top = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    top_sim = np.take_along_axis(sim, top, axis=1)
    valid = np.isfinite(top_sim)
    if cfg.temperature == 0:
        w = np.zeros_like(top_sim)
        w[:, 0] = 1.0
    else:
        logits = np.where(valid, top_sim / cfg.temperature, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
    probs = np.einsum("qk,qkc->qc", w, src_lab[top])
    return LabelMap(probs, grid)


# ---------------------------------------------------------------------------
# label encodings
# ---------------------------------------------------------------------------

def downsample_labels(labels: np.ndarray, patch: int, n_classes: int) -> LabelMap:
    """One-hot patch labels by majority vote over each patch's pixels."""
    h, w = labels.shape
    gh, gw = h // patch, w // patch
    blocks = labels[:gh * patch, :gw * patch].reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(gh * gw, patch * patch)
    counts = np.stack([(blocks == c).sum(axis=1) for c in range(n_classes)], axis=1)
    return LabelMap(np.eye(n_classes)[counts.argmax(axis=1)], (gh, gw))


def keypoint_heatmaps(kps: np.ndarray, patch: int, grid: tuple[int, int],
                      sigma: float) -> LabelMap:
    """One Gaussian channel per keypoint on the patch grid (sigma in patches)."""
    gh, gw = grid
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    # pixel (x, y) -> patch-grid coordinates of patch centres
    px = (np.asarray(kps)[:, 0] + 0.5) / patch - 0.5
    py = (np.asarray(kps)[:, 1] + 0.5) / patch - 0.5
    d2 = (cols[:, None] - px[None]) ** 2 + (rows[:, None] - py[None]) ** 2
    return LabelMap(np.exp(-d2 / (2 * sigma ** 2)), grid)


def upsample(labels: LabelMap, size: tuple[int, int]) -> np.ndarray:
    """Bilinear patch -> pixel upsampling of every class plane: [C, H, W]."""
    gh, gw = labels.grid
    planes = labels.probs.T.reshape(-1, gh, gw)
    return resize_bilinear(planes, *size)


def argmax_labels(labels: LabelMap, size: tuple[int, int]) -> np.ndarray:
    return upsample(labels, size).argmax(axis=0)


def heatmap_peaks(labels: LabelMap, size: tuple[int, int]) -> np.ndarray:
    planes = upsample(labels, size)
    flat = planes.reshape(len(planes), -1).argmax(axis=1)
    ys, xs = np.divmod(flat, size[1])
    return np.stack([xs, ys], axis=1).astype(np.float64)


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------

@dataclass
class EvalMetrics:
    J_mean: float | None = None
    F_mean: float | None = None
    JF_mean: float | None = None
    mIoU: float | None = None
    PCK_01: float | None = None
    PCK_02: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def run_propagation(features: Sequence[FeatureMap], first: LabelMap,
                    cfg: PropagationConfig) -> list[LabelMap]:
    """Label maps for every frame; frame 0 is ``first`` itself."""
    queue: deque = deque(maxlen=cfg.queue_len or None)
    out = [first]
    for t in range(1, len(features)):
        ctx = [(features[0], first)]
        if cfg.queue_len:
            ctx += list(queue)
        pred = propagate_labels(ctx, features[t], cfg)
        out.append(pred)
        if cfg.queue_len:
            queue.append((features[t], pred))
    return out




def evaluate_sequence(features, frames_shape: tuple[int, int], patch: int,
                      gt_labels: np.ndarray | None, cfg: PropagationConfig,
                      task: str = "seg", gt_keypoints: np.ndarray | None = None,
                      kp_ref: np.ndarray | None = None,
                      return_predictions: bool = False):
    """Propagate frame-0 ground truth through ``features`` and score frames 1..L-1.

    ``task`` is ``seg`` (J, F, J&F averaged over frames, then objects),
    ``parts`` (mIoU) or ``keypoints`` (PCK@0.1, PCK@0.2).
    """
    size = frames_shape
    n_frames = len(features)
    grid = features[0].grid
    if task in ("seg", "parts"):
        if gt_labels is None:
            raise ValueError(f"{task} evaluation needs ground-truth label maps")
        if len(gt_labels) != n_frames:
            raise ValueError(f"{len(gt_labels)} label maps for {n_frames} frames")
        n_classes = int(gt_labels.max()) + 1
        first = downsample_labels(gt_labels[0], patch, n_classes)
        maps = run_propagation(features, first, cfg)
        preds = [argmax_labels(m, size) for m in maps]
        if task == "seg":
            objects = [c for c in np.unique(gt_labels[0]) if c != 0]
            js, fs = [], []
            for c in objects:
                jo = [M.jaccard(preds[t] == c, gt_labels[t] == c) for t in range(1, n_frames)]
                fo = [M.boundary_f(preds[t] == c, gt_labels[t] == c, cfg.bf_tol)
                      for t in range(1, n_frames)]
                js.append(np.mean(jo))
                fs.append(np.mean(fo))
            j = float(np.mean(js)) if js else 1.0
            f = float(np.mean(fs)) if fs else 1.0
            result = EvalMetrics(J_mean=j, F_mean=f, JF_mean=(j + f) / 2)
        else:
            scores = [M.miou(preds[t], gt_labels[t], n_classes) for t in range(1, n_frames)]
            result = EvalMetrics(mIoU=float(np.mean(scores)))
    elif task == "keypoints":
        if gt_keypoints is None:
            raise ValueError("keypoint evaluation needs ground-truth keypoints")
        first = keypoint_heatmaps(gt_keypoints[0], patch, grid, cfg.kp_sigma)
        maps = run_propagation(features, first, cfg)
        preds = [heatmap_peaks(m, size) for m in maps]
        ref = np.ones(gt_keypoints.shape[1]) if kp_ref is None else kp_ref
        p1, p2 = [], []
        for t in range(1, n_frames):
            r = ref[t] if np.ndim(ref) == 2 else ref
            p1.append(M.pck(preds[t], gt_keypoints[t], 0.1, r))
            p2.append(M.pck(preds[t], gt_keypoints[t], 0.2, r))
        result = EvalMetrics(PCK_01=float(np.mean(p1)), PCK_02=float(np.mean(p2)))
    else:
        raise ValueError(f"unknown task {task!r}")
    if return_predictions:
        return result, preds
    return result


def keypoint_ref_sizes(segmentation: np.ndarray, n_objects: int,
                       fallback: np.ndarray | None = None) -> np.ndarray:
    """[L, K] max bounding-box side of each object's visible region per frame."""
    out = np.zeros((len(segmentation), n_objects))
    for t, seg in enumerate(segmentation):
        for k in range(n_objects):
            out[t, k] = M.bbox_size(seg == k + 1)
    if fallback is not None:
        out = np.where(out > 0, out, np.asarray(fallback)[None, :])
    return out


def correspondence_oracle_features(segmentation: np.ndarray, positions: np.ndarray,
                                   patch: int, sigma: float | None = None) -> list[FeatureMap]:
    """Patch features built from ground-truth correspondence.

    Each patch is described by the object under its centre and the frame-0
    location of that surface point (encoded with Gaussian bumps on the
    patch-centre lattice), so the most similar source is the true match.
    """
    n, h, w = segmentation.shape
    gh, gw = h // patch, w // patch
    sigma = sigma or patch / 2
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    cy = rows * patch + patch // 2
    cx = cols * patch + patch // 2
    anchors = np.stack([cols * patch + (patch - 1) / 2, rows * patch + (patch - 1) / 2], axis=1)
    n_ids = positions.shape[1] + 1
    feats = []
    for t in range(n):
        ids = segmentation[t, cy, cx]
        shift = np.zeros((n_ids, 2))
        shift[1:] = positions[t] - positions[0]
        origin = np.stack([cx, cy], axis=1) - shift[ids]
        d2 = ((origin[:, None, :] - anchors[None]) ** 2).sum(-1)
        code = np.exp(-d2 / (2 * sigma ** 2))
        onehot = np.eye(n_ids)[ids] * 3.0
        feats.append(FeatureMap.from_raw(np.concatenate([onehot, code], axis=1), (gh, gw), t))
    return feats


def evaluate_clip(model, labeled, cfg: PropagationConfig, task: str = "seg",
                  features: list[FeatureMap] | None = None) -> EvalMetrics:
    """Score one :class:`~siammae.data.LabeledClip` (or clip + ground truth pair)."""
    clip = labeled.clip
    seg = labeled.segmentation
    if features is None:
        features = extract_clip_features(model, clip.frames)
    patch = clip.frames.shape[-1] // features[0].grid[1]
    size = clip.frames.shape[-2:]
    kp_ref = None
    kps = labeled.keypoints
    if task == "keypoints":
        if kps is None:
            raise ValueError(f"clip {clip.name!r} has no keypoints")
        if seg is not None:
            kp_ref = keypoint_ref_sizes(seg, kps.shape[1], labeled.sizes)
        elif labeled.sizes is not None:
            kp_ref = np.asarray(labeled.sizes, dtype=float)
    return evaluate_sequence(features, size, patch, seg, cfg, task, kps, kp_ref)


def evaluate_dataset(model, clips, cfg: PropagationConfig, task: str = "seg",
                     feature_fn=None) -> tuple[dict, list[dict]]:
    """Mean metrics over ``clips`` plus one row per clip.

    ``feature_fn(labeled_clip)`` overrides model features (used by oracles).
    """
    rows = []
    for lc in clips:
        feats = feature_fn(lc) if feature_fn is not None else None
        m = evaluate_clip(model, lc, cfg, task, feats).to_dict()
        rows.append({"clip": lc.clip.name, **m})
    keys = [k for k in rows[0] if k != "clip"] if rows else []
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    return mean, rows


def oracle_feature_fn(patch: int):
    def fn(lc):
        if lc.segmentation is None or lc.positions is None:
            raise ValueError(f"clip {lc.clip.name!r} lacks ground-truth correspondence")
        return correspondence_oracle_features(lc.segmentation, lc.positions, patch)
    return fn
