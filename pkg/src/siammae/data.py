"""Video clips, frame-pair sampling, paired augmentation and synthetic sprites."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image


class DataError(ValueError):
    """Unusable input data (short clip, unreadable frame, size mismatch)."""


@dataclass
class VideoClip:
    frames: np.ndarray          # [L, C, H, W] float in [0, 1]
    fps: float = 30.0
    name: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4:
            raise DataError(f"clip frames must be [L, C, H, W], got {self.frames.shape}")
        if len(self.frames) < 2:
            raise DataError("a clip needs at least 2 frames")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class FramePairSample:
    f1: np.ndarray
    f2: np.ndarray
    gap: int


@dataclass(frozen=True)
class AugmentParams:
    crop_scale_range: tuple[float, float] = (0.5, 1.0)
    hflip_prob: float = 0.5
    color_jitter: bool = False
    independent: bool = False
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    jitter_strength: float = 0.4

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop scale range {self.crop_scale_range} must lie in (0, 1]")


NO_AUGMENT = AugmentParams(crop_scale_range=(1.0, 1.0), hflip_prob=0.0)


# ---------------------------------------------------------------------------
# pair sampling & augmentation
# ---------------------------------------------------------------------------

def sample_frame_pair(clip: VideoClip, gap_range: Sequence[int],
                      rng: np.random.Generator) -> FramePairSample:
    lo, hi = int(gap_range[0]), int(gap_range[1])
    n = len(clip)
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid gap range [{lo}, {hi}]")
    if n < lo + 1:
        raise DataError(f"clip {clip.name!r} has {n} frames, need at least {lo + 1} "
                        f"for gap {lo}")
    gap = int(rng.integers(lo, min(hi, n - 1) + 1))
    start = int(rng.integers(0, n - gap))
    return FramePairSample(clip.frames[start], clip.frames[start + gap], gap)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of [..., H, W]."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        i0 = np.floor(x).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    y0, y1, wy = coords(h, out_h)
    x0, x1, wx = coords(w, out_w)
    top = img[..., y0, :] * (1 - wy)[:, None] + img[..., y1, :] * wy[:, None]
    return top[..., x0] * (1 - wx) + top[..., x1] * wx


def _sample_crop(h: int, w: int, params: AugmentParams, rng) -> tuple[int, int, int, int]:
    lo, hi = params.crop_scale_range
    area = h * w
    log_ar = np.log(params.aspect_range)
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        ar = np.exp(rng.uniform(*log_ar))
        cw = int(round(np.sqrt(target * ar)))
        ch = int(round(np.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def _color_jitter(img: np.ndarray, s: float, rng) -> np.ndarray:
    b, c, sat = rng.uniform(1 - s, 1 + s, size=3)
    out = img * b
    mean = out.mean()
    out = (out - mean) * c + mean
    gray = out.mean(axis=0, keepdims=True)
    out = (out - gray) * sat + gray
    return np.clip(out, 0.0, 1.0)


def _spatial(params: AugmentParams, h: int, w: int, rng):
    return _sample_crop(h, w, params, rng), bool(rng.random() < params.hflip_prob)


def _apply(img, crop, flip, out_hw):
    top, left, ch, cw = crop
    x = img[..., top:top + ch, left:left + cw]
    x = resize_bilinear(x, *out_hw)
    return x[..., ::-1].copy() if flip else x


def augment_pair(pair: FramePairSample, params: AugmentParams, rng: np.random.Generator,
                 out_size: int | None = None) -> FramePairSample:
    """One crop and one flip per pair, shared by both frames.

    With ``params.independent`` each frame draws its own crop and flip.
    Colour jitter, when on, uses one draw per pair.
    """
    h, w = pair.f1.shape[-2:]
    out_hw = (out_size, out_size) if out_size else (h, w)
    crop, flip = _spatial(params, h, w, rng)
    f1 = _apply(pair.f1, crop, flip, out_hw)
    if params.independent:
        crop, flip = _spatial(params, h, w, rng)
    f2 = _apply(pair.f2, crop, flip, out_hw)
    if params.color_jitter:
        state = rng.bit_generator.state
        f1 = _color_jitter(f1, params.jitter_strength, rng)
        rng.bit_generator.state = state
        f2 = _color_jitter(f2, params.jitter_strength, rng)
    return FramePairSample(f1, f2, pair.gap)


def repeated_sampling_batches(clips: Sequence[VideoClip], factor: int, batch_size: int,
                              rng: np.random.Generator, gap_range: Sequence[int] = (4, 48),
                              augment: AugmentParams | None = None,
                              out_size: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of [B, C, H, W] (f1, f2) batches.

    Each clip contributes ``factor`` independent pair samples, so an epoch
    has ``factor * len(clips)`` pairs.  The final short batch is kept.
    """
    if factor < 1:
        raise ValueError("repeated sampling factor must be >= 1")
    order = np.repeat(rng.permutation(len(clips)), factor)
    order = order[rng.permutation(len(order))]
    for start in range(0, len(order), batch_size):
        yield sample_batch(clips, order[start:start + batch_size], rng, gap_range,
                           augment, out_size)


class RepeatedSampler:
    """Stateless step -> clip-index schedule with repeated sampling.

    Epoch ``e`` is a seeded shuffle of every clip index repeated ``factor``
    times; epochs are concatenated and cut into consecutive batches.  Any
    step's batch can be recomputed from ``(seed, step)`` alone, which makes
    resumed training follow the uninterrupted trajectory.
    """

    def __init__(self, n_clips: int, factor: int, batch_size: int, seed: int):
        if n_clips < 1:
            raise DataError("no training clips")
        if factor < 1:
            raise ValueError("repeated sampling factor must be >= 1")
        self.n_clips = n_clips
        self.factor = factor
        self.batch_size = batch_size
        self.seed = seed
        self._cache: dict[int, np.ndarray] = {}

    @property
    def epoch_len(self) -> int:
        return self.n_clips * self.factor

    def epoch_order(self, epoch: int) -> np.ndarray:
        if epoch not in self._cache:
            rng = np.random.default_rng([self.seed, 1, epoch])
            order = np.repeat(np.arange(self.n_clips), self.factor)
            self._cache = {epoch: order[rng.permutation(len(order))]}
        return self._cache[epoch]

    def epoch_at(self, step: int) -> float:
        return step * self.batch_size / self.epoch_len

    def indices(self, step: int) -> np.ndarray:
        start = step * self.batch_size
        out = []
        for pos in range(start, start + self.batch_size):
            e, i = divmod(pos, self.epoch_len)
            out.append(self.epoch_order(e)[i])
        return np.array(out)


def sample_batch(clips: Sequence[VideoClip], indices, rng: np.random.Generator,
                 gap_range: Sequence[int] = (4, 48), augment: AugmentParams | None = None,
                 out_size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    f1s, f2s = [], []
    for ci in indices:
        pair = sample_frame_pair(clips[ci], gap_range, rng)
        if augment is not None:
            pair = augment_pair(pair, augment, rng, out_size)
        f1s.append(pair.f1)
        f2s.append(pair.f2)
    return np.stack(f1s), np.stack(f2s)


# ---------------------------------------------------------------------------
# synthetic sprites
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    canvas: int = 64
    n_frames: int = 32
    n_sprites: tuple[int, int] = (2, 4)
    shapes: tuple[str, ...] = ("square", "circle")
    size_range: tuple[int, int] = (10, 20)
    velocity_x: tuple[int, int] = (-3, 3)
    velocity_y: tuple[int, int] = (-3, 3)
    occlusion: bool = True
    texture_seed: int | None = None
    snap: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("n_sprites", "size_range", "velocity_x", "velocity_y", "shapes"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


@dataclass
class GroundTruth:
    segmentation: np.ndarray            # [L, H, W] int, 0 = background
    keypoints: np.ndarray               # [L, K, 2] (x, y) sprite centres
    correspondence: np.ndarray          # [L-1, H, W, 2] (x, y) target in next frame
    valid: np.ndarray                   # [L-1, H, W] bool, unoccluded
    positions: np.ndarray = field(default=None)   # [L, K, 2] top-left (x, y)
    sizes: np.ndarray = field(default=None)       # [K]

    @property
    def n_objects(self) -> int:
        return self.keypoints.shape[1]


def _smooth_noise(rng, h, w, cells):
    coarse = rng.random((3, cells, cells))
    return resize_bilinear(coarse, h, w)


def _sprite_mask(shape: str, size: int) -> np.ndarray:
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        yy, xx = np.mgrid[:size, :size] + 0.5
        r = size / 2
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    raise ValueError(f"unknown sprite shape {shape!r}")


def _trajectory(rng, start, vel, size, canvas, n_frames):
    pos = np.zeros((n_frames, 2), dtype=int)
    p = np.array(start, dtype=int)
    v = np.array(vel, dtype=int)
    for t in range(n_frames):
        pos[t] = p
        nxt = p + v
        for ax in range(2):
            if nxt[ax] < 0 or nxt[ax] + size > canvas:
                v[ax] = -v[ax]
                nxt[ax] = p[ax] + v[ax]
        p = np.clip(nxt, 0, canvas - size)
    return pos


def generate_synthetic_clip(spec: SyntheticSceneSpec, rng: np.random.Generator,
                            name: str = "") -> tuple[VideoClip, GroundTruth]:
    """Render textured sprites translating over a static textured background.

    Sprites bounce off the borders, so they always stay fully inside the
    canvas.  Later sprites are drawn on top of earlier ones.
    """
    c, n = spec.canvas, spec.n_frames
    if spec.size_range[1] > c:
        raise ValueError(f"sprite size {spec.size_range[1]} exceeds canvas {c}")
    if n < 2:
        raise ValueError("need at least 2 frames")
    tex_rng = np.random.default_rng(spec.texture_seed) if spec.texture_seed is not None else rng
    snap = max(1, spec.snap)
    k = int(rng.integers(spec.n_sprites[0], spec.n_sprites[1] + 1))
    bg = 0.25 + 0.5 * _smooth_noise(tex_rng, c, c, 4) + 0.1 * (tex_rng.random((3, c, c)) - 0.5)

    def snapped(lo, hi):
        vals = np.arange(lo, hi + 1)
        vals = vals[vals % snap == 0]
        return int(rng.choice(vals)) if len(vals) else lo

    for _attempt in range(100):
        sprites = []
        for _ in range(k):
            shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
            size = snapped(*spec.size_range)
            start = (snapped(0, c - size), snapped(0, c - size))
            vel = (snapped(*spec.velocity_x), snapped(*spec.velocity_y))
            sprites.append((shape, size, _trajectory(rng, start, vel, size, c, n)))
        if spec.occlusion or not _overlaps(sprites):
            break
    else:
        raise ValueError("could not place non-overlapping sprites; relax the scene settings")

    frames = np.empty((n, 3, c, c))
    seg = np.zeros((n, c, c), dtype=np.int32)
    kps = np.zeros((n, k, 2))
    positions = np.zeros((n, k, 2), dtype=int)
    sizes = np.array([s[1] for s in sprites])
    textures = []
    for shape, size, _ in sprites:
        base = tex_rng.uniform(0.0, 1.0, size=3)
        tex = 0.6 * base[:, None, None] + 0.4 * _smooth_noise(tex_rng, size, size, 3)
        stripes = (np.add.outer(np.arange(size), np.arange(size)) // 3) % 2
        tex = np.clip(tex * (0.75 + 0.25 * stripes), 0, 1)
        textures.append((tex, _sprite_mask(shape, size)))
    for t in range(n):
        img = bg.copy()
        for sid, ((shape, size, traj), (tex, mask)) in enumerate(zip(sprites, textures), 1):
            x, y = traj[t]
            region = img[:, y:y + size, x:x + size]
            region[:, mask] = tex[:, mask]
            seg[t, y:y + size, x:x + size][mask] = sid
            kps[t, sid - 1] = (x + size / 2 - 0.5, y + size / 2 - 0.5)
            positions[t, sid - 1] = (x, y)
        frames[t] = img
    corr, valid = _correspondence(seg, positions)
    gt = GroundTruth(seg, kps, corr, valid, positions, sizes)
    return VideoClip(np.clip(frames, 0, 1), name=name), gt


def _overlaps(sprites) -> bool:
    for i in range(len(sprites)):
        for j in range(i + 1, len(sprites)):
            si, sj = sprites[i][1], sprites[j][1]
            pi, pj = sprites[i][2], sprites[j][2]
            sep = ((pi[:, 0] + si <= pj[:, 0]) | (pj[:, 0] + sj <= pi[:, 0])
                   | (pi[:, 1] + si <= pj[:, 1]) | (pj[:, 1] + sj <= pi[:, 1]))
            if not sep.all():
                return True
    return False


def _correspondence(seg: np.ndarray, positions: np.ndarray):
    """Forward flow t -> t+1; pixels whose surface point is hidden are invalid."""
    n, h, w = seg.shape
    yy, xx = np.mgrid[:h, :w]
    corr = np.zeros((n - 1, h, w, 2), dtype=int)
    valid = np.zeros((n - 1, h, w), dtype=bool)
    for t in range(n - 1):
        ids = seg[t]
        delta = np.zeros((ids.max() + 1, 2), dtype=int)
        delta[1:] = positions[t + 1] - positions[t]
        tx = xx + delta[ids, 0]
        ty = yy + delta[ids, 1]
        inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        corr[t, ..., 0] = tx
        corr[t, ..., 1] = ty
        ok = inside.copy()
        ok[inside] = seg[t + 1][ty[inside], tx[inside]] == ids[inside]
        valid[t] = ok
    return corr, valid


# ---------------------------------------------------------------------------
# frame directories
# ---------------------------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm", ".pbm", ".jpg", ".jpeg")


def _numeric_key(path: Path):
    nums = re.findall(r"\d+", path.stem)
    return (int(nums[-1]) if nums else -1, path.name)


def list_frames(path) -> list[Path]:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    files = sorted((p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES),
                   key=_numeric_key)
    if not files:
        raise DataError(f"no image files in {path}")
    return files


def read_image(path) -> np.ndarray:
    """RGB image as [3, H, W] float in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def write_image(path, img: np.ndarray) -> None:
    """Write a [3, H, W] or [H, W] float image in [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img.transpose(1, 2, 0)
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def read_label_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.int32)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read label image {path}: {exc}") from exc


def write_label_image(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise DataError("label ids must lie in [0, 255]")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_clip_from_frames_dir(path) -> VideoClip:
    files = list_frames(path)
    frames = []
    shape = None
    for f in files:
        img = read_image(f)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DataError(f"{f.name} is {img.shape[2]}x{img.shape[1]}, expected "
                            f"{shape[2]}x{shape[1]}")
        frames.append(img)
    if len(frames) < 2:
        raise DataError(f"{path} holds a single frame; clips need at least 2")
    return VideoClip(np.stack(frames), name=Path(path).name)


def load_labels_dir(path) -> np.ndarray:
    return np.stack([read_label_image(f) for f in list_frames(path)])


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

def write_clip(root, clip: VideoClip, gt: GroundTruth | None = None) -> Path:
    """Write frames/, labels/ and keypoints.json under ``root/clip.name``."""
    d = Path(root) / clip.name
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        write_image(d / "frames" / f"frame_{t:05d}.png", frame)
    if gt is not None:
        (d / "labels").mkdir(exist_ok=True)
        for t, lab in enumerate(gt.segmentation):
            write_label_image(d / "labels" / f"frame_{t:05d}.png", lab)
        kp = {str(t): [[float(x), float(y)] for x, y in gt.keypoints[t]]
              for t in range(len(gt.keypoints))}
        (d / "keypoints.json").write_text(json.dumps(kp, indent=1, sort_keys=True))
        scene = {"positions": gt.positions.tolist(), "sizes": gt.sizes.tolist()}
        (d / "scene.json").write_text(json.dumps(scene, sort_keys=True))
    return d


@dataclass
class LabeledClip:
    clip: VideoClip
    segmentation: np.ndarray | None
    keypoints: np.ndarray | None
    sizes: np.ndarray | None = None
    positions: np.ndarray | None = None

    @property
    def name(self) -> str:
        return self.clip.name


def load_labeled_clip(path) -> LabeledClip:
    path = Path(path)
    clip = load_clip_from_frames_dir(path / "frames")
    clip.name = path.name
    seg = load_labels_dir(path / "labels") if (path / "labels").is_dir() else None
    if seg is not None and len(seg) != len(clip):
        raise DataError(f"{path}: {len(seg)} label maps for {len(clip)} frames")
    kps = sizes = positions = None
    if (path / "keypoints.json").exists():
        raw = json.loads((path / "keypoints.json").read_text())
        kps = np.array([raw[str(t)] for t in range(len(clip))], dtype=np.float64)
    if (path / "scene.json").exists():
        scene = json.loads((path / "scene.json").read_text())
        sizes = np.asarray(scene["sizes"])
        positions = np.asarray(scene["positions"])
    return LabeledClip(clip, seg, kps, sizes, positions)


def load_dataset(root, split: str | None = None) -> list[LabeledClip]:
    root = Path(root)
    index_file = root / "index.json"
    if not index_file.exists():
        raise DataError(f"{root} has no index.json")
    index = json.loads(index_file.read_text())
    names = index["clips"] if split is None else index.get("splits", {}).get(split)
    if names is None:
        raise DataError(f"split {split!r} not found in {index_file}")
    return [load_labeled_clip(root / n) for n in names]


def generate_dataset(spec: SyntheticSceneSpec, out_dir, n_clips: int, seed: int,
                     n_heldout: int = 0) -> Path:
    """Write ``n_clips`` synthetic clips plus ``index.json``.

    The last ``n_heldout`` clips form the ``heldout`` split; the rest are
    ``train``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(n_clips):
        clip, gt = generate_synthetic_clip(spec, rng, name=f"clip_{i:04d}")
        write_clip(out, clip, gt)
        names.append(clip.name)
    n_train = n_clips - n_heldout
    index = {"clips": names, "spec": spec.to_dict(), "seed": seed,
             "splits": {"train": names[:n_train], "heldout": names[n_train:]}}
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return out
