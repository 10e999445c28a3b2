"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numpy as np

from .data import VideoClip


def _to_chw(arr: np.ndarray, channels: int) -> np.ndarray:
    # channel-last input ([..., H, W, C]) is moved to channel-first
    if arr.shape[-3] != channels and arr.shape[-1] == channels:
        arr = np.moveaxis(arr, -1, -3)
    if arr.shape[-3] != channels:
        raise ValueError(f"expected {channels} channels, got array of shape {arr.shape}")
    return arr


def _as_unit_float(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("frames contain NaN or infinite values")
    return arr


def check_frames(X, image_size: int | None = None, channels: int = 3) -> np.ndarray:
    """Return frames as float [n, C, H, W]; a single frame becomes n = 1."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"frames must be [n, C, H, W] or [n, H, W, C], got {arr.shape}")
    arr = _as_unit_float(_to_chw(arr, channels))
    if image_size is not None and arr.shape[-2:] != (image_size, image_size):
        raise ValueError(f"frames are {arr.shape[-2]}x{arr.shape[-1]}, model expects "
                         f"{image_size}x{image_size}")
    return arr


def check_clips(X, channels: int = 3, min_length: int = 2) -> list[VideoClip]:
    """Normalise clips to a list of :class:`VideoClip` with [L, C, H, W] frames."""
    if isinstance(X, VideoClip):
        X = [X]
    elif isinstance(X, np.ndarray) and X.ndim == 4:
        X = [X]
    clips = []
    shape = None
    for i, item in enumerate(X):
        if isinstance(item, VideoClip):
            frames, name = item.frames, item.name
        elif isinstance(getattr(item, "clip", None), VideoClip):
            frames, name = item.clip.frames, item.clip.name
        else:
            frames, name = np.asarray(item), f"clip_{i}"
        if frames.ndim != 4:
            raise ValueError(f"clip {i} must be [L, C, H, W], got {frames.shape}")
        frames = _as_unit_float(_to_chw(frames, channels))
        if len(frames) < min_length:
            raise ValueError(f"clip {i} has {len(frames)} frames, need {min_length}")
        if shape is None:
            shape = frames.shape[1:]
        elif frames.shape[1:] != shape:
            raise ValueError(f"clip {i} frames are {frames.shape[1:]}, expected {shape}")
        clips.append(VideoClip(frames, name=name))
    if not clips:
        raise ValueError("no clips given")
    return clips
