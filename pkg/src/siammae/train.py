"""AdamW with warmup + cosine decay, the training loop and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import AugmentParams, RepeatedSampler, VideoClip, sample_batch
from .model import MaskSpec, ModelConfig, SiamMAEModel, no_weight_decay

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Non-finite loss or gradient."""


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 1.5e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_epochs: float = 40
    total_epochs: float = 400
    total_steps: int | None = None
    warmup_steps: int | None = None
    batch_size: int = 16
    repeated_sampling: int = 2
    seed: int = 0
    gap_range: tuple[int, int] = (4, 48)
    crop_scale: tuple[float, float] = (0.5, 1.0)
    hflip_prob: float = 0.5
    color_jitter: bool = False
    independent_aug: bool = False
    augment: bool = True
    grad_clip: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.gap_range = tuple(self.gap_range)
        self.crop_scale = tuple(self.crop_scale)
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs exceeds total_epochs")
        if self.total_steps is not None and self.warmup_steps is not None \
                and self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps exceeds total_steps")
        if self.base_lr <= 0 or self.batch_size < 1 or self.repeated_sampling < 1:
            raise ValueError("learning rate, batch size and repeated sampling must be positive")

    def augment_params(self) -> AugmentParams | None:
        if not self.augment:
            return None
        return AugmentParams(crop_scale_range=self.crop_scale, hflip_prob=self.hflip_prob,
                             color_jitter=self.color_jitter, independent=self.independent_aug)

    def schedule(self, n_clips: int) -> tuple[int, int]:
        """(total_steps, warmup_steps) for a dataset of ``n_clips``."""
        per_epoch = max(1, math.ceil(n_clips * self.repeated_sampling / self.batch_size))
        total = self.total_steps if self.total_steps is not None \
            else int(round(self.total_epochs * per_epoch))
        if self.warmup_steps is not None:
            warm = self.warmup_steps
        elif self.total_steps is not None:
            warm = int(round(total * self.warmup_epochs / self.total_epochs))
        else:
            warm = int(round(self.warmup_epochs * per_epoch))
        return total, min(warm, total)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0, then half-cosine decay to exactly 0 at ``total_steps``."""
    if warmup_steps > total_steps:
        raise ValueError(f"warmup {warmup_steps} exceeds total {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step >= total_steps:
        return 0.0
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, T.Tensor], state: OptimState, lr: float, cfg: TrainConfig,
               decay_mask: dict[str, bool] | None = None) -> None:
    """In-place decoupled-weight-decay Adam update of ``params`` from their ``.grad``.

    ``decay_mask[name]`` False skips weight decay for that tensor.
    """
    for name, p in params.items():
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name} at step {state.step}")
    state.step += 1
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        decay = cfg.weight_decay if (decay_mask is None or decay_mask.get(name, True)) else 0.0
        if decay:
            p.data *= 1.0 - lr * decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def clip_grads(params: dict[str, T.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params.values() if p.grad is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= s
    return total


@dataclass
class TrainResult:
    loss_log: list[tuple[int, float, float]]
    checkpoints: list[Path]
    step: int


class Trainer:
    def __init__(self, model: SiamMAEModel, clips: Sequence[VideoClip], cfg: TrainConfig,
                 mask: MaskSpec):
        self.model = model
        self.clips = list(clips)
        self.cfg = cfg
        self.mask = mask
        self.params = dict(model.named_parameters())
        self.decay_mask = {n: not no_weight_decay(n, p) for n, p in self.params.items()}
        self.state = OptimState()
        self.total_steps, self.warmup_steps = cfg.schedule(len(self.clips))
        self.sampler = RepeatedSampler(len(self.clips), cfg.repeated_sampling,
                                       cfg.batch_size, cfg.seed)
        self.loss_log: list[tuple[int, float, float]] = []

    def step_once(self) -> float:
        step = self.state.step
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 2, step])
        idx = self.sampler.indices(step)
        f1, f2 = sample_batch(self.clips, idx, rng, cfg.gap_range, cfg.augment_params(),
                              self.model.pcfg.image_size)
        lr = lr_at(step, self.total_steps, self.warmup_steps, cfg.base_lr)
        T.zero_grads(self.params.values())
        loss, _ = self.model.forward_loss(f1, f2, self.mask, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        loss.backward()
        if cfg.grad_clip:
            clip_grads(self.params, cfg.grad_clip)
        adamw_step(self.params, self.state, lr, cfg, self.decay_mask)
        T.zero_grads(self.params.values())
        self.loss_log.append((step, lr, value))
        return value

    def run(self, steps: int | None = None, out_dir=None,
            callback: Callable[[int, float], None] | None = None) -> TrainResult:
        end = self.total_steps if steps is None else min(self.total_steps, self.state.step + steps)
        ckpts = []
        every = self.cfg.checkpoint_every
        while self.state.step < end:
            value = self.step_once()
            if callback is not None:
                callback(self.state.step, value)
            if out_dir is not None and every and self.state.step % every == 0:
                ckpts.append(save_checkpoint(self, Path(out_dir) / f"ckpt_{self.state.step:06d}"))
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_loss_csv(out / "loss.csv", self.loss_log)
            ckpts.append(save_checkpoint(self, out / "final"))
        return TrainResult(list(self.loss_log), ckpts, self.state.step)


def train(model: SiamMAEModel, clips: Sequence[VideoClip], cfg: TrainConfig,
          mask: MaskSpec | None = None, out_dir=None, callback=None) -> TrainResult:
    trainer = Trainer(model, clips, cfg, mask or MaskSpec())
    return trainer.run(out_dir=out_dir, callback=callback)


def write_loss_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in rows:
            w.writerow([step, repr(float(lr)), repr(float(loss))])


def read_loss_csv(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [(int(row["step"]), float(row["lr"]), float(row["loss"])) for row in r]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return self.manifest["step"]

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.manifest["model"])

    def mask_spec(self) -> MaskSpec:
        return MaskSpec(**self.manifest["mask"])

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.manifest["train"])

    def build_model(self) -> SiamMAEModel:
        model = SiamMAEModel(self.model_config(), np.random.default_rng(0))
        load_params(model, self.tensors)
        return model


def load_params(model: SiamMAEModel, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = set(params) - {n[len("param/"):] for n in tensors if n.startswith("param/")}
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        src = tensors[f"param/{name}"]
        if src.shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {src.shape} != model {p.shape}")
        p.data = src.astype(p.data.dtype, copy=True)


def save_checkpoint(trainer: Trainer | SiamMAEModel, path, mask: MaskSpec | None = None,
                    cfg: TrainConfig | None = None) -> Path:
    """Write ``manifest.json`` + ``weights.bin`` (little-endian float32)."""
    if isinstance(trainer, Trainer):
        model, state = trainer.model, trainer.state
        mask, cfg = trainer.mask, trainer.cfg
    else:
        model, state = trainer, OptimState()
    mask = mask or MaskSpec()
    cfg = cfg or TrainConfig()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = [(f"param/{n}", p.data) for n, p in model.named_parameters()]
    entries += [(f"adam_m/{n}", a) for n, a in sorted(state.m.items())]
    entries += [(f"adam_v/{n}", a) for n, a in sorted(state.v.items())]
    directory = []
    offset = 0
    blobs = []
    for name, arr in entries:
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                          "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    blob = b"".join(blobs)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model": model.cfg.to_dict(),
        "mask": asdict(mask),
        "train": cfg.to_dict(),
        "step": state.step,
        "rng": {"seed": cfg.seed, "step": state.step,
                "scheme": "numpy default_rng([seed, stream, step])"},
        "tensors": directory,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    (path / "weights.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "weights.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"truncated blob: {len(blob)} bytes, manifest says "
                              f"{manifest['blob_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError("weights.bin checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"tensor {e['name']} extends past end of blob")
        tensors[e["name"]] = np.frombuffer(blob[e["offset"]:end], dtype="<f4").reshape(e["shape"]).copy()
    return Checkpoint(manifest, tensors)


def resume_trainer(ckpt: Checkpoint, clips: Sequence[VideoClip]) -> Trainer:
    model = ckpt.build_model()
    trainer = Trainer(model, clips, ckpt.train_config(), ckpt.mask_spec())
    trainer.state.step = ckpt.step
    for name in trainer.params:
        if f"adam_m/{name}" in ckpt.tensors:
            trainer.state.m[name] = ckpt.tensors[f"adam_m/{name}"].astype(np.float32)
            trainer.state.v[name] = ckpt.tensors[f"adam_v/{name}"].astype(np.float32)
    return trainer
