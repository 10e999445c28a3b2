"""Frame-pair masked autoencoder with a weight-shared encoder.

Encoders: ``siamese`` (one weight set, each frame encoded on its own) or
``joint`` (visible tokens of both frames concatenated).  Decoders:
``cross_self``, ``cross`` or ``joint``.  The decoder regresses per-patch
normalized pixels at masked positions.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .nn import (Block, BlockConfig, LayerNorm, Linear, Module, PatchifyConfig,
                 ViTEncoder, patchify, sincos_pos_embed_2d)
from .tensor import Tensor, ShapeError

ENCODERS = ("joint", "siamese")
DECODERS = ("joint", "cross", "cross_self")


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    scheme: str = "random"
    ratio_f1: float = 0.0
    ratio_f2: float = 0.95
    symmetric: bool = False

    def __post_init__(self):
        if self.scheme not in ("random", "grid"):
            raise ValueError(f"unknown masking scheme {self.scheme!r}")
        for r in (self.ratio_f1, self.ratio_f2):
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"masking ratio {r} outside [0, 1]")

    @classmethod
    def asymmetric(cls, ratio: float = 0.95) -> "MaskSpec":
        return cls("random", 0.0, ratio, False)

    @classmethod
    def symmetric_ratio(cls, ratio: float) -> "MaskSpec":
        return cls("random", ratio, ratio, True)

    @classmethod
    def parse(cls, text: str) -> "MaskSpec":
        """Parse the command-line shorthand.

        ``0.95a`` asymmetric, ``0.75s`` symmetric, ``grid`` checkerboard on
        both frames, ``grida`` checkerboard on the second frame only.
        """
        text = text.strip().lower()
        if text in ("grid", "grids"):
            return cls("grid", 0.5, 0.5, True)
        if text == "grida":
            return cls("grid", 0.0, 0.5, False)
        kind = text[-1]
        if kind not in "as":
            raise ValueError(f"mask spec {text!r} must end in 'a' or 's'")
        ratio = float(text[:-1])
        return cls.asymmetric(ratio) if kind == "a" else cls.symmetric_ratio(ratio)

    def label(self) -> str:
        if self.scheme == "grid":
            return "grid" if self.symmetric else "grida"
        if self.symmetric:
            return f"{self.ratio_f2:g}s"
        return f"{self.ratio_f2:g}a"

    def ratio(self, role: str) -> float:
        if role not in ("f1", "f2"):
            raise ValueError(f"frame role must be 'f1' or 'f2', got {role!r}")
        return self.ratio_f1 if role == "f1" else self.ratio_f2


@dataclass
class MaskPattern:
    kept: np.ndarray
    masked: np.ndarray

    @property
    def n_patches(self) -> int:
        return len(self.kept) + len(self.masked)


def n_kept(n_patches: int, ratio: float) -> int:
    # exact decimal arithmetic so 0.05 * 50 is a true tie (half-to-even -> 2)
    keep = (1 - Fraction(repr(float(ratio)))) * n_patches
    return max(1, round(keep))


def checkerboard(grid_h: int, grid_w: int | None = None) -> np.ndarray:
    grid_w = grid_h if grid_w is None else grid_w
    r, c = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return np.flatnonzero((r + c) % 2 == 0)


def sample_mask(n_patches: int, spec: MaskSpec, frame_role: str,
                rng: np.random.Generator) -> MaskPattern:
    if n_patches < 1:
        raise ValueError("need at least one patch")
    ratio = spec.ratio(frame_role)
    all_idx = np.arange(n_patches)
    if spec.scheme == "grid" and ratio > 0:
        side = int(round(np.sqrt(n_patches)))
        if side * side == n_patches:
            kept = checkerboard(side)
        else:
            kept = all_idx[::2]
    else:
        k = n_kept(n_patches, ratio)
        kept = np.sort(rng.permutation(n_patches)[:k]) if k < n_patches else all_idx
    masked = np.setdiff1d(all_idx, kept, assume_unique=True)
    return MaskPattern(kept=kept, masked=masked)


def sample_batch_masks(batch: int, n_patches: int, spec: MaskSpec, role: str,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    pats = [sample_mask(n_patches, spec, role, rng) for _ in range(batch)]
    return np.stack([p.kept for p in pats]), np.stack([p.masked for p in pats])


# ---------------------------------------------------------------------------
# architecture
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchVariant:
    encoder: str = "siamese"
    decoder: str = "cross_self"

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")

    @classmethod
    def parse(cls, text: str) -> "ArchVariant":
        enc, dec = (s.strip() for s in text.split(","))
        return cls(enc, dec)

    def label(self) -> str:
        return f"{self.encoder},{self.decoder}"


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    encoder: str = "siamese"
    decoder: str = "cross_self"
    norm_pix_eps: float = 1e-6

    @property
    def patchify(self) -> PatchifyConfig:
        return PatchifyConfig(self.image_size, self.patch_size, self.channels)

    @property
    def encoder_blocks(self) -> BlockConfig:
        return BlockConfig(self.dim, self.heads, self.mlp_ratio, self.depth)

    @property
    def arch(self) -> ArchVariant:
        return ArchVariant(self.encoder, self.decoder)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def vit_s16(cls, **kw) -> "ModelConfig":
        base = dict(image_size=224, patch_size=16, dim=384, depth=12, heads=6,
                    decoder_dim=192, decoder_depth=4, decoder_heads=6)
        base.update(kw)
        return cls(**base)


def normalized_targets(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-patch zero-mean, unit-variance pixels."""
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mu) / np.sqrt(var + eps)


@dataclass
class Diagnostics:
    kept_f1: int
    kept_f2: int
    attention_entropy: float
    extra: dict = field(default_factory=dict)


class SiamMAEModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.arch = cfg.arch
        pcfg = cfg.patchify
        self.pcfg = pcfg
        self.encoder = ViTEncoder(pcfg, cfg.encoder_blocks, rng)
        self.decoder_embed = Linear(cfg.dim, cfg.decoder_dim, rng)
        self.mask_token = Tensor(rng.normal(0.0, 0.02, size=cfg.decoder_dim), requires_grad=True)
        self.decoder_pos_embed = Tensor(sincos_pos_embed_2d(pcfg.grid, cfg.decoder_dim))
        mode = {"joint": "self", "cross": "cross", "cross_self": "cross_self"}[cfg.decoder]
        self.decoder_blocks = [Block(cfg.decoder_dim, cfg.decoder_heads, rng, cfg.mlp_ratio, mode)
                               for _ in range(cfg.decoder_depth)]
        self.decoder_norm = LayerNorm(cfg.decoder_dim)
        self.decoder_pred = Linear(cfg.decoder_dim, pcfg.patch_dim, rng)

    # -- encoder --------------------------------------------------------------
    def encode(self, p1, p2, kept1, kept2) -> tuple[Tensor, Tensor]:
        """Encode visible patches; returns patch latents (CLS dropped).

        ``p1``, ``p2``: [B, n, P] patches.  ``kept1``, ``kept2``: [B, k]
        visible indices.  Masked patches never reach the encoder.
        """
        enc = self.encoder
        if kept1.shape[-1] == 0 or kept2.shape[-1] == 0:
            raise ValueError("each frame needs at least one visible patch")
        if self.arch.encoder == "siamese":
            z1 = enc(p1, index=kept1)
            z2 = enc(p2, index=kept2)
            return T.slice_axis(z1, 1, z1.shape[-2], -2), T.slice_axis(z2, 1, z2.shape[-2], -2)
        x1 = enc.embed(p1, index=kept1)
        x2 = enc.embed(p2, index=kept2, with_cls=False)
        z = enc.run_blocks(T.concat([x1, x2], axis=-2))
        k1 = kept1.shape[-1]
        return T.slice_axis(z, 1, 1 + k1, -2), T.slice_axis(z, 1 + k1, z.shape[-2], -2)

    # -- decoder --------------------------------------------------------------
    def _full_tokens(self, latent: Tensor, kept: np.ndarray, masked: np.ndarray) -> Tensor:
        """Visible decoder tokens plus [MASK] tokens, in patch order, with positions."""
        x = self.decoder_embed(latent)
        b, k, d = x.shape
        n = k + masked.shape[-1]
        if masked.shape[-1]:
            mask = T.expand(self.mask_token, (b, masked.shape[-1], d))
            x = T.concat([x, mask], axis=1)
            restore = np.argsort(np.concatenate([kept, masked], axis=-1), axis=-1, kind="stable")
            x = T.gather_rows(x, restore)
        if n != self.pcfg.n_patches:
            raise ShapeError(f"kept + masked = {n}, expected {self.pcfg.n_patches}")
        return x + self.decoder_pos_embed

    def decode(self, z1: Tensor, z2: Tensor, masks) -> dict[str, Tensor]:
        """Predict normalized pixels at masked positions.

        ``masks`` is ``(kept1, masked1, kept2, masked2)``.  Returns a dict
        with ``'f2'`` -> [B, |masked_f2|, P] and, for the joint decoder under
        symmetric masking, ``'f1'`` as well.
        """
        kept1, masked1, kept2, masked2 = masks
        x1 = self._full_tokens(z1, kept1, masked1)
        x2 = self._full_tokens(z2, kept2, masked2)
        n = self.pcfg.n_patches
        out = {}
        if self.arch.decoder == "joint":
            x = T.concat([x1, x2], axis=1)
            for blk in self.decoder_blocks:
                x = blk(x)
            x = self.decoder_norm(x)
            y1 = T.slice_axis(x, 0, n, 1)
            y2 = T.slice_axis(x, n, 2 * n, 1)
            if masked1.shape[-1]:
                out["f1"] = self.decoder_pred(T.gather_rows(y1, masked1))
        else:
            y2 = x2
            for blk in self.decoder_blocks:
                y2 = blk(y2, x1)
            y2 = self.decoder_norm(y2)
        if masked2.shape[-1]:
            out["f2"] = self.decoder_pred(T.gather_rows(y2, masked2))
        return out

    # -- loss -----------------------------------------------------------------
    def forward_loss(self, f1: np.ndarray, f2: np.ndarray, spec: MaskSpec,
                     rng: np.random.Generator | None = None, masks=None):
        """Full training forward on a batch of frame pairs [B, C, H, W].

        Returns ``(loss, diagnostics)``.
        """
        f1 = np.asarray(f1)
        f2 = np.asarray(f2)
        if f1.ndim == 3:
            f1, f2 = f1[None], f2[None]
        dtype = T.default_dtype()
        p1 = patchify(f1, self.pcfg).astype(dtype)
        p2 = patchify(f2, self.pcfg).astype(dtype)
        b, n = p1.shape[:2]
        if masks is None:
            if rng is None:
                raise ValueError("need an rng or explicit masks")
            kept1, masked1 = sample_batch_masks(b, n, spec, "f1", rng)
            kept2, masked2 = sample_batch_masks(b, n, spec, "f2", rng)
        else:
            kept1, masked1, kept2, masked2 = (np.asarray(m) for m in masks)
            if kept1.ndim == 1:
                kept1, masked1, kept2, masked2 = (np.broadcast_to(m, (b, m.shape[0]))
                                                  for m in (kept1, masked1, kept2, masked2))
        blocks = self.decoder_blocks
        for blk in blocks:
            blk.attn.keep_weights = True
        z1, z2 = self.encode(p1, p2, kept1, kept2)
        preds = self.decode(z1, z2, (kept1, masked1, kept2, masked2))
        eps = self.cfg.norm_pix_eps
        losses = []
        for role, patches, masked in (("f2", p2, masked2), ("f1", p1, masked1)):
            if role not in preds:
                continue
            target = normalized_targets(np.take_along_axis(patches, masked[..., None], axis=1), eps)
            losses.append((preds[role], target.astype(dtype)))
        if not losses:
            raise ValueError("no masked patches to reconstruct")
        loss = masked_mse(losses)
        entropy = _mean_entropy([blk.attn.last_weights for blk in blocks])
        for blk in blocks:
            blk.attn.keep_weights = False
            blk.attn.last_weights = None
        diag = Diagnostics(kept_f1=int(kept1.shape[-1]), kept_f2=int(kept2.shape[-1]),
                           attention_entropy=entropy)
        return loss, diag

    # -- inference ------------------------------------------------------------
    def features(self, frames: np.ndarray) -> np.ndarray:
        """Encoder patch tokens for unmasked frames: [B, n, D] (CLS dropped)."""
        frames = np.asarray(frames)
        single = frames.ndim == 3
        if single:
            frames = frames[None]
        p = patchify(frames, self.pcfg).astype(T.default_dtype())
        z = self.encoder(p).data[:, 1:]
        return z[0] if single else z

    def cls_attention(self, frame: np.ndarray) -> np.ndarray:
        """Raw final-layer attention from CLS: [heads, 1 + n_patches]."""
        if self.encoder.embed.cls_token is None:
            raise ValueError("model has no CLS token")
        p = patchify(np.asarray(frame)[None], self.pcfg).astype(T.default_dtype())
        enc = self.encoder
        x = enc.embed(p)
        for blk in enc.blocks[:-1]:
            x = blk(x)
        last = enc.blocks[-1]
        _, w = last.attn(last.norm1(x), return_weights=True)
        return w[0, :, 0, :]


def masked_mse(pairs) -> Tensor:
    """Mean squared error over every masked patch and pixel in ``pairs``."""
    total = None
    count = 0
    for pred, target in pairs:
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
        s = T.square(pred - Tensor(target, dtype=pred.dtype)).sum()
        total = s if total is None else total + s
        count += target.size
    if count == 0:
        raise ValueError("empty masked set")
    return T.scale(total, 1.0 / count)


def reconstruction_loss(predicted: Tensor, target_frame: np.ndarray, mask: MaskPattern,
                        cfg: PatchifyConfig, eps: float = 1e-6) -> Tensor:
    """Single-frame loss: predictions at ``mask.masked`` vs normalized target patches."""
    if len(mask.masked) == 0:
        raise ValueError("empty masked set")
    patches = patchify(np.asarray(target_frame), cfg)[mask.masked]
    target = normalized_targets(patches, eps)
    return masked_mse([(predicted, target)])


def cls_attention_maps(frame: np.ndarray, model: SiamMAEModel) -> np.ndarray:
    """Per-head CLS->patch attention of the final encoder layer, min-max scaled.

    Returns [heads, grid, grid] in [0, 1].
    """
    w = model.cls_attention(frame)[:, 1:]
    g = model.pcfg.grid
    lo = w.min(axis=1, keepdims=True)
    hi = w.max(axis=1, keepdims=True)
    scaled = (w - lo) / np.where(hi > lo, hi - lo, 1.0)
    return scaled.reshape(-1, g, g)


def _mean_entropy(weights) -> float:
    vals = []
    for w in weights:
        if w is None:
            continue
        w = np.asarray(w, dtype=np.float64)
        vals.append(float(-(w * np.log(w + 1e-12)).sum(axis=-1).mean()))
    return float(np.mean(vals)) if vals else float("nan")


def no_weight_decay(name: str, param: Tensor) -> bool:
    """Biases, norm gains, CLS and [MASK] embeddings are not decayed."""
    return param.ndim < 2 or name.endswith("cls_token") or name.endswith("mask_token")
