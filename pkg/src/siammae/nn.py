"""Vision-transformer building blocks on top of :mod:`siammae.tensor`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchifyConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError(f"image size {self.image_size} is not divisible by "
                             f"patch size {self.patch_size}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels


@dataclass(frozen=True)
class BlockConfig:
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    depth: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ShapeError(f"dim {self.dim} is not divisible by {self.heads} heads")


VIT_S = BlockConfig(dim=384, heads=6, mlp_ratio=4.0, depth=12)


@dataclass
class TokenSequence:
    """Per-frame tokens plus the grid position of each one.

    ``grid_positions[i]`` is ``(row, col)`` for a patch token and
    ``(-1, -1)`` for the CLS token, which when present sits at index 0.
    """
    tokens: Tensor
    grid_positions: np.ndarray

    @property
    def has_cls(self) -> bool:
        return len(self.grid_positions) > 0 and self.grid_positions[0][0] < 0

    def __len__(self) -> int:
        return len(self.grid_positions)


# ---------------------------------------------------------------------------
# patches & positions
# ---------------------------------------------------------------------------

def patchify(frames: np.ndarray, cfg: PatchifyConfig) -> np.ndarray:
    """[..., C, H, W] -> [..., n_patches, N*N*C].

    Patches are ordered row-major over the grid; each is flattened in
    (row-in-patch, col-in-patch, channel) order.
    """
    frames = np.asarray(frames)
    *lead, c, h, w = frames.shape
    if h != cfg.image_size or w != cfg.image_size:
        raise ShapeError(f"frame is {h}x{w}, expected {cfg.image_size}x{cfg.image_size}")
    if c != cfg.channels:
        raise ShapeError(f"frame has {c} channels, expected {cfg.channels}")
    n, g = cfg.patch_size, cfg.grid
    x = frames.reshape(*lead, c, g, n, g, n)
    k = len(lead)
    # (..., c, gh, ph, gw, pw) -> (..., gh, gw, ph, pw, c)
    x = x.transpose(*range(k), k + 1, k + 3, k + 2, k + 4, k)
    return x.reshape(*lead, g * g, n * n * c)


def unpatchify(patches: np.ndarray, cfg: PatchifyConfig) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, npatch, pdim = patches.shape
    if npatch != cfg.n_patches or pdim != cfg.patch_dim:
        raise ShapeError(f"patches have shape {patches.shape[-2:]}, expected "
                         f"({cfg.n_patches}, {cfg.patch_dim})")
    n, g, c = cfg.patch_size, cfg.grid, cfg.channels
    k = len(lead)
    x = patches.reshape(*lead, g, g, n, n, c)
    x = x.transpose(*range(k), k + 4, k, k + 2, k + 1, k + 3)
    return x.reshape(*lead, c, g * n, g * n)


def grid_positions(grid: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return np.stack([rows, cols], axis=1)


def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    if dim % 2:
        raise ShapeError(f"1-D sin-cos embedding needs an even dim, got {dim}")
    freqs = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    ang = np.outer(np.asarray(positions, dtype=np.float64).reshape(-1), freqs)
    out = np.empty((ang.shape[0], dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def sincos_pos_embed_2d(grid: tuple[int, int] | int, dim: int) -> np.ndarray:
    """Fixed [h*w, dim] table: first half encodes the row, second the column.

    Within each half, sin and cos alternate at geometric frequencies with
    base 10000.
    """
    if dim % 4:
        raise ShapeError(f"2-D sin-cos embedding needs dim divisible by 4, got {dim}")
    h, w = (grid, grid) if isinstance(grid, int) else grid
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.concatenate([sincos_1d(dim // 2, rows), sincos_1d(dim // 2, cols)], axis=1)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad``;
    submodules may be attributes or lists of modules.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(xavier_uniform(rng, d_in, d_out))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear layer expects last dim {self.weight.shape[0]}, "
                             f"got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head scaled dot-product attention with separate q and kv maps."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None
        self.keep_weights = False

    def __call__(self, x: Tensor, context: Tensor | None = None,
                 return_weights: bool = False):
        return attention(x, x if context is None else context, self,
                         return_weights=return_weights)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, heads, d // heads)
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2).reshape(*lead, t, h * dh)


def attention(queries, keys_values, params: Attention, heads: int | None = None,
              return_weights: bool = False):
    """Attend from ``queries`` [..., Tq, D] to ``keys_values`` [..., Tk, D].

    Returns the projected output, and the [..., heads, Tq, Tk] attention
    weights as a numpy array when ``return_weights`` is set.
    """
    if isinstance(queries, TokenSequence):
        queries = queries.tokens
    if isinstance(keys_values, TokenSequence):
        keys_values = keys_values.tokens
    heads = heads or params.heads
    d = queries.shape[-1]
    if d % heads:
        raise ShapeError(f"dim {d} is not divisible by {heads} heads")
    if keys_values.shape[-1] != d:
        raise ShapeError(f"query dim {d} != key/value dim {keys_values.shape[-1]}")
    q = _split_heads(params.q(queries), heads)
    kv = params.kv(keys_values)
    k = _split_heads(T.slice_axis(kv, 0, d, -1), heads)
    v = _split_heads(T.slice_axis(kv, d, 2 * d, -1), heads)
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d // heads))
    weights = T.softmax(scores, axis=-1)
    out = params.proj(_merge_heads(T.matmul(weights, v)))
    if params.keep_weights:
        params.last_weights = weights.data
    if return_weights:
        return out, weights.data
    return out


class Block(Module):
    """Pre-norm transformer block.

    ``mode='self'``: x + Attn(LN(x)), then + MLP(LN(.)).
    ``mode='cross'``: same, attending to an external context.
    ``mode='cross_self'``: cross-attention, then self-attention, then MLP.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: float = 4.0, mode: str = "self"):
        if mode not in ("self", "cross", "cross_self"):
            raise ValueError(f"unknown block mode {mode!r}")
        self.mode = mode
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        if mode == "cross_self":
            self.norm_self = LayerNorm(dim)
            self.self_attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        if self.mode == "self":
            x = x + self.attn(self.norm1(x))
        else:
            if context is None:
                raise ValueError(f"{self.mode} block needs a context sequence")
            x = x + self.attn(self.norm1(x), context)
            if self.mode == "cross_self":
                x = x + self.self_attn(self.norm_self(x))
        return x + self.mlp(self.norm2(x))

    def zero_output_projections(self) -> None:
        for attn in (self.attn, getattr(self, "self_attn", None)):
            if attn is not None:
                attn.proj.weight.data[...] = 0
                attn.proj.bias.data[...] = 0
        self.mlp.fc2.weight.data[...] = 0
        self.mlp.fc2.bias.data[...] = 0


def transformer_block(x: Tensor, params: Block, context: Tensor | None = None) -> Tensor:
    return params(x, context)


class PatchEmbed(Module):
    """Linear patch projection, fixed 2-D sin-cos positions and a CLS token.

    The CLS token gets a zero positional vector.  There is no temporal
    embedding: every frame uses the same table.
    """

    def __init__(self, cfg: PatchifyConfig, dim: int, rng: np.random.Generator,
                 cls_token: bool = True):
        self.cfg = cfg
        self.proj = Linear(cfg.patch_dim, dim, rng)
        self.pos_embed = Tensor(sincos_pos_embed_2d(cfg.grid, dim))
        self.cls_token = _param(rng.normal(0.0, 0.02, size=dim)) if cls_token else None

    def __call__(self, patches, index=None, with_cls: bool = True) -> Tensor:
        """Embed [..., n, P] patches; ``index`` selects visible ones first.

        ``index`` is [k] or [B, k] patch indices.  Returns [..., (1+)k, D].
        """
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        pos = self.pos_embed
        if index is not None:
            index = np.asarray(index)
            x = T.gather_rows(x, index)
            pos = Tensor(pos.data[index])
        x = self.proj(x) + pos
        if with_cls and self.cls_token is not None:
            lead = x.shape[:-2]
            cls = T.expand(self.cls_token, (*lead, 1, x.shape[-1]))
            x = T.concat([cls, x], axis=-2)
        return x


def embed_tokens(patches, embed: PatchEmbed, index=None) -> TokenSequence:
    tokens = embed(patches, index=index)
    n = embed.cfg.n_patches
    idx = np.arange(n) if index is None else np.asarray(index)
    if idx.ndim > 1:
        raise ShapeError("embed_tokens builds one sequence; use PatchEmbed for batches")
    pos = grid_positions(embed.cfg.grid)[idx]
    if embed.cls_token is not None:
        pos = np.concatenate([[[-1, -1]], pos], axis=0)
    return TokenSequence(tokens, pos)


class ViTEncoder(Module):
    """Patch embedding, a stack of self-attention blocks and a final norm."""

    def __init__(self, pcfg: PatchifyConfig, bcfg: BlockConfig, rng: np.random.Generator):
        self.pcfg = pcfg
        self.bcfg = bcfg
        self.embed = PatchEmbed(pcfg, bcfg.dim, rng)
        self.blocks = [Block(bcfg.dim, bcfg.heads, rng, bcfg.mlp_ratio)
                       for _ in range(bcfg.depth)]
        self.norm = LayerNorm(bcfg.dim)

    def run_blocks(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def __call__(self, patches, index=None) -> Tensor:
        return self.run_blocks(self.embed(patches, index=index))
