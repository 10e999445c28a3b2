"""Release gate: gradient checks, masking invariants and metric oracles.

``run_verify`` returns a :class:`VerifyReport`; the ``verify`` command
prints it and exits nonzero if any check fails.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import metrics as M
from . import tensor as T
from .model import MaskSpec, ModelConfig, SiamMAEModel, checkerboard, n_kept, sample_mask
from .nn import Attention, Block, attention
from .tensor import Tensor, grad_check, precision


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float | None = None
    detail: str = ""


@dataclass
class VerifyReport:
    checks: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            err = "" if c.max_error is None else f" max_rel_err={c.max_error:.3e}"
            extra = f" ({c.detail})" if c.detail else ""
            out.append(f"{'PASS' if c.passed else 'FAIL'} {c.name}{err}{extra}")
        out.append(f"{'PASS' if self.passed else 'FAIL'} overall "
                   f"[{len(self.checks)} checks, {self.seconds:.1f}s]")
        return out


def _param(rng, shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _weighted(out: Tensor) -> Tensor:
    # fixed random projection to a scalar so every output entry contributes
    w = np.random.default_rng(out.data.size).normal(size=out.shape)
    return (out * Tensor(w)).sum()


def _op_cases() -> dict[str, Callable]:
    """name -> builder(rng) returning (scalar_fn, inputs)."""
    def binary(fn, pos_b=False):
        def build(rng):
            a, b = _param(rng, (3, 4)), _param(rng, (4,), positive=pos_b)
            return (lambda a, b: _weighted(fn(a, b))), [a, b]
        return build

    def unary(fn, positive=False):
        def build(rng):
            a = _param(rng, (3, 4), positive)
            return (lambda a: _weighted(fn(a))), [a]
        return build

    def shaped(fn, shape=(2, 3, 4)):
        def build(rng):
            a = _param(rng, shape)
            return (lambda a: _weighted(fn(a))), [a]
        return build

    def concat(rng):
        a, b = _param(rng, (2, 3)), _param(rng, (4, 3))
        return (lambda a, b: _weighted(T.concat([a, b], 0))), [a, b]

    def gather(rng):
        a = _param(rng, (2, 5, 3))
        idx = np.array([[0, 4, 4], [1, 2, 0]])
        return (lambda a: _weighted(T.gather_rows(a, idx))), [a]

    def matmul(rng):
        a, b = _param(rng, (2, 3, 4)), _param(rng, (4, 5))
        return (lambda a, b: _weighted(T.matmul(a, b))), [a, b]

    def layer_norm(rng):
        x, g, b = _param(rng, (3, 6)), _param(rng, (6,)), _param(rng, (6,))
        return (lambda x, g, b: _weighted(T.layer_norm(x, g, b))), [x, g, b]

    def attn(rng):
        mod = Attention(8, 2, rng)
        for p in mod.parameters():
            p.data = p.data.astype(np.float64)
        q, kv = _param(rng, (4, 8)), _param(rng, (5, 8))
        params = [q, kv] + mod.parameters()
        return (lambda *a: _weighted(attention(q, kv, mod))), params

    def block(rng):
        mod = Block(8, 2, rng, mode="cross_self")
        for p in mod.parameters():
            p.data = p.data.astype(np.float64)
        x, ctx = _param(rng, (4, 8)), _param(rng, (3, 8))
        params = [x, ctx] + mod.parameters()
        return (lambda *a: _weighted(mod(x, ctx))), params

    return {
        "add": binary(T.add), "sub": binary(T.sub), "mul": binary(T.mul),
        "div": binary(T.div, pos_b=True),
        "scale": unary(lambda a: T.scale(a, -1.7)),
        "gelu": unary(T.gelu), "exp": unary(T.exp),
        "log": unary(T.log, positive=True), "sqrt": unary(T.sqrt, positive=True),
        "square": unary(T.square),
        "sum": shaped(lambda a: T.sum_(a, axis=1, keepdims=True)),
        "mean": shaped(lambda a: T.mean(a, axis=(0, 2))),
        "reshape": shaped(lambda a: T.reshape(a, (6, 4))),
        "transpose": shaped(lambda a: T.transpose(a, (2, 0, 1))),
        "swapaxes": shaped(lambda a: T.swapaxes(a, 1, 2)),
        "expand": shaped(lambda a: T.expand(a, (5, 3, 4)), shape=(1, 3, 4)),
        "slice": shaped(lambda a: T.slice_axis(a, 1, 3, 2)),
        "concat": concat, "gather_rows": gather, "matmul": matmul,
        "softmax": shaped(lambda a: T.softmax(a, -1)),
        "log_softmax": shaped(lambda a: T.log_softmax(a, 1)),
        "layer_norm": layer_norm, "attention": attn, "block_cross_self": block,
    }


# Absolute floor of the relative-error denominator.  Parameters such as the
# key bias have an exactly zero gradient (softmax is shift invariant); the
# central difference there is pure roundoff, about 1e-10 for these losses.
ATOL = 1e-5


def check_ops(seeds: int = 20, tol: float = 1e-4) -> list[CheckResult]:
    out = []
    with precision(np.float64):
        for name, build in _op_cases().items():
            worst = 0.0
            for s in range(seeds):
                rng = np.random.default_rng([s, 17])
                fn, inputs = build(rng)
                rep = grad_check(fn, inputs, tol=tol, name=name, max_entries=24, atol=ATOL,
                                 rng=np.random.default_rng(s))
                worst = max(worst, rep.max_rel_error)
            out.append(CheckResult(f"grad/{name}", bool(worst <= tol), float(worst)))
    return out


def check_full_loss(seeds: int = 20, tol: float = 1e-4, entries_per_param: int = 1,
                    arch: str = "siamese,cross_self", mask: str = "0.75a") -> CheckResult:
    """Finite-difference check of the SiamMAE loss w.r.t. sampled parameters."""
    enc, dec = arch.split(",")
    worst = 0.0
    with precision(np.float64):
        for s in range(seeds):
            rng = np.random.default_rng([s, 23])
            cfg = ModelConfig(image_size=16, patch_size=4, dim=64, depth=2, heads=4,
                              decoder_dim=64, decoder_depth=2, decoder_heads=4,
                              encoder=enc, decoder=dec)
            model = SiamMAEModel(cfg, rng)
            params = model.parameters()
            for p in params:
                p.data = p.data.astype(np.float64)
                # break symmetries of zero biases and unit gains
                p.data = p.data + 0.02 * rng.normal(size=p.shape)
            f1, f2 = rng.random((2, 2, 3, 16, 16))
            spec = MaskSpec.parse(mask)
            n = cfg.patchify.n_patches
            m1 = sample_mask(n, spec, "f1", rng)
            m2 = sample_mask(n, spec, "f2", rng)
            masks = (m1.kept, m1.masked, m2.kept, m2.masked)
            fn = lambda *a: model.forward_loss(f1, f2, spec, masks=masks)[0]
            rep = grad_check(fn, params, tol=tol, name="loss", atol=ATOL,
                             max_entries=entries_per_param,
                             rng=np.random.default_rng(s))
            worst = max(worst, rep.max_rel_error)
    return CheckResult(f"grad/siammae_loss[{arch},{mask}]", bool(worst <= tol), worst,
                       f"{seeds} seeds")


def check_masking(max_n: int = 1024) -> list[CheckResult]:
    rng = np.random.default_rng(0)
    bad = []
    for n in range(1, max_n + 1):
        spec = MaskSpec.asymmetric(0.95)
        m1 = sample_mask(n, spec, "f1", rng)
        m2 = sample_mask(n, spec, "f2", rng)
        if len(m1.masked) != 0 or len(m2.kept) != max(1, round(0.05 * n)):
            bad.append(n)
        if len(np.union1d(m2.kept, m2.masked)) != n or np.intersect1d(m2.kept, m2.masked).size:
            bad.append(n)
    side_bad = []
    for side in range(1, 33):
        kept = sample_mask(side * side, MaskSpec.parse("grid"), "f2", rng).kept
        r, c = np.divmod(kept, side)
        if not np.all((r + c) % 2 == 0) or len(kept) != (side * side + 1) // 2:
            side_bad.append(side)
    return [CheckResult("mask/asymmetric_counts", not bad, None,
                        f"n in [1,{max_n}]" + (f", failing n={bad[:5]}" if bad else "")),
            CheckResult("mask/checkerboard", not side_bad and n_kept(196, 0.95) == 10, None,
                        "sides 1..32")]


def _brute_boundary(m: np.ndarray) -> np.ndarray:
    h, w = m.shape
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)
                if not m[yy, xx]:
                    out[y, x] = True
    return out


def brute_boundary_f(pred: np.ndarray, gt: np.ndarray, tol: float) -> float:
    bp, bg = _brute_boundary(pred), _brute_boundary(gt)
    pp, gp = np.argwhere(bp), np.argwhere(bg)
    if len(pp) == 0 and len(gp) == 0:
        return 1.0
    if len(pp) == 0 or len(gp) == 0:
        return 0.0
    d = np.sqrt(((pp[:, None, :] - gp[None, :, :]) ** 2).sum(-1))
    prec = np.mean(d.min(axis=1) <= tol)
    rec = np.mean(d.min(axis=0) <= tol)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def brute_jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = union = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        inter += bool(p and g)
        union += bool(p or g)
    return 1.0 if union == 0 else inter / union


def brute_miou(pred: np.ndarray, gt: np.ndarray) -> float:
    scores = []
    for c in sorted(set(gt.ravel().tolist())):
        inter = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p == c and g == c)
        union = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p == c or g == c)
        scores.append(inter / union)
    return float(np.mean(scores))


def brute_pck(pred: np.ndarray, gt: np.ndarray, alpha: float, ref: float) -> float:
    hits = 0
    for (px, py), (gx, gy) in zip(pred, gt):
        hits += ((px - gx) ** 2 + (py - gy) ** 2) ** 0.5 <= alpha * ref
    return hits / len(gt)


def check_metrics(n: int = 200) -> list[CheckResult]:
    rng = np.random.default_rng(1)
    fails = {"jaccard": 0, "boundary_f": 0, "miou": 0, "pck": 0}
    for _ in range(n):
        a = rng.random((8, 8)) < rng.random()
        b = rng.random((8, 8)) < rng.random()
        fails["jaccard"] += M.jaccard(a, b) != brute_jaccard(a, b)
        fails["boundary_f"] += M.boundary_f(a, b, 2.0) != brute_boundary_f(a, b, 2.0)
        la, lb = rng.integers(0, 4, (2, 8, 8))
        fails["miou"] += M.miou(la, lb) != brute_miou(la, lb)
        kp, kg = rng.integers(0, 8, (2, 5, 2)).astype(float)
        fails["pck"] += M.pck(kp, kg, 0.2, 10.0) != brute_pck(kp, kg, 0.2, 10.0)
    out = [CheckResult(f"metric/{k}", v == 0, None, f"{n - v}/{n} exact") for k, v in fails.items()]
    a = rng.random((8, 8)) < 0.5
    perfect = (M.jaccard(a, a), M.boundary_f(a, a), M.miou(a.astype(int), a.astype(int)),
               M.pck(np.ones((3, 2)), np.ones((3, 2)), 0.1, 1.0))
    out.append(CheckResult("metric/perfect_is_one", all(v == 1.0 for v in perfect)))
    return out


def run_verify(seeds: int = 20, loss_seeds: int | None = None) -> VerifyReport:
    t0 = time.perf_counter()
    report = VerifyReport()
    report.checks += check_ops(seeds)
    loss_seeds = seeds if loss_seeds is None else loss_seeds
    report.checks.append(check_full_loss(loss_seeds))
    report.checks.append(check_full_loss(max(1, loss_seeds // 5), arch="joint,joint",
                                         mask="0.5s"))
    report.checks += check_masking()
    report.checks += check_metrics()
    report.seconds = time.perf_counter() - t0
    return report
