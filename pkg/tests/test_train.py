import math

import numpy as np
import pytest

from siammae.data import SyntheticSceneSpec, generate_synthetic_clip
from siammae.model import MaskSpec, ModelConfig, SiamMAEModel, no_weight_decay
from siammae.tensor import Tensor, precision
from siammae.train import (CheckpointError, NumericError, OptimState, TrainConfig, Trainer,
                           adamw_step, load_checkpoint, lr_at, read_loss_csv, resume_trainer,
                           save_checkpoint)


# -- learning-rate schedule -------------------------------------------------------

def test_lr_endpoints_and_midpoint():
    assert lr_at(0, 1000, 100, 1.5e-4) == 0.0
    assert lr_at(100, 1000, 100, 1.5e-4) == 1.5e-4
    assert lr_at(1000, 1000, 100, 1.5e-4) == 0.0
    assert lr_at(550, 1000, 100, 1.5e-4) == pytest.approx(0.75e-4, rel=1e-12)
    assert lr_at(50, 1000, 100, 1.5e-4) == pytest.approx(0.75e-4, rel=1e-12)


def test_lr_continuous_and_nonincreasing_after_warmup():
    lrs = np.array([lr_at(s, 400, 40, 1.5e-4) for s in range(401)])
    assert np.all(np.diff(lrs[40:]) <= 0)
    assert np.all(np.diff(lrs[:41]) > 0)
    assert np.max(np.abs(np.diff(lrs))) <= 1.5e-4 / 40 + 1e-15


def test_lr_errors():
    with pytest.raises(ValueError):
        lr_at(0, 10, 20, 1e-3)
    with pytest.raises(ValueError):
        lr_at(11, 10, 2, 1e-3)
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=50, total_epochs=40)


def test_recipe_defaults():
    cfg = TrainConfig()
    assert (cfg.base_lr, cfg.betas, cfg.weight_decay) == (1.5e-4, (0.9, 0.95), 0.05)
    assert (cfg.warmup_epochs, cfg.repeated_sampling) == (40, 2)
    assert cfg.gap_range == (4, 48) and cfg.crop_scale == (0.5, 1.0)


# -- AdamW -------------------------------------------------------------------------

def _hand_adamw(x, grads_fn, steps, lr, wd, b1, b2, eps):
    # scalar transcription of the decoupled update, one line per update rule
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grads_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        x = x * (1 - lr * wd)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(x)
    return out


def test_adamw_three_steps_match_hand_oracle():
    a, c = 2.0, 0.2
    grad = lambda x: a * (x - c)           # d/dx of a/2 (x - c)^2
    cfg = TrainConfig(base_lr=0.1, weight_decay=0.05, betas=(0.9, 0.95), eps=1e-8)
    expected = _hand_adamw(1.0, grad, 3, 0.1, 0.05, 0.9, 0.95, 1e-8)
    with precision(np.float64):
        p = Tensor(np.array([[1.0]]), requires_grad=True)
        state = OptimState()
        for t in range(3):
            p.grad = np.array([[grad(p.data[0, 0])]])
            adamw_step({"w": p}, state, 0.1, cfg)
            assert p.data[0, 0] == pytest.approx(expected[t], abs=1e-12)
    assert state.step == 3


def test_adamw_first_step_closed_form():
    # bias-corrected first step moves by lr * g / (|g| + eps), after decay
    cfg = TrainConfig(base_lr=0.01, weight_decay=0.0)
    with precision(np.float64):
        p = Tensor(np.array([[3.0, -2.0]]), requires_grad=True)
    p.grad = np.array([[0.5, -4.0]])
    adamw_step({"w": p}, OptimState(), 0.01, cfg)
    np.testing.assert_allclose(p.data, [[3.0 - 0.01 * 0.5 / (0.5 + 1e-8),
                                          -2.0 + 0.01 * 4.0 / (4.0 + 1e-8)]], rtol=0, atol=1e-15)


def test_zero_grads_zero_decay_unchanged():
    cfg = TrainConfig(weight_decay=0.0)
    p = Tensor(np.random.default_rng(0).normal(size=(3, 3)), requires_grad=True)
    before = p.data.copy()
    p.grad = np.zeros_like(p.data)
    adamw_step({"w": p}, OptimState(), 1e-3, cfg)
    np.testing.assert_array_equal(p.data, before)


def test_weight_decay_only_on_weights():
    cfg = TrainConfig(weight_decay=0.05)
    model = SiamMAEModel(ModelConfig(image_size=8, patch_size=4, dim=8, depth=1, heads=2,
                                     decoder_dim=8, decoder_depth=1, decoder_heads=2),
                         np.random.default_rng(0))
    params = dict(model.named_parameters())
    mask = {n: not no_weight_decay(n, p) for n, p in params.items()}
    before = {n: p.data.copy() for n, p in params.items()}
    for p in params.values():
        p.grad = np.zeros_like(p.data)
    adamw_step(params, OptimState(), 0.1, cfg, mask)
    for n, p in params.items():
        if mask[n]:
            np.testing.assert_allclose(p.data, before[n] * (1 - 0.1 * 0.05), rtol=1e-6)
        else:
            np.testing.assert_array_equal(p.data, before[n])
    assert not mask["mask_token"] and not mask["encoder.embed.cls_token"]
    assert not any(mask[n] for n in params if n.endswith(".bias") or ".norm" in n)


def test_non_finite_grad_aborts():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    p.grad = np.array([[1.0, np.nan], [0.0, 0.0]])
    state = OptimState()
    with pytest.raises(NumericError):
        adamw_step({"w": p}, state, 1e-3, TrainConfig())
    assert state.step == 0
    np.testing.assert_array_equal(p.data, 1.0)


def test_one_step_decreases_convex_quadratic():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        A = rng.normal(size=(4, 4))
        A = A @ A.T + np.eye(4)
        p = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        loss = lambda x: float((x @ A @ x.T)[0, 0] / 2)
        before = loss(p.data)
        p.grad = p.data @ A
        adamw_step({"w": p}, OptimState(), 1e-3, TrainConfig(weight_decay=0.0))
        assert loss(p.data) < before


# -- training loop + checkpoints ---------------------------------------------------

def _setup(seed=0, steps=6):
    spec = SyntheticSceneSpec(canvas=16, n_frames=8, size_range=(4, 6), velocity_x=(-1, 1),
                              velocity_y=(-1, 1))
    rng = np.random.default_rng(seed)
    clips = [generate_synthetic_clip(spec, rng)[0] for _ in range(4)]
    mcfg = ModelConfig(image_size=16, patch_size=4, dim=16, depth=1, heads=2,
                       decoder_dim=16, decoder_depth=1, decoder_heads=2)
    cfg = TrainConfig(base_lr=1e-3, total_steps=steps, warmup_steps=2, batch_size=2,
                      gap_range=(1, 4), seed=seed)
    model = SiamMAEModel(mcfg, np.random.default_rng([seed, 0]))
    return Trainer(model, clips, cfg, MaskSpec.asymmetric(0.75)), clips


def test_ten_step_log():
    trainer, _ = _setup(steps=10)
    res = trainer.run()
    assert [s for s, _, _ in res.loss_log] == list(range(10))
    assert all(np.isfinite(l) for _, _, l in res.loss_log)


def test_training_deterministic(tmp_path):
    a, _ = _setup()
    b, _ = _setup()
    ra = a.run(out_dir=tmp_path / "a")
    rb = b.run(out_dir=tmp_path / "b")
    assert ra.loss_log == rb.loss_log
    assert (tmp_path / "a/loss.csv").read_bytes() == (tmp_path / "b/loss.csv").read_bytes()
    assert ((tmp_path / "a/final/weights.bin").read_bytes()
            == (tmp_path / "b/final/weights.bin").read_bytes())
    assert read_loss_csv(tmp_path / "a/loss.csv") == ra.loss_log


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    trainer, _ = _setup()
    trainer.run(steps=3)
    path = save_checkpoint(trainer, tmp_path / "ck")
    ck = load_checkpoint(path)
    assert ck.step == 3
    names = [e["name"] for e in ck.manifest["tensors"]]
    params = dict(trainer.model.named_parameters())
    assert sorted(n for n in names if n.startswith("param/")) == sorted(f"param/{n}" for n in params)
    assert len(names) == len(set(names))
    rebuilt = dict(ck.build_model().named_parameters())
    for n, p in params.items():
        assert rebuilt[n].data.tobytes() == p.data.astype("<f4").tobytes()
    assert ck.mask_spec() == trainer.mask
    assert ck.train_config() == trainer.cfg


def test_corrupted_byte_detected(tmp_path):
    trainer, _ = _setup()
    path = save_checkpoint(trainer, tmp_path / "ck")
    blob = bytearray((path / "weights.bin").read_bytes())
    blob[17] ^= 0xFF
    (path / "weights.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_truncated_blob_and_version(tmp_path):
    trainer, _ = _setup()
    path = save_checkpoint(trainer, tmp_path / "ck")
    blob = (path / "weights.bin").read_bytes()
    (path / "weights.bin").write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    (path / "weights.bin").write_bytes(blob)
    manifest = (path / "manifest.json").read_text().replace('"version": 1', '"version": 99')
    (path / "manifest.json").write_text(manifest)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_resume_matches_uninterrupted(tmp_path):
    full, clips = _setup(steps=8)
    full.run()
    part, _ = _setup(steps=8)
    part.run(steps=4)
    save_checkpoint(part, tmp_path / "mid")
    resumed = resume_trainer(load_checkpoint(tmp_path / "mid"), clips)
    resumed.run()
    assert [l for _, _, l in resumed.loss_log] == [l for _, _, l in full.loss_log[4:]]
