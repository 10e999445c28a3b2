import numpy as np
import pytest

from siammae import metrics as M
from siammae.data import SyntheticSceneSpec, generate_synthetic_clip
from siammae.estimator import LabelPropagator
from siammae.labelprop import (PRESETS, FeatureMap, LabelMap, PropagationConfig,
                               argmax_labels, correspondence_oracle_features, downsample_labels,
                               extract_clip_features,
                               evaluate_sequence, extract_features, heatmap_peaks,
                               keypoint_heatmaps, propagate_labels, run_propagation)
from siammae.model import ModelConfig, SiamMAEModel


def rand_feats(rng, n=16, d=8, grid=(4, 4), t=0):
    return FeatureMap.from_raw(rng.normal(size=(n, d)), grid, t)


def rand_labels(rng, n=16, c=3, grid=(4, 4)):
    return LabelMap(np.eye(c)[rng.integers(0, c, n)], grid)


def brute_propagate(context, target, cfg):
    # per-query loops over every candidate; no vectorisation
    gh, gw = target.grid
    out = []
    for q in range(gh * gw):
        qr, qc = divmod(q, gw)
        cands = []
        for fi, (f, lab) in enumerate(context):
            for s in range(gh * gw):
                sr, sc = divmod(s, gw)
                if max(abs(sr - qr), abs(sc - qc)) <= cfg.neighborhood:
                    sim = float(np.dot(target.features[q], f.features[s]))
                    cands.append((-sim, fi, s, lab.probs[s]))
        cands.sort(key=lambda c: (c[0], c[1], c[2]))
        top = cands[:cfg.top_k]
        logits = np.array([-c[0] for c in top]) / cfg.temperature
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out.append(sum(wi * c[3] for wi, c in zip(w, top)))
    return np.array(out)


def test_presets_match_recipe():
    d = PRESETS["davis"]
    assert (d.top_k, d.queue_len, d.neighborhood) == (7, 20, 20)
    v = PRESETS["vip"]
    assert (v.top_k, v.queue_len, v.neighborhood) == (10, 20, 8)
    j = PRESETS["jhmdb"]
    assert (j.top_k, j.queue_len, j.neighborhood) == (7, 20, 20)
    assert d.temperature == 0.07


def test_copy_with_identical_features_k1():
    rng = np.random.default_rng(0)
    f = rand_feats(rng)
    lab = rand_labels(rng)
    out = propagate_labels([(f, lab)], FeatureMap(f.features.copy(), f.grid, 1),
                           PropagationConfig(top_k=1))
    np.testing.assert_array_equal(out.probs, lab.probs)


def test_two_equal_sources_split_evenly():
    feat = np.array([[1.0, 0.0]])
    a = (FeatureMap(feat, (1, 1)), LabelMap(np.array([[1.0, 0.0]]), (1, 1)))
    b = (FeatureMap(feat, (1, 1)), LabelMap(np.array([[0.0, 1.0]]), (1, 1)))
    out = propagate_labels([a, b], FeatureMap(feat, (1, 1)), PropagationConfig(top_k=2))
    np.testing.assert_array_equal(out.probs, [[0.5, 0.5]])


@pytest.mark.parametrize("k,radius", [(1, 0), (3, 1), (7, 2), (20, 20)])
def test_matches_brute_force(k, radius):
    rng = np.random.default_rng(k * 10 + radius)
    cfg = PropagationConfig(top_k=k, neighborhood=radius)
    for _ in range(20):
        ctx = [(rand_feats(rng, t=i), rand_labels(rng)) for i in range(3)]
        tgt = rand_feats(rng, t=3)
        np.testing.assert_allclose(propagate_labels(ctx, tgt, cfg).probs,
                                   brute_propagate(ctx, tgt, cfg), atol=1e-12)


def test_rows_are_convex_combinations():
    rng = np.random.default_rng(1)
    soft = rng.random((16, 4))
    soft /= soft.sum(axis=1, keepdims=True)
    ctx = [(rand_feats(rng), LabelMap(soft, (4, 4))), (rand_feats(rng), rand_labels(rng, c=4))]
    out = propagate_labels(ctx, rand_feats(rng), PRESETS["davis"])
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-12)
    assert out.probs.min() >= 0


def test_zero_temperature_argmax_and_scale_invariance():
    rng = np.random.default_rng(2)
    ctx = [(rand_feats(rng), rand_labels(rng))]
    tgt = rand_feats(rng)
    cfg = PropagationConfig(top_k=1, temperature=0.0, neighborhood=1)
    out = propagate_labels(ctx, tgt, cfg)
    scaled = FeatureMap.from_raw(tgt.features * 17.0, tgt.grid)
    np.testing.assert_array_equal(propagate_labels(ctx, scaled, cfg).probs, out.probs)
    np.testing.assert_allclose(out.probs, brute_propagate(ctx, tgt, PropagationConfig(
        top_k=1, neighborhood=1)), atol=0)


def test_neighborhood_excludes_distant_sources():
    # the only matching source sits outside the radius, so it can't be picked
    feats = np.eye(4)
    src = FeatureMap(feats, (2, 2))
    lab = LabelMap(np.eye(4), (2, 2))
    tgt = FeatureMap(feats[[3, 1, 2, 0]], (2, 2))
    out = propagate_labels([(src, lab)], tgt, PropagationConfig(top_k=1, neighborhood=0))
    np.testing.assert_array_equal(out.probs, np.eye(4))
    wide = propagate_labels([(src, lab)], tgt, PropagationConfig(top_k=1, neighborhood=1))
    np.testing.assert_array_equal(wide.probs, np.eye(4)[[3, 1, 2, 0]])


def test_grid_mismatch_raises():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        propagate_labels([(rand_feats(rng), rand_labels(rng))],
                         rand_feats(rng, n=9, grid=(3, 3)), PRESETS["davis"])
    with pytest.raises(ValueError):
        propagate_labels([], rand_feats(rng), PRESETS["davis"])


def test_queue_zero_uses_only_first_frame():
    rng = np.random.default_rng(4)
    feats = [rand_feats(rng, t=t) for t in range(6)]
    first = rand_labels(rng)
    cfg = PropagationConfig(top_k=3, queue_len=0, neighborhood=1)
    maps = run_propagation(feats, first, cfg)
    for t in range(1, 6):
        np.testing.assert_array_equal(
            maps[t].probs, propagate_labels([(feats[0], first)], feats[t], cfg).probs)


def test_queue_keeps_first_frame_and_last_m():
    rng = np.random.default_rng(5)
    feats = [rand_feats(rng, t=t) for t in range(6)]
    first = rand_labels(rng)
    cfg = PropagationConfig(top_k=4, queue_len=2, neighborhood=2)
    maps = run_propagation(feats, first, cfg)
    ctx = [(feats[0], first), (feats[3], maps[3]), (feats[4], maps[4])]
    np.testing.assert_array_equal(maps[5].probs, propagate_labels(ctx, feats[5], cfg).probs)


def test_extract_features_unit_rows_and_determinism():
    m = SiamMAEModel(ModelConfig(), np.random.default_rng(0))
    frame = np.random.default_rng(1).random((3, 64, 64))
    a, b = extract_features(m, frame), extract_features(m, frame.copy())
    assert a.features.shape == (64, 64)
    np.testing.assert_allclose(np.linalg.norm(a.features, axis=1), 1.0, atol=1e-5)
    np.testing.assert_array_equal(a.features, b.features)
    with pytest.raises(Exception):
        extract_features(m, np.zeros((3, 32, 32)))


def test_downsample_majority_and_keypoint_peaks():
    lab = np.zeros((8, 8), int)
    lab[:4, :4] = 1
    lab[0:3, 4:8] = 2             # 12 of 16 pixels in that patch
    lm = downsample_labels(lab, 4, 3)
    np.testing.assert_array_equal(lm.probs.argmax(1), [1, 2, 0, 0])
    kps = np.array([[19.5, 11.5], [11.5, 19.5]])   # interior patch centres
    hm = keypoint_heatmaps(kps, 8, (4, 4), 0.5)
    np.testing.assert_array_equal(heatmap_peaks(hm, (32, 32)), [[19, 11], [11, 19]])


def test_static_clip_labels_never_move():
    spec = SyntheticSceneSpec(velocity_x=(0, 0), velocity_y=(0, 0), snap=8, n_frames=6,
                              size_range=(16, 24), shapes=("square",))
    clip, gt = generate_synthetic_clip(spec, np.random.default_rng(0))
    m = SiamMAEModel(ModelConfig(), np.random.default_rng(1))
    feats = extract_clip_features(m, clip.frames)
    cfg = PropagationConfig(top_k=1)
    first = downsample_labels(gt.segmentation[0], 8, int(gt.segmentation.max()) + 1)
    for lm in run_propagation(feats, first, cfg)[1:]:
        np.testing.assert_array_equal(lm.probs, first.probs)
    res, preds = evaluate_sequence(feats, (64, 64), 8, gt.segmentation, cfg,
                                   return_predictions=True)
    # pixel J equals the frame-0 round trip through the patch grid
    roundtrip = argmax_labels(first, (64, 64))
    objs = [c for c in np.unique(gt.segmentation[0]) if c]
    expected = np.mean([M.jaccard(roundtrip == c, gt.segmentation[0] == c) for c in objs])
    assert res.J_mean == pytest.approx(expected, abs=1e-12)


def _aligned_clip(seed):
    spec = SyntheticSceneSpec(n_sprites=(1, 1), shapes=("square",), size_range=(24, 40),
                              velocity_x=(-8, 8), velocity_y=(-8, 8), snap=8, n_frames=16)
    return generate_synthetic_clip(spec, np.random.default_rng(seed))


def test_oracle_features_single_sprite():
    for seed in range(4):
        clip, gt = _aligned_clip(seed)
        feats = correspondence_oracle_features(gt.segmentation, gt.positions, 8)
        seg = evaluate_sequence(feats, (64, 64), 8, gt.segmentation, PRESETS["davis"])
        assert seg.J_mean >= 0.95
        kp = evaluate_sequence(feats, (64, 64), 8, None, PRESETS["jhmdb"], "keypoints",
                               gt.keypoints, np.full(1, float(gt.sizes[0])))
        assert kp.PCK_02 == 1.0


def test_parts_task_reports_miou():
    clip, gt = _aligned_clip(0)
    feats = correspondence_oracle_features(gt.segmentation, gt.positions, 8)
    res = evaluate_sequence(feats, (64, 64), 8, gt.segmentation, PRESETS["vip"], "parts")
    assert res.to_dict().keys() == {"mIoU"} and 0 <= res.mIoU <= 1


def test_missing_ground_truth_raises():
    rng = np.random.default_rng(6)
    feats = [rand_feats(rng, t=t) for t in range(3)]
    with pytest.raises(ValueError):
        evaluate_sequence(feats, (16, 16), 4, None, PRESETS["davis"], "seg")
    with pytest.raises(ValueError):
        evaluate_sequence(feats, (16, 16), 4, None, PRESETS["davis"], "keypoints")
    with pytest.raises(ValueError):
        evaluate_sequence(feats, (16, 16), 4, np.zeros((3, 16, 16), int), PRESETS["davis"],
                          "depth")


def test_label_propagator_estimator():
    rng = np.random.default_rng(7)
    f0 = rng.normal(size=(4, 4, 8))
    labels = np.eye(2)[rng.integers(0, 2, 16)]
    prop = LabelPropagator(top_k=1, neighborhood=0).fit(f0, labels)
    pred = prop.predict([f0 * 3.0, f0])
    assert pred.shape == (2, 16)
    np.testing.assert_array_equal(pred[0], labels.argmax(1))
    assert prop.get_params()["top_k"] == 1
    with pytest.raises(ValueError):
        LabelPropagator().fit(f0, labels[:5])
