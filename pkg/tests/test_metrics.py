import itertools

import numpy as np
import pytest

from siammae.metrics import bbox_size, boundary_f, boundary_map, jaccard, miou, pck


def brute_boundary(mask):
    # a pixel is on the contour if any 4-neighbour (clamped at the border) is off
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y, x in itertools.product(range(h), range(w)):
        if mask[y, x]:
            nbrs = [(min(y + 1, h - 1), x), (max(y - 1, 0), x),
                    (y, min(x + 1, w - 1)), (y, max(x - 1, 0))]
            out[y, x] = any(not mask[p] for p in nbrs)
    return out


def brute_f(pred, gt, tol):
    bp, bg = brute_boundary(pred), brute_boundary(gt)
    P, G = list(zip(*np.nonzero(bp))), list(zip(*np.nonzero(bg)))
    if not P and not G:
        return 1.0
    if not P or not G:
        return 0.0

    def near(a, pts):
        return any((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 <= tol * tol for b in pts)

    prec = sum(near(p, G) for p in P) / len(P)
    rec = sum(near(g, P) for g in G) / len(G)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def brute_j(a, b):
    inter = sum(1 for x, y in zip(a.flat, b.flat) if x and y)
    union = sum(1 for x, y in zip(a.flat, b.flat) if x or y)
    return 1.0 if union == 0 else inter / union


def brute_miou(p, g):
    out = []
    for c in sorted(set(g.flat)):
        inter = sum(1 for x, y in zip(p.flat, g.flat) if x == c and y == c)
        union = sum(1 for x, y in zip(p.flat, g.flat) if x == c or y == c)
        out.append(inter / union)
    return sum(out) / len(out)


def brute_pck(p, g, alpha, ref):
    return sum(1 for a, b in zip(p, g)
               if np.hypot(a[0] - b[0], a[1] - b[1]) <= alpha * ref) / len(g)


# -- hand cases ---------------------------------------------------------------------

def test_jaccard_hand_cases():
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True
    assert jaccard(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[2:, 2:] = True
    assert jaccard(a, b) == 0.0
    big = np.zeros((4, 4), bool)
    big[:2, :4] = True
    assert jaccard(a, big) == 0.5
    assert jaccard(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        jaccard(a, np.zeros((3, 3)))


def test_boundary_f_identical_and_shifted():
    a = np.zeros((16, 16), bool)
    a[4:10, 4:10] = True
    assert boundary_f(a, a) == 1.0
    assert boundary_f(np.roll(a, 1, axis=1), a, tol_px=2) == 1.0
    assert boundary_f(np.zeros_like(a), np.zeros_like(a)) == 1.0
    assert boundary_f(np.zeros_like(a), a) == 0.0
    with pytest.raises(ValueError):
        boundary_f(a, a[:8])


def test_boundary_map_square_ring():
    a = np.zeros((6, 6), bool)
    a[1:5, 1:5] = True
    ring = a.copy()
    ring[2:4, 2:4] = False
    np.testing.assert_array_equal(boundary_map(a), ring)


def test_miou_hand_cases():
    g = np.zeros((4, 4), int)
    g[:, :2] = 1
    assert miou(g, g) == 1.0
    # single class: pred covers 2 of gt's 4 columns plus 2 others -> 1/3
    gt = np.zeros((2, 4), int)
    gt[:, :2] = 1
    pred = np.zeros((2, 4), int)
    pred[:, 1:3] = 1
    assert miou(pred == 1, gt == 1, n_classes=2) == pytest.approx((1 / 3 + 1 / 3) / 2)
    assert miou(np.where(pred == 1, 1, 2), np.ones((2, 4), int)) == 0.5


def test_pck_hand_cases():
    g = np.array([[1.0, 1.0], [5.0, 5.0]])
    assert pck(g, g, 0.1, 10) == 1.0
    assert pck(g + 100, g, 0.1, 10) == 0.0
    assert pck(g + [[1.0, 0.0], [3.0, 0.0]], g, 0.2, 10) == 0.5
    with pytest.raises(ValueError):
        pck(g[:1], g, 0.1, 10)


def test_bbox_size():
    m = np.zeros((10, 10), bool)
    m[2:5, 3:9] = True
    assert bbox_size(m) == 6
    assert bbox_size(np.zeros((3, 3))) == 0


# -- brute-force oracles on 200 random 8x8 instances ---------------------------------

@pytest.fixture(scope="module")
def instances():
    rng = np.random.default_rng(42)
    out = []
    for _ in range(200):
        pa, pb = rng.random(2)
        out.append((rng.random((8, 8)) < pa, rng.random((8, 8)) < pb,
                    rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8)),
                    rng.integers(0, 8, (6, 2)).astype(float),
                    rng.integers(0, 8, (6, 2)).astype(float)))
    return out


def test_jaccard_oracle(instances):
    for a, b, *_ in instances:
        assert jaccard(a, b) == brute_j(a, b)


@pytest.mark.parametrize("tol", [1.0, 2.0])
def test_boundary_f_oracle(instances, tol):
    for a, b, *_ in instances:
        assert boundary_f(a, b, tol) == brute_f(a, b, tol)


def test_miou_oracle(instances):
    for *_, la, lb, _, _ in instances:
        assert miou(la, lb) == brute_miou(la, lb)


def test_pck_oracle(instances):
    for *_, kp, kg in instances:
        for alpha in (0.1, 0.2, 0.5):
            assert pck(kp, kg, alpha, 8.0) == brute_pck(kp, kg, alpha, 8.0)


def test_metrics_bounded(instances):
    for a, b, la, lb, kp, kg in instances:
        for v in (jaccard(a, b), boundary_f(a, b), miou(la, lb), pck(kp, kg, 0.1, 8)):
            assert 0.0 <= v <= 1.0
