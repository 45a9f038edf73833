import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densitybank.contrastive import (
    PairBatch,
    batch_info_nce,
    classify_cells,
    contrastive_loss,
    embed_patch,
    info_nce,
    reembed,
    select_pairs,
)
from densitybank.errors import ParameterError
from densitybank.grid import Rect


def unit(rng, d=16):
    x = rng.normal(size=d)
    return x / np.linalg.norm(x)


def upper_half(size=32):
    m = np.zeros((size, size), dtype=np.float32)
    m[: size // 2] = 1.0
    return m


def brute_cells(density, threshold, patch):
    """Per-pixel loop oracle for cell classification."""
    peak = max(max(row) for row in density.tolist())
    crowd, bg = [], []
    h, w = density.shape
    for v0 in range(0, h - patch + 1, patch):
        for u0 in range(0, w - patch + 1, patch):
            on = 0
            for v in range(v0, v0 + patch):
                for u in range(u0, u0 + patch):
                    on += (density[v, u] / peak if peak > 0 else 0.0) > threshold
            frac = on / (patch * patch)
            if frac > 0.5:
                crowd.append((u0, v0))
            elif frac < 0.1:
                bg.append((u0, v0))
    return crowd, bg


def test_info_nce_hand_example():
    a = np.array([1.0, 0.0])
    loss, *_ = info_nce(a, a, np.array([[0.0, 1.0]]), 1.0)
    assert loss == pytest.approx(-1.0, abs=1e-12)


def test_info_nce_symmetric_zero():
    rng = np.random.default_rng(0)
    a = unit(rng)
    loss, *_ = info_nce(a, a, a[None], 0.5)
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_include_positive_is_cross_entropy():
    rng = np.random.default_rng(1)
    a, p = unit(rng), unit(rng)
    n = np.stack([unit(rng) for _ in range(5)])
    loss, *_ = info_nce(a, p, n, 0.2, include_positive=True)
    logits = np.r_[a @ p, n @ a] / 0.2
    expected = -np.log(np.exp(logits[0]) / np.exp(logits).sum())
    assert loss == pytest.approx(expected, rel=1e-12)
    assert loss > 0


def test_tau_must_be_positive():
    a = np.ones(2) / np.sqrt(2)
    with pytest.raises(ParameterError):
        info_nce(a, a, a[None], 0.0)


@pytest.mark.parametrize("include_positive", [False, True])
def test_info_nce_gradient_check(include_positive):
    rng = np.random.default_rng(2)
    tau, h = 0.07, 1e-6
    for _ in range(5):
        a, p = unit(rng), unit(rng)
        n = np.stack([unit(rng) for _ in range(4)])
        _, ga, gp, gn = info_nce(a, p, n, tau, include_positive)

        def f(a_, p_, n_):
            return info_nce(a_, p_, n_, tau, include_positive)[0]

        for vec, grad, which in [(a, ga, 0), (p, gp, 1)] + [(n[k], gn[k], 2 + k) for k in range(4)]:
            num = np.zeros_like(vec)
            for i in range(vec.size):
                args_up = [a.copy(), p.copy(), n.copy()]
                args_dn = [a.copy(), p.copy(), n.copy()]
                for args, sign in ((args_up, 1), (args_dn, -1)):
                    if which < 2:
                        args[which][i] += sign * h
                    else:
                        args[2][which - 2, i] += sign * h
                num[i] = (f(*args_up) - f(*args_dn)) / (2 * h)
            err = np.linalg.norm(num - grad) / max(np.linalg.norm(grad), 1e-12)
            assert err <= 1e-4


def test_monotonicity():
    a = np.array([1.0, 0.0, 0.0])
    n = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    losses = []
    for theta in np.linspace(1.5, 0.0, 7):
        p = np.array([np.cos(theta), np.sin(theta), 0.0])
        losses.append(info_nce(a, p, n, 0.1)[0])
    assert all(x > y for x, y in zip(losses, losses[1:]))
    p = np.array([0.6, 0.8, 0.0])
    prev = None
    for theta in np.linspace(1.5, 0.0, 7):
        n2 = n.copy()
        n2[0] = [np.cos(theta), np.sin(theta), 0.0]
        cur = info_nce(a, p, n2, 0.1)[0]
        assert prev is None or cur > prev
        prev = cur


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8))
def test_permutation_invariance(seed, k):
    rng = np.random.default_rng(seed)
    a, p = unit(rng), unit(rng)
    n = np.stack([unit(rng) for _ in range(k)])
    perm = rng.permutation(k)
    assert info_nce(a, p, n, 0.07)[0] == pytest.approx(info_nce(a, p, n[perm], 0.07)[0], rel=1e-12)


def test_embed_patch():
    feats = np.zeros((16, 8, 8))
    assert embed_patch(feats, Rect(0, 0, 4, 4)) is None
    feats[3, :4, :4] = 2.0
    e = embed_patch(feats, Rect(0, 0, 4, 4))
    assert e.norm == pytest.approx(2.0)
    assert e.vector[3] == pytest.approx(1.0)


def test_classify_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = (rng.random((24, 32)) < rng.random()).astype(np.float32) * rng.random((24, 32)).astype(np.float32)
        crowd, bg = classify_cells(m, 0.2, 8)
        oracle = brute_cells(m, np.float32(0.2), 8)
        assert [(r.u0, r.v0) for r in crowd] == oracle[0]
        assert [(r.u0, r.v0) for r in bg] == oracle[1]


def test_select_pairs_upper_half():
    rng = np.random.default_rng(4)
    density = upper_half()
    crowd, bg = classify_cells(density, 0.2, 8)
    assert len(crowd) == 8 and len(bg) == 8
    feats = rng.random((16, 32, 32))
    for k in (1, 4, 8):
        batches = select_pairs(density, feats, k=k, rng=rng)
        assert len(batches) == 7
        crowd_set = {(r.u0, r.v0) for r in crowd}
        for b in batches:
            assert b.anchor.rect != b.positive.rect
            assert (b.anchor.rect.u0, b.anchor.rect.v0) in crowd_set
            assert all(n.rect.v0 >= 16 for n in b.negatives)
            assert len({n.rect for n in b.negatives}) == k
    assert select_pairs(density, feats, k=9, rng=rng) == []
    assert len(select_pairs(density, feats, cap=3, rng=rng)) == 3


def test_select_pairs_empty_cases():
    feats = np.ones((16, 32, 32))
    assert select_pairs(np.zeros((32, 32)), feats) == []
    assert select_pairs(upper_half(), feats, threshold=1.0) == []
    with pytest.raises(ParameterError):
        select_pairs(upper_half(), feats, threshold=0.0)
    with pytest.raises(ParameterError):
        select_pairs(upper_half(), np.ones((16, 16, 32)))


def test_contrastive_loss_mean_and_empty():
    assert contrastive_loss([], 0.07, (16, 8, 8))[0] == 0.0
    assert not contrastive_loss([], 0.07, (16, 8, 8))[1].any()
    rng = np.random.default_rng(5)
    feats = rng.random((16, 32, 32))
    (batch,) = select_pairs(upper_half(), feats, cap=1, rng=rng)
    one, g1 = contrastive_loss([batch], 0.07, feats.shape)
    assert one == pytest.approx(batch_info_nce(batch, 0.07)[0])
    two, g2 = contrastive_loss([batch, batch], 0.07, feats.shape)
    assert two == pytest.approx(one)
    np.testing.assert_allclose(g1, g2)


def test_contrastive_loss_feature_gradient():
    """Finite differences through average-pool and L2 normalization."""
    rng = np.random.default_rng(6)
    feats = rng.random((16, 32, 32)) + 0.1
    batches = select_pairs(upper_half(), feats, k=3, cap=2, rng=rng)
    _, grad = contrastive_loss(batches, 0.07, feats.shape)
    h = 1e-6
    for _ in range(30):
        c, v, u = rng.integers(16), rng.integers(32), rng.integers(32)
        up, dn = feats.copy(), feats.copy()
        up[c, v, u] += h
        dn[c, v, u] -= h
        num = (
            contrastive_loss(reembed(batches, up), 0.07, feats.shape)[0]
            - contrastive_loss(reembed(batches, dn), 0.07, feats.shape)[0]
        ) / (2 * h)
        assert num == pytest.approx(grad[c, v, u], rel=1e-4, abs=1e-7)


def test_gradient_tangent_to_embedding():
    rng = np.random.default_rng(7)
    feats = rng.random((16, 32, 32))
    for batch in select_pairs(upper_half(), feats, rng=rng):
        _, grad = contrastive_loss([batch], 0.07, feats.shape)
        for e in (batch.anchor, batch.positive, *batch.negatives):
            # the pooled gradient on a cell is the raw-average gradient / area
            g = grad[(slice(None), *e.rect.slices)].sum(axis=(1, 2))
            assert abs(g @ e.vector) <= 1e-5 * max(1.0, np.linalg.norm(g))


def test_pair_batch_shape():
    rng = np.random.default_rng(8)
    (b,) = select_pairs(upper_half(), rng.random((16, 32, 32)), k=2, cap=1, rng=rng)
    assert isinstance(b, PairBatch) and len(b.negatives) == 2
    for e in (b.anchor, b.positive, *b.negatives):
        assert np.linalg.norm(e.vector) == pytest.approx(1.0, abs=1e-6)
