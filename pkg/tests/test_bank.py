import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from densitybank.bank import (
    HistoricalMapBank,
    blob_map,
    ema_update,
    init_bank,
    init_bank_blob,
    load_bank,
    make_prior,
    prior_from_map,
    save_bank,
)
from densitybank.errors import IntegrityError, ParameterError, StateError
from densitybank.grid import gaussian_kernel1d

unit_maps = arrays(np.float32, (6, 5), elements=st.floats(0, 1, width=32))


def test_init_bank_identity():
    maps = [np.full((4, 4), i / 3, dtype=np.float32) for i in range(3)]
    bank = init_bank(maps, 0.7)
    assert len(bank) == 3 and bank.epoch == 0
    assert bank.entries[2].tobytes() == maps[2].tobytes()
    zero = init_bank([np.zeros((5, 5))], 0.5)
    assert not zero.entries.any()


def test_init_bank_errors():
    with pytest.raises(ParameterError):
        init_bank([np.zeros((4, 4))], 1.2)
    with pytest.raises(ParameterError):
        init_bank([np.zeros((4, 4)), np.zeros((4, 5))], 0.5)


def test_blob():
    m = blob_map((9, 9), 0)
    assert m.sum() == 1 and m[4, 4] == 1
    m = blob_map((8, 8), 2)
    count = sum(
        1 for v in range(8) for u in range(8) if (u - 4) ** 2 + (v - 4) ** 2 <= 4
    )
    assert count == 13
    assert m.sum() == count
    bank = init_bank_blob(4, (8, 8), 2, 0.7)
    assert all(np.array_equal(bank.entries[0], e) for e in bank.entries)
    with pytest.raises(ParameterError):
        blob_map((8, 8), 4)


def test_ema_endpoints():
    old = np.array([[1.0, 0.25]], dtype=np.float32).repeat(8, 0)
    pred = np.array([[0.0, 0.5]], dtype=np.float32).repeat(8, 0)
    b1 = HistoricalMapBank(old[None].copy(), 1.0)
    ema_update(b1, 0, pred)
    assert b1.entries[0].tobytes() == pred.tobytes()
    b0 = HistoricalMapBank(old[None].copy(), 0.0)
    ema_update(b0, 0, pred)
    assert b0.entries[0].tobytes() == old.tobytes()
    b7 = HistoricalMapBank(old[None].copy(), 0.7)
    ema_update(b7, 0, pred)
    assert b7.entries[0][0, 0] == pytest.approx(0.3, abs=1e-7)


def test_ema_errors_and_clamp():
    bank = HistoricalMapBank(np.zeros((2, 3, 3)), 0.5)
    with pytest.raises(IndexError):
        ema_update(bank, 2, np.zeros((3, 3)))
    with pytest.raises(ParameterError):
        ema_update(bank, 0, np.zeros((3, 4)))
    neg = np.full((3, 3), -1.0)
    neg[0, 0] = 2.0
    ema_update(bank, 1, neg)
    assert bank.clamped_updates == 1
    assert bank.entries[1].min() == 0.0 and bank.entries[1][0, 0] == 1.0
    assert not bank.entries[0].any()


@settings(max_examples=50, deadline=None)
@given(unit_maps, unit_maps, st.floats(0, 1))
def test_ema_convexity(old, new, alpha):
    bank = HistoricalMapBank(old[None].copy(), alpha)
    ema_update(bank, 0, new)
    e = bank.entries[0]
    assert np.all(e >= np.minimum(old, new)) and np.all(e <= np.maximum(old, new))


@pytest.mark.parametrize("alpha", [0.1, 0.3, 0.7, 1.0])
def test_ema_geometric_convergence(alpha):
    rng = np.random.default_rng(0)
    e0 = rng.random((6, 6)).astype(np.float32)
    p = rng.random((6, 6)).astype(np.float32)
    bank = HistoricalMapBank(e0[None].copy(), alpha)
    d0 = np.abs(e0.astype(np.float64) - p).max()
    for k in range(1, 21):
        ema_update(bank, 0, p)
        assert np.abs(bank.entries[0] - p.astype(np.float64)).max() <= (1 - alpha) ** k * d0 + 1e-6


def test_stage_commit():
    bank = HistoricalMapBank(np.zeros((3, 4, 4)), 1.0)
    bank.stage(1, np.ones((4, 4)))
    assert bank.staged == (1,)
    bank.commit()
    assert bank.epoch == 1
    assert bank.entries[1].sum() == 16 and bank.entries[0].sum() == 0 and bank.entries[2].sum() == 0
    with pytest.raises(StateError):
        bank.commit()


def test_prior_uniform_fallback():
    prior = make_prior(HistoricalMapBank(np.zeros((1, 4, 5)), 0.7), 0)
    assert prior.degenerate
    np.testing.assert_array_equal(prior.mass, np.full((4, 5), 1 / 20))


def test_prior_impulse_is_kernel_footprint():
    m = np.zeros((15, 15), dtype=np.float32)
    m[7, 7] = 3.0
    prior = prior_from_map(m, 1.0)
    k = gaussian_kernel1d(1.0)
    expected = np.zeros((15, 15))
    expected[4:11, 4:11] = np.outer(k, k)
    expected /= expected.sum()
    np.testing.assert_allclose(prior.mass, expected, atol=1e-7)
    assert not prior.degenerate


def test_prior_sums_to_one_for_random_entries():
    rng = np.random.default_rng(11)
    for _ in range(100):
        m = rng.random((9, 12)) * (rng.random((9, 12)) > rng.random())
        prior = prior_from_map(m, 2.0)
        assert prior.mass.min() >= 0
        assert abs(prior.mass.sum() - 1) <= 1e-6


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    bank = HistoricalMapBank(rng.random((3, 6, 7)), 0.7, epoch=5)
    save_bank(bank, tmp_path / "b")
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest == {"format_version": 1, "n": 3, "alpha": 0.7, "epoch": 5, "shape": [6, 7]}
    assert (tmp_path / "b" / "entry_000002.c2dg").exists()
    back = load_bank(tmp_path / "b")
    assert back.entries.tobytes() == bank.entries.tobytes()
    assert (back.alpha, back.epoch) == (0.7, 5)


def test_load_missing_entry(tmp_path):
    save_bank(HistoricalMapBank(np.zeros((3, 4, 4)), 0.7), tmp_path)
    (tmp_path / "entry_000001.c2dg").unlink()
    with pytest.raises(IntegrityError, match="entry_000001"):
        load_bank(tmp_path)


def test_load_extra_entry(tmp_path):
    save_bank(HistoricalMapBank(np.zeros((3, 4, 4)), 0.7), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["n"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError, match="entry_000002"):
        load_bank(tmp_path)
