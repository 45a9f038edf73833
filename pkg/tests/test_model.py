import hashlib

import numpy as np
import pytest

from densitybank.errors import FormatError, NumericError, ParameterError, StateError
from densitybank.model import (
    LAYOUT,
    AdamState,
    ModelParams,
    adam_step,
    backward,
    forward,
    glorot_bound,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)


def as_float64(params):
    return ModelParams({k: v.astype(np.float64) for k, v in params.tensors.items()})


def perturbed_positive(seed):
    """float64 params with biases nudged positive so ReLUs are mostly active."""
    p = as_float64(init_params(seed))
    rng = np.random.default_rng(seed + 100)
    for k in ("conv1.bias", "conv2.bias", "head.bias"):
        p.tensors[k] = rng.uniform(0.05, 0.3, size=p.tensors[k].shape)
    return p


def test_zero_params_give_ln2():
    p = ModelParams({k: np.zeros(s, dtype=np.float32) for k, s in LAYOUT.items()})
    feats, dens = forward(np.random.default_rng(0).normal(size=(9, 11)), p)
    np.testing.assert_allclose(dens, np.log(2.0), rtol=1e-15)
    assert feats.shape == (16, 9, 11) and dens.shape == (9, 11)


def test_density_positive_and_deterministic():
    img = np.random.default_rng(1).normal(size=(16, 16)) * 5
    p = init_params(3)
    p.tensors["head.bias"][:] = -30
    _, d1 = forward(img, p)
    _, d2 = forward(img, init_params(3) if False else p)
    assert (d1 > 0).all()
    assert hashlib.sha256(d1.tobytes()).digest() == hashlib.sha256(d2.tobytes()).digest()


def test_small_image_rejected():
    with pytest.raises(ParameterError):
        forward(np.zeros((7, 12)), init_params(0))


def test_init_params():
    a, b = init_params(5), init_params(5)
    assert a.checksum() == b.checksum()
    for k in LAYOUT:
        if k.endswith(".bias"):
            assert not a.tensors[k].any()
    bound = np.sqrt(6.0 / (1 * 9 + 8 * 9))
    assert glorot_bound(LAYOUT["conv1.weight"]) == pytest.approx(bound)
    assert np.abs(a.tensors["conv1.weight"]).max() <= bound
    assert a.tensors["conv1.weight"].dtype == np.float32


def test_backward_without_forward():
    with pytest.raises(StateError):
        backward(np.zeros((8, 8)), init_params(0), np.zeros((8, 8)))


def test_backward_image_mismatch():
    p = init_params(0)
    forward(np.zeros((8, 8)), p)
    with pytest.raises(StateError):
        backward(np.ones((8, 8)), p, np.zeros((8, 8)))


def test_zero_upstream_gives_zero_grads():
    img = np.random.default_rng(0).normal(size=(10, 10))
    p = init_params(1)
    forward(img, p)
    backward(img, p, np.zeros((10, 10)), np.zeros((16, 10, 10)))
    assert all(not g.any() for g in p.grads.values())


def test_backward_accumulates():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(10, 10))
    gd, gf = rng.normal(size=(10, 10)), rng.normal(size=(16, 10, 10))
    p = init_params(2)
    forward(img, p)
    backward(img, p, gd, gf)
    once = {k: v.copy() for k, v in p.grads.items()}
    backward(img, p, gd, gf)
    for k in once:
        np.testing.assert_allclose(p.grads[k], 2 * once[k], rtol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_finite_difference(seed):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(12, 12))
    wd = rng.normal(size=(12, 12))
    wf = rng.normal(size=(16, 12, 12))
    p = perturbed_positive(seed)

    def loss(params):
        f, d = forward(img, params)
        return float((wd * d).sum() + (wf * f).sum())

    loss(p)
    backward(img, p, wd, wf)
    names = list(LAYOUT)
    h = 1e-5  # float64 params; small enough not to cross ReLU kinks
    for _ in range(25):
        name = names[rng.integers(len(names))]
        idx = tuple(rng.integers(s) for s in LAYOUT[name])
        analytic = p.grads[name][idx]
        orig = p.tensors[name][idx]
        p.tensors[name][idx] = orig + h
        up = loss(p)
        p.tensors[name][idx] = orig - h
        down = loss(p)
        p.tensors[name][idx] = orig
        numeric = (up - down) / (2 * h)
        assert abs(analytic - numeric) / max(1.0, abs(analytic)) <= 1e-3, (name, idx)


def test_sgd_step():
    p = init_params(0)
    before = {k: v.copy() for k, v in p.tensors.items()}
    for g in p.grads.values():
        g[...] = 1.0
    sgd_step(p, 0.0)
    assert all(np.array_equal(before[k], p.tensors[k]) for k in before)
    assert all(not g.any() for g in p.grads.values())

    p.tensors["head.bias"][0] = 1.0
    p.grads["head.bias"][0] = 2.0
    sgd_step(p, 0.1, 0.0)
    assert p.tensors["head.bias"][0] == pytest.approx(0.8)


def test_sgd_weight_decay():
    p = init_params(0)
    p.tensors["head.bias"][0] = 2.0
    sgd_step(p, 0.5, 0.1)
    assert p.tensors["head.bias"][0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgd_refuses_non_finite():
    p = init_params(0)
    p.grads["conv2.bias"][3] = np.nan
    before = p.checksum()
    with pytest.raises(NumericError, match="conv2.bias"):
        sgd_step(p, 0.1)
    assert p.checksum() == before


def test_adam_step_moves_against_gradient():
    p = init_params(0)
    state = AdamState()
    p.grads["head.bias"][0] = 4.0
    adam_step(p, state, 0.01)
    # first Adam step has magnitude lr for any nonzero gradient
    assert p.tensors["head.bias"][0] == pytest.approx(-0.01, rel=1e-4)
    assert state.t == 1 and not p.grads["head.bias"].any()


def test_checkpoint_round_trip(tmp_path):
    p = init_params(9)
    p.tensors["conv2.bias"][:] = np.linspace(-1, 1, 16)
    save_checkpoint(tmp_path / "m.c2dp", p, {"norm.mean": np.array([0.25])})
    raw = (tmp_path / "m.c2dp").read_bytes()
    assert raw[:4] == b"C2DP"
    back, extra = load_checkpoint(tmp_path / "m.c2dp")
    assert back.checksum() == p.checksum()
    for k in LAYOUT:
        assert back.tensors[k].tobytes() == p.tensors[k].tobytes()
    assert extra["norm.mean"][0] == np.float32(0.25)


def test_checkpoint_corrupt(tmp_path):
    save_checkpoint(tmp_path / "m.c2dp", init_params(0))
    data = (tmp_path / "m.c2dp").read_bytes()
    (tmp_path / "t.c2dp").write_bytes(data[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "t.c2dp")
    (tmp_path / "b.c2dp").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "b.c2dp")
