import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from propeller_lab import diffkit as dk
from propeller_lab.diffkit import AdamState, ParamSet


@pytest.fixture
def params():
    return dk.init_unet(4, seed=3)


def _randomize(p, rng, scale=0.2):
    q = p.copy()
    for k in q:
        q[k] = rng.standard_normal(q[k].shape) * scale
    return q


def test_zero_final_layer_gives_zero(params, rng):
    x = rng.standard_normal((2, 16, 16))
    assert not dk.cnn_apply(params, x).any()


def test_zero_input_zero_biases(params, rng):
    p = params.copy()
    for k in p:
        if k.endswith(".w"):
            p[k] = rng.standard_normal(p[k].shape)
    assert not dk.cnn_apply(p, np.zeros((2, 8, 8))).any()


def test_deterministic(params, rng):
    p = _randomize(params, np.random.default_rng(5))
    x = np.random.default_rng(6).standard_normal((2, 16, 16))
    a, b = dk.cnn_apply(p, x), dk.cnn_apply(p.copy(), x.copy())
    assert np.array_equal(a, b) and a.any()


def test_shape_errors(params):
    with pytest.raises(ValueError):
        dk.cnn_apply(params, np.zeros((3, 8, 8)))
    with pytest.raises(ValueError):
        dk.cnn_apply(params, np.zeros((2, 8, 8), complex))
    with pytest.raises(ValueError):
        dk.cnn_vjp(params, np.zeros((2, 8, 8)), np.zeros((2, 4, 4)))


def test_param_count_and_init_shape():
    p = dk.init_unet(16, seed=0)
    assert p.count == 26050
    assert not p["cnn.out.w"].any() and not p["cnn.out.b"].any()


@pytest.mark.parametrize("name", sorted(dk.REGISTRY))
def test_registered_ops_pass_gradcheck(name):
    fun, vjp, point = dk.REGISTRY[name](np.random.default_rng(0))
    assert dk.gradcheck(fun, vjp, point) < 1e-4


def test_cnn_gradcheck_8x8_width4():
    err = dk.check_registered(seed=1)["cnn"]
    assert err < 1e-4


def test_identity_gradcheck(rng):
    err = dk.gradcheck(lambda p: p["x"], lambda p, g: {"x": g}, {"x": rng.standard_normal(10)})
    assert err < 1e-9


def test_gradcheck_catches_wrong_vjp(rng):
    err = dk.gradcheck(lambda p: p["x"] ** 2, lambda p, g: {"x": g * p["x"]},
                       {"x": rng.standard_normal(5)})
    assert err > 0.1


def test_vjp_zero_cotangent_and_linearity(params):
    rng = np.random.default_rng(2)
    p = _randomize(params, rng)
    x = rng.standard_normal((2, 8, 8))
    gp, gx = dk.cnn_vjp(p, x, np.zeros((2, 8, 8)))
    assert not gx.any() and all(not v.any() for v in gp.values())
    ct = rng.standard_normal((2, 8, 8))
    g1, x1 = dk.cnn_vjp(p, x, ct)
    g3, x3 = dk.cnn_vjp(p, x, -2.5 * ct)
    assert np.allclose(x3, -2.5 * x1, rtol=1e-12, atol=1e-15)
    for k in g1:
        assert np.allclose(g3[k], -2.5 * g1[k], rtol=1e-12, atol=1e-15)


def test_complex_channel_roundtrip(rng):
    z = rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5))
    assert np.array_equal(dk.channels_to_complex(dk.complex_to_channels(z)), z)


def test_adam_first_step_closed_form():
    p = ParamSet({"t": np.zeros(1)})
    new, st_ = dk.adam_step(p, {"t": np.ones(1)}, AdamState.zeros(p), lr=1e-4)
    assert new["t"][0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
    assert new["t"][0] == pytest.approx(-9.99999999e-5, rel=1e-9)
    assert st_.step == 1


def test_adam_zero_grad_is_noop():
    p = ParamSet({"t": np.arange(3.0)})
    new, _ = dk.adam_step(p, {"t": np.zeros(3)}, AdamState.zeros(p), lr=1e-2)
    assert np.array_equal(new["t"], p["t"])


def test_adam_two_steps_similar():
    p = ParamSet({"t": np.zeros(1)})
    s = AdamState.zeros(p)
    p1, s = dk.adam_step(p, {"t": np.ones(1)}, s, lr=1e-3)
    p2, s = dk.adam_step(p1, {"t": np.ones(1)}, s, lr=1e-3)
    d1, d2 = abs(p1["t"][0]), abs(p2["t"][0] - p1["t"][0])
    assert abs(d2 - d1) / d1 < 0.01


@settings(max_examples=10)
@given(seed=st.integers(0, 2**31), steps=st.integers(1, 5))
def test_adam_lr_zero_identity(seed, steps):
    rng = np.random.default_rng(seed)
    p = ParamSet({"a": rng.standard_normal(4), "b": rng.standard_normal((2, 2))})
    s = AdamState.zeros(p)
    q = p
    for _ in range(steps):
        q, s = dk.adam_step(q, {k: rng.standard_normal(v.shape) for k, v in p.items()}, s, lr=0.0)
    assert all(np.array_equal(q[k], p[k]) for k in p)


def test_adam_rejects_nonfinite():
    p = ParamSet({"t": np.zeros(2)})
    with pytest.raises(FloatingPointError):
        dk.adam_step(p, {"t": np.array([1.0, np.nan])}, AdamState.zeros(p), lr=1e-3)


def test_paramset_invariants(tmp_path):
    with pytest.raises(ValueError):
        ParamSet({"x": [np.inf]})
    p = dk.init_unet(4, seed=1)
    p.save(tmp_path / "ck")
    q, meta = ParamSet.load(tmp_path / "ck")
    assert set(q) == set(p) and all(np.array_equal(q[k], p[k]) for k in p)
    import json
    man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert {a["dtype"] for a in man["arrays"].values()} == {"f64le"}
