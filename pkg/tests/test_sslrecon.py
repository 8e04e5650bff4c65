import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from propeller_lab import diffkit, harness, phantom, sslrecon
from propeller_lab.datamodel import ReconConfig
from propeller_lab.sslrecon import UnrolledModel, split_kspace, split_mask

from conftest import quiet_traj

CFG = ReconConfig(phase_correct=False)


@pytest.fixture(scope="module")
def small():
    N = 32
    truth = phantom.make_phantom(phantom.PhantomSpec.random(N, seed=1))
    maps = phantom.make_coil_maps(4, N)
    ds = phantom.simulate_kspace(truth, maps, quiet_traj(N, 12, 8))
    return truth, maps, ds


def _enc(ds, maps, mask=None, cfg=CFG):
    return sslrecon._encoding(ds, ds.acquired_mask if mask is None else mask, maps, cfg)


# ---------------------------------------------------------------- splitting

@given(seed=st.integers(0, 2**63 - 1), ratio=st.floats(0.3, 0.99),
       R=st.sampled_from([1, 2]))
def test_split_mask_algebra(seed, ratio, R):
    mask = quiet_traj(32, 3, 8, inblade_R=R, acs_lines=2).sample_mask()
    l1, l2 = split_mask(mask, ratio, seed)
    assert not np.any(l1 & l2)
    assert np.array_equal(l1 | l2, mask)
    n = mask.sum(-1)
    k1 = l1.sum(-1)
    assert np.all(np.abs(k1 - ratio * n) <= 1)
    assert np.all(l2.sum(-1)[n >= 2] >= 1)


def test_split_count_320():
    mask = np.ones((1, 2, 320), bool)
    l1, _ = split_mask(mask, 0.5, 0)
    assert np.all(l1.sum(-1) == 160)


def test_split_deterministic_and_coil_shared(small):
    _, _, ds = small
    a1, a2, m = split_kspace(ds, 0.6, 11)
    b1, b2, n = split_kspace(ds, 0.6, 11)
    assert np.array_equal(m.lambda1, n.lambda1) and np.array_equal(a1.samples, b1.samples)
    assert np.array_equal(a1.acquired_mask, m.lambda1) and np.array_equal(a2.acquired_mask, m.lambda2)
    assert np.array_equal(a1.samples + a2.samples, ds.samples)
    assert not (a1.samples * ~m.lambda1[:, None]).any()


def test_split_bad_ratio():
    with pytest.raises(ValueError):
        split_mask(np.ones((1, 2, 8), bool), 1.0, 0)


# ---------------------------------------------------------------- forward

def test_eta_zero_returns_adjoint(small):
    _, maps, ds = small
    enc = _enc(ds, maps)
    model = UnrolledModel.init(3, 4, eta=0.0)
    x = sslrecon.unrolled_forward(model, ds, enc)
    assert np.array_equal(x, enc.adjoint(enc.gather(ds.samples)))


def test_landweber_monotone(small):
    truth, maps, ds = small
    s = sslrecon.prepare(ds, CFG, maps=maps)
    enc = _enc(s.ds, maps)
    _, states, _ = sslrecon.unrolled_forward(UnrolledModel.init(8, 4, eta=0.5), s.ds, enc,
                                             return_states=True)
    err = [harness.nrmse(harness.circular_fov(x) / s.scale, truth) for x in states]
    assert all(a > b for a, b in zip(err, err[1:]))


def _shift_pair(cascades, cfg):
    N, sh = 32, (2, -3)
    spec = phantom.PhantomSpec(matrix=N, smoothing=0.6, ellipses=(
        phantom.Ellipse((0.1, 0), (0.4, 0.55), 20, 1.0), phantom.Ellipse((0, 0.1), (0.1, 0.2), 0, -0.5)))
    truth, maps, t = phantom.make_phantom(spec), phantom.make_coil_maps(4, N), quiet_traj(N, 12, 8)
    model = UnrolledModel.init(max(cascades, 1), 4, eta=0.5 if cascades else 0.0)
    out = []
    for img, mp in ((truth, maps), (np.roll(truth, sh, (0, 1)), np.roll(maps, sh, (1, 2)))):
        ds = phantom.simulate_kspace(img, mp, t)
        out.append(sslrecon.unrolled_forward(model, ds, _enc(ds, mp, cfg=cfg)))
    inner = (slice(5, -5), slice(5, -5))
    d = (np.roll(out[0], sh, (0, 1)) - out[1])[inner]
    return np.linalg.norm(d) / np.linalg.norm(out[1][inner])


def test_shift_equivariance_adjoint():
    assert _shift_pair(0, ReconConfig(kernel_width=8)) < 1e-6


def test_shift_equivariance_cascades():
    # the finite square FOV couples border pixels, which a circular shift wraps
    assert _shift_pair(4, ReconConfig()) < 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_cascade_raises(small):
    _, maps, ds = small
    model = UnrolledModel.init(2, 4, eta=1e300)
    with pytest.raises(FloatingPointError, match="cascade"):
        sslrecon.unrolled_forward(model, ds.replace(samples=ds.samples * 1e300), _enc(ds, maps))


# ---------------------------------------------------------------- loss

def _split_encs(ds, maps, seed=3):
    y1, y2, m = split_kspace(ds, 0.6, seed)
    return y1, y2, _enc(ds, maps, m.lambda1), _enc(ds, maps, m.lambda2)


def test_loss_zero_on_consistent_data(small, rng):
    _, maps, ds = small
    _, _, _, enc2 = _split_encs(ds, maps)
    x = rng.standard_normal((32, 32)) + 1j * rng.standard_normal((32, 32))
    assert sslrecon.ssl_loss(x, enc2.forward(x), enc2) < 1e-10


def test_loss_homogeneous(small, rng):
    _, maps, ds = small
    _, _, _, enc2 = _split_encs(ds, maps)
    x = rng.standard_normal((32, 32)) + 0j
    zero = np.zeros((4, enc2.plan.nsamples), complex)
    for alpha in (0.0, 0.5):
        a = sslrecon.ssl_loss(x, zero, enc2, alpha)
        assert sslrecon.ssl_loss(2 * x, zero, enc2, alpha) == pytest.approx(2 * a, rel=1e-12)


def test_loss_gradcheck(small, rng):
    _, maps, ds = small
    _, y2, _, enc2 = _split_encs(ds, maps)
    x = rng.standard_normal((32, 32)) + 1j * rng.standard_normal((32, 32))
    err = diffkit.gradcheck(lambda p: np.array(sslrecon.ssl_loss(p["x"], y2, enc2)),
                            lambda p, g: {"x": g * sslrecon.ssl_loss(p["x"], y2, enc2,
                                                                     return_grad=True)[1]},
                            {"x": x})
    assert err < 1e-4


def test_end_to_end_gradcheck():
    assert sslrecon.end_to_end_gradcheck(seed=0) < 1e-3


# ---------------------------------------------------------------- model & training

def test_model_invariants(tmp_path):
    with pytest.raises(ValueError):
        UnrolledModel.init(0)
    with pytest.raises(NotImplementedError):
        UnrolledModel.init(2, 4, sens_source="classical_plus_refine")
    m = UnrolledModel.init(3, 4, shared=False, seed=2)
    assert {k.split(".")[0] for k in m.params} == {"cnn0", "cnn1", "cnn2", "eta"}
    m.save(tmp_path / "ck")
    back = UnrolledModel.load(tmp_path / "ck")
    assert back.cascades == 3 and not back.shared
    assert all(np.array_equal(back.params[k], m.params[k]) for k in m.params)


def test_train_record_requires_finite_loss():
    with pytest.raises(FloatingPointError):
        sslrecon.TrainRecord(0, "a", 0.5, float("nan"), 0.0)


def test_train_needs_data():
    with pytest.raises(ValueError):
        sslrecon.train([], CFG)


def _tiny_cfg(**kw):
    base = dict(cascades=2, channels=4, epochs=2, learning_rate=1e-3, phase_correct=False, seed=5)
    return ReconConfig(**(base | kw))


def test_lr_zero_keeps_params(small):
    _, _, ds = small
    cfg = _tiny_cfg(learning_rate=0.0)
    m0 = UnrolledModel.init(2, 4, seed=9)
    m1, recs = sslrecon.train([ds], cfg, model=m0)
    assert len(recs) == 2
    assert all(np.array_equal(m1.params[k], m0.params[k]) for k in m0.params)


def test_training_deterministic(small, tmp_path):
    _, _, ds = small
    a, ra = sslrecon.train([ds, ds], _tiny_cfg())
    b, rb = sslrecon.train([ds, ds], _tiny_cfg())
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert [r.loss for r in ra] == [r.loss for r in rb]
    assert all(0.3 <= r.ratio <= 0.99 for r in ra)
    sslrecon.write_records(ra, tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert list(rows[0]) == ["epoch", "sample_id", "ratio", "loss", "wall_time"]
    assert len(rows) == 4


def test_early_stopping(small):
    _, _, ds = small
    # frozen weights: epoch losses only wander with the random split ratio
    _, recs = sslrecon.train([ds], _tiny_cfg(epochs=50, learning_rate=0.0, patience=2))
    assert 3 <= len(recs) < 50


def test_infer_zero_init_is_adjoint(small):
    _, maps, ds = small
    model = UnrolledModel.init(2, 4, eta=0.0)
    s = sslrecon.prepare(ds, CFG, maps=maps)
    enc = _enc(s.ds, maps)
    x = sslrecon.infer(model, ds, CFG, maps=maps)
    assert np.allclose(x, enc.adjoint(enc.gather(s.ds.samples)) / s.scale, rtol=0, atol=1e-12 * np.abs(x).max())
    assert np.array_equal(x, sslrecon.infer(model, ds, CFG, maps=maps))


@pytest.mark.slow
def test_noiseless_training_never_hurts():
    # one dataset per seed; 20 epochs is too few for ADAM to settle, 60 is enough
    setup = phantom.SimulationSetup(matrix=64, coils=4, noise_fraction=0.0)
    gains = []
    for seed in range(3):
        ds = phantom.simulate(setup, 100 + 10 * seed)
        truth = ds.extras["truth"].real
        cfg = ReconConfig(cascades=6, channels=8, epochs=60, learning_rate=1e-3, seed=seed)
        model, _ = sslrecon.train([ds], cfg)
        zero = UnrolledModel.init(6, 8, eta=cfg.eta_init)
        e0 = harness.nrmse(harness.recon_ssl_pipeline(ds, zero, cfg), truth)
        e1 = harness.nrmse(harness.recon_ssl_pipeline(ds, model, cfg), truth)
        gains.append(e0 - e1)
    assert np.mean(gains) >= 0
