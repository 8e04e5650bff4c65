"""Self-supervised k-space splitting and the unrolled reconstruction network."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import coiltools, diffkit, nufft, phasecorr
from .datamodel import KSpaceDataset, ReconConfig
from .diffkit import AdamState, ParamSet
from .encoding import Encoding, full_plan


# ---------------------------------------------------------------- splitting

@dataclass(frozen=True)
class SplitMaskPair:
    lambda1: np.ndarray
    lambda2: np.ndarray
    ratio: float
    seed: int

    def __post_init__(self):
        if self.lambda1.shape != self.lambda2.shape:
            raise ValueError("split masks differ in shape")
        if np.any(self.lambda1 & self.lambda2):
            raise ValueError("split masks overlap")


def split_mask(mask, ratio: float, seed: int):
    """Per blade and line, ``ceil(ratio * n)`` acquired readout points go to the first set.

    Lines with two or more acquired points always keep at least one point
    for the second set.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    mask = np.asarray(mask, dtype=bool)
    n = mask.sum(axis=-1, keepdims=True)
    k = np.ceil(ratio * n).astype(int)
    k = np.where((k >= n) & (n >= 2), n - 1, k)
    keys = np.random.default_rng(seed).random(mask.shape)
    keys = np.where(mask, keys, np.inf)
    order = np.argsort(np.argsort(keys, axis=-1, kind="stable"), axis=-1, kind="stable")
    lam1 = mask & (order < k)
    return lam1, mask & ~lam1


def split_kspace(ds: KSpaceDataset, ratio: float, seed: int):
    """Split acquired samples into two disjoint datasets along the readout.

    Returns ``(y1, y2, masks)``; each output carries its own sample set as
    ``acquired_mask`` and zeros elsewhere.
    """
    lam1, lam2 = split_mask(ds.acquired_mask, ratio, seed)
    y1 = ds.replace(samples=ds.samples * lam1[:, None], acquired_mask=lam1)
    y2 = ds.replace(samples=ds.samples * lam2[:, None], acquired_mask=lam2)
    return y1, y2, SplitMaskPair(lam1, lam2, float(ratio), int(seed))


# ---------------------------------------------------------------- model

@dataclass
class UnrolledModel:
    """Gradient-step data consistency alternating with a learned residual.

    ``params`` holds the U-Net weights (``cnn.`` prefix when shared, ``cnn{c}.``
    per cascade otherwise) and the per-cascade step sizes ``eta``.
    """

    cascades: int
    params: ParamSet
    shared: bool = True
    width: int = 16
    sens_source: str = "classical"

    def __post_init__(self):
        if self.cascades < 1:
            raise ValueError("cascades must be >= 1")
        eta = self.params.get("eta")
        if eta is None or eta.shape != (self.cascades,):
            raise ValueError("params must hold one step size per cascade under 'eta'")
        if self.sens_source != "classical":
            raise NotImplementedError("only classical sensitivity maps are implemented")

    def prefix(self, c: int) -> str:
        return "cnn." if self.shared else f"cnn{c}."

    @classmethod
    def init(cls, cascades: int = 6, width: int = 16, shared: bool = True, eta: float = 0.5,
             seed: int = 0, sens_source: str = "classical") -> "UnrolledModel":
        p = {}
        if shared:
            p.update(diffkit.init_unet(width, seed, "cnn."))
        else:
            for c in range(cascades):
                p.update(diffkit.init_unet(width, seed + 7919 * c, f"cnn{c}."))
        p["eta"] = np.full(cascades, float(eta))
        return cls(cascades, ParamSet(p), shared, width, sens_source)

    def save(self, path, extra_meta: dict | None = None):
        meta = {"cascades": self.cascades, "shared": self.shared, "width": self.width,
                "sens_source": self.sens_source, **(extra_meta or {})}
        self.params.save(path, meta)

    @classmethod
    def load(cls, path) -> "UnrolledModel":
        params, meta = ParamSet.load(path)
        return cls(int(meta["cascades"]), params, bool(meta["shared"]), int(meta["width"]),
                   meta.get("sens_source", "classical"))


def _cnn(model, c, x):
    out = diffkit.cnn_apply(model.params, diffkit.complex_to_channels(x), model.prefix(c))
    return diffkit.channels_to_complex(out)


def unrolled_forward(model: UnrolledModel, y1, enc: Encoding, return_states: bool = False):
    """Run the cascades from the density-compensated adjoint of ``y1``.

    ``x0 = C^H F^H W1 y1``; each cascade does
    ``x <- x - eta_c (N x - x0) - cnn_c(x)`` with ``N = C^H F^H W1 F C``.

    ``y1`` is either a dataset (its samples on ``enc.selection`` are used)
    or an already gathered ``(coils, M)`` array.
    """
    y = enc.gather(y1.samples) if isinstance(y1, KSpaceDataset) else np.asarray(y1)
    b = enc.adjoint(y)
    x = b
    states = [x]
    eta = model.params["eta"]
    for c in range(model.cascades):
        x = x - eta[c] * (enc.normal(x) - b) - _cnn(model, c, x)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite image after cascade {c}")
        states.append(x)
    return (x, states, b) if return_states else x


def _unrolled_vjp(model, enc, states, b, g):
    """Back-propagate image cotangent ``g`` through all cascades."""
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    eta = model.params["eta"]
    for c in reversed(range(model.cascades)):
        x = states[c]
        r = enc.normal(x) - b
        grads["eta"][c] += -np.real(np.vdot(r, g))
        gp, gx = diffkit.cnn_vjp(model.params, diffkit.complex_to_channels(x),
                                 -diffkit.complex_to_channels(g), model.prefix(c))
        for k, v in gp.items():
            grads[k] += v
        g = g - eta[c] * enc.normal(g) + diffkit.channels_to_complex(gx)
    return grads, g


# ---------------------------------------------------------------- loss

def _reproject(enc2: Encoding, x):
    """Per-coil ``F^H W2 F (C x)``."""
    return enc2.coil_adjoint(enc2.forward(x))


def ssl_loss(x_hat, y2, enc2: Encoding, alpha: float = 0.5, return_grad: bool = False):
    """Mixed L1/L2 image-domain consistency with the held-out samples.

    ``r_c = F^H W2 F (C_c x_hat) - F^H W2 y2_c``; the loss is
    ``alpha * sum|r| / N + (1 - alpha) * sqrt(sum|r|**2 / N)`` with ``N`` the
    pixel count times the coil count.
    """
    if enc2.plan.nsamples == 0:
        raise ValueError("empty second split")
    y = enc2.gather(y2.samples) if isinstance(y2, KSpaceDataset) else np.asarray(y2)
    r = _reproject(enc2, x_hat) - enc2.coil_adjoint(y)
    n = r.size
    a = np.abs(r)
    l2 = math.sqrt(float(np.sum(a ** 2)) / n)
    loss = alpha * float(a.sum()) / n + (1 - alpha) * l2
    if not return_grad:
        return loss
    g_r = alpha / n * np.where(a > 0, r / np.where(a > 0, a, 1), 0)
    if l2 > 0:
        g_r = g_r + (1 - alpha) * r / (n * l2)
    # F^H W F is self-adjoint, so the pull-back through C is a coil-weighted sum
    g_x = np.sum(enc2.maps.conj() * enc2.coil_adjoint(nufft.forward(enc2.plan, g_r)), axis=0)
    return loss, g_x


# ---------------------------------------------------------------- data prep

@dataclass
class PreparedSample:
    """Phase-corrected, scaled k-space with its coil maps."""

    ds: KSpaceDataset
    maps: np.ndarray
    scale: float
    name: str = ""


def prepare(ds: KSpaceDataset, cfg: ReconConfig = ReconConfig(), maps=None, name: str = "") -> PreparedSample:
    """Phase correction, classical coil maps and intensity normalization.

    The scale maps the 99th percentile of the full-data adjoint magnitude
    to 1; reconstructions are divided by it afterwards.
    """
    traj = ds.trajectory
    if cfg.phase_correct:
        ds = phasecorr.correct_blades(ds, radius=cfg.phase_radius)
    if maps is None:
        plan = full_plan(traj, cfg.oversampling, cfg.kernel_width)
        dplan = full_plan(traj, cfg.oversampling, cfg.dcf_width)
        maps = coiltools.estimate_sens_lowres(ds, plan, cfg.sens_radius, dcf_plan=dplan)
    enc = _encoding(ds, ds.acquired_mask, maps, cfg)
    x0 = np.abs(enc.adjoint(enc.gather(ds.samples)))
    ref = float(np.percentile(x0, 99))
    scale = 1.0 / ref if ref > 0 else 1.0
    return PreparedSample(ds.replace(samples=ds.samples * scale), maps, scale, name)


def _encoding(ds, mask, maps, cfg):
    return Encoding.build(ds.trajectory, mask, maps, cfg.oversampling, cfg.kernel_width,
                          cfg.dcf_width, cfg.dc_iters)


# ---------------------------------------------------------------- training

@dataclass
class TrainRecord:
    epoch: int
    sample_id: str
    ratio: float
    loss: float
    wall_time: float

    def __post_init__(self):
        if not math.isfinite(self.loss):
            raise FloatingPointError(f"non-finite loss at epoch {self.epoch}, sample {self.sample_id}")


def write_records(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "sample_id", "ratio", "loss", "wall_time"])
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def train_step(model: UnrolledModel, sample: PreparedSample, ratio: float, seed: int,
               cfg: ReconConfig):
    """Loss and parameter gradients for one split of one sample."""
    y1, y2, masks = split_kspace(sample.ds, ratio, seed)
    enc1 = _encoding(sample.ds, masks.lambda1, sample.maps, cfg)
    enc2 = _encoding(sample.ds, masks.lambda2, sample.maps, cfg)
    x, states, b = unrolled_forward(model, y1, enc1, return_states=True)
    loss, g = ssl_loss(x, y2, enc2, cfg.loss_alpha, return_grad=True)
    grads, _ = _unrolled_vjp(model, enc1, states, b, g)
    return loss, grads


def train(samples, cfg: ReconConfig = ReconConfig(), model: UnrolledModel | None = None,
          callback=None):
    """ADAM training with a fresh random split per sample and step (batch 1).

    Parameters
    ----------
    samples : list of PreparedSample or KSpaceDataset
    cfg : ReconConfig
        ``epochs``, ``learning_rate``, ``split_low``/``split_high``,
        ``cascades``, ``channels``, ``shared_weights``, ``eta_init``,
        ``patience`` (0 disables early stopping) and ``seed`` are used.
    callback : callable, optional
        Called with each :class:`TrainRecord`.

    Returns
    -------
    model : UnrolledModel
    records : list of TrainRecord
    """
    if len(samples) == 0:
        raise ValueError("training needs at least one dataset")
    samples = [s if isinstance(s, PreparedSample) else prepare(s, cfg, name=str(i))
               for i, s in enumerate(samples)]
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = UnrolledModel.init(cfg.cascades, cfg.channels, cfg.shared_weights, cfg.eta_init,
                                   seed=int(rng.integers(2 ** 31)), sens_source=cfg.sens_source)
    state = AdamState.zeros(model.params)
    records = []
    best, stall = math.inf, 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for i in order:
            ratio = float(rng.uniform(cfg.split_low, cfg.split_high))
            seed = int(rng.integers(2 ** 63))
            loss, grads = train_step(model, samples[i], ratio, seed, cfg)
            rec = TrainRecord(epoch, samples[i].name or str(i), ratio, loss,
                              time.perf_counter() - t0)
            params, state = diffkit.adam_step(model.params, grads, state, cfg.learning_rate)
            model = UnrolledModel(model.cascades, params, model.shared, model.width,
                                  model.sens_source)
            records.append(rec)
            losses.append(loss)
            if callback is not None:
                callback(rec)
        if cfg.patience:
            mean = float(np.mean(losses))
            if mean < best * (1 - 1e-3):
                best, stall = mean, 0
            else:
                stall += 1
                if stall >= cfg.patience:
                    break
    return model, records


def infer(model: UnrolledModel, ds, cfg: ReconConfig = ReconConfig(), maps=None) -> np.ndarray:
    """Reconstruct from every acquired sample (no split); returns an image in data units."""
    sample = ds if isinstance(ds, PreparedSample) else prepare(ds, cfg, maps)
    enc = _encoding(sample.ds, sample.ds.acquired_mask, sample.maps, cfg)
    return unrolled_forward(model, sample.ds, enc) / sample.scale


def end_to_end_gradcheck(matrix: int = 16, cascades: int = 2, width: int = 4, seed: int = 0,
                         epsilon: float = 1e-6) -> float:
    """Finite-difference check of ``d loss / d params`` through the whole unrolled model.

    Small noiseless problem (4 coils, 6 blades of 4 lines). Biases and the
    output layer are randomized so no pre-activation sits exactly on a ReLU
    kink and every layer contributes.
    """
    import warnings

    from . import phantom, trajectory

    rng = np.random.default_rng(seed)
    truth = phantom.make_phantom(phantom.PhantomSpec.random(matrix, seed=seed))
    maps = phantom.make_coil_maps(4, matrix)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        traj = trajectory.gen_propeller(matrix, 6, 4)
    ds = phantom.simulate_kspace(truth, maps, traj)
    cfg = ReconConfig()
    sample = prepare(ds, cfg, maps=maps)
    model = UnrolledModel.init(cascades, width, shared=False, seed=seed)
    p = dict(model.params)
    for k in p:
        if k.endswith(".b") or k.endswith("out.w"):
            p[k] = rng.standard_normal(p[k].shape) * 0.1
    y1, y2, m = split_kspace(sample.ds, 0.6, seed)
    enc1 = _encoding(sample.ds, m.lambda1, maps, cfg)
    enc2 = _encoding(sample.ds, m.lambda2, maps, cfg)

    def build(q):
        return UnrolledModel(cascades, ParamSet(q), False, width)

    def fun(q):
        return np.array(ssl_loss(unrolled_forward(build(q), y1, enc1), y2, enc2))

    def vjp(q, g):
        mdl = build(q)
        x, states, b = unrolled_forward(mdl, y1, enc1, return_states=True)
        _, gx = ssl_loss(x, y2, enc2, return_grad=True)
        return _unrolled_vjp(mdl, enc1, states, b, gx * g)[0]

    return diffkit.gradcheck(fun, vjp, p, epsilon, seed=seed)
