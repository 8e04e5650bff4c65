"""Metrics, the classical baseline pipelines and experiment orchestration."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import coiltools, grappa, mppca, nufft, phantom, phasecorr, sslrecon, trajectory
from .datamodel import KSpaceDataset, ReconConfig, write_arrays
from .encoding import dataset_weights, flatten, full_plan

METRICS_HEADER = ("dataset", "method", "R", "nrmse", "psnr", "ssim")


# ---------------------------------------------------------------- metrics

def _mag_pair(x, ref):
    x, ref = np.abs(np.asarray(x)), np.abs(np.asarray(ref))
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x, ref


def nrmse(x, ref) -> float:
    """``|| |x| - |ref| ||_2 / || |ref| ||_2``."""
    x, ref = _mag_pair(x, ref)
    den = np.linalg.norm(ref)
    if den == 0:
        raise ValueError("reference image has zero norm")
    return float(np.linalg.norm(x - ref) / den)


def psnr(x, ref) -> float:
    """Peak SNR in dB with the reference magnitude maximum as peak."""
    x, ref = _mag_pair(x, ref)
    peak = ref.max()
    if peak == 0:
        raise ValueError("reference image has zero peak")
    mse = np.mean((x - ref) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(peak ** 2 / mse))


def _gauss_window(size=8, sigma=1.5):
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-t ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(x, ref, window: int = 8, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity of the magnitudes, Gaussian window, valid region.

    The dynamic range is the reference magnitude maximum.
    """
    x, ref = _mag_pair(x, ref)
    L = ref.max()
    if L == 0:
        raise ValueError("reference image has zero peak")
    g = _gauss_window(window, sigma)
    w = np.outer(g, g)

    def filt(a):
        return signal.convolve2d(a, w, mode="valid")

    mx, my = filt(x), filt(ref)
    sxx = filt(x * x) - mx ** 2
    syy = filt(ref * ref) - my ** 2
    sxy = filt(x * ref) - mx * my
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
    return float(np.mean(s))


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, dataset, method, R, image, ref):
        m = {"dataset": str(dataset), "method": method, "R": int(R), "nrmse": nrmse(image, ref),
             "psnr": psnr(image, ref), "ssim": ssim(image, ref)}
        if m["nrmse"] < 0 or m["ssim"] > 1 + 1e-12:
            raise ValueError("metric out of range")
        self.rows.append(m)
        return m

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def median(self, method, R, key="nrmse") -> float:
        vals = [r[key] for r in self.rows if r["method"] == method and r["R"] == R]
        if not vals:
            raise KeyError(f"no rows for {method} R={R}")
        return float(np.median(vals))


# ---------------------------------------------------------------- pipelines

def _psi(ds: KSpaceDataset):
    if ds.prescan is None:
        return None
    return coiltools.estimate_covariance(ds.prescan)


def gridded_coil_images(ds: KSpaceDataset, cfg: ReconConfig = ReconConfig()) -> np.ndarray:
    """Density-compensated per-coil adjoint over every acquired sample."""
    traj = ds.trajectory
    plan = full_plan(traj, cfg.oversampling, cfg.kernel_width)
    w = dataset_weights(traj, ds.acquired_mask, cfg.oversampling, cfg.dcf_width, cfg.dc_iters)
    sel = ds.acquired_mask.ravel()
    return nufft.adjoint(plan.subset(sel), flatten(ds.samples)[:, sel], w.ravel()[sel])


def circular_fov(image) -> np.ndarray:
    """Zero every pixel farther than ``N/2`` from the image center.

    Rotated blades alias into the square's corners, so only the inscribed
    circle is a valid reconstruction region.
    """
    image = np.asarray(image)
    N = image.shape[-1]
    r = np.arange(N) - N // 2
    inside = np.hypot(r[:, None], r[None, :]) <= N / 2
    return image * inside


def recon_grappa_pipeline(ds: KSpaceDataset, cfg: ReconConfig = ReconConfig()) -> np.ndarray:
    """Whiten, per-blade GRAPPA, unwhiten, phase-correct, grid per coil, Walsh-combine.

    The result is restricted to the circular field of view.
    """
    if not np.any(ds.samples):
        return np.zeros((ds.trajectory.matrix,) * 2, dtype=complex)
    psi = _psi(ds)
    work = coiltools.whiten_dataset(ds, psi) if psi is not None else ds
    work = grappa.grappa_dataset(work, (cfg.grappa_source_lines, cfg.grappa_taps),
                                 cfg.grappa_lambda)
    if psi is not None:
        work = coiltools.unwhiten_dataset(work, psi)
    if not np.any(work.samples):
        return np.zeros((ds.trajectory.matrix,) * 2, dtype=complex)
    work = phasecorr.correct_blades(work, radius=cfg.phase_radius)
    return circular_fov(coiltools.walsh_combine(gridded_coil_images(work, cfg), cfg.walsh_block))


def recon_mppca_pipeline(ds: KSpaceDataset, cfg: ReconConfig = ReconConfig()) -> np.ndarray:
    """Blade-wise MPPCA denoising ahead of the GRAPPA pipeline."""
    spec = mppca.PatchSpec(cfg.patch[0], cfg.patch[1], cfg.stride)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        den = mppca.figure2_pipeline(ds, _psi(ds), spec)
    return recon_grappa_pipeline(den, cfg)


def recon_ssl_pipeline(ds: KSpaceDataset, model: sslrecon.UnrolledModel,
                       cfg: ReconConfig = ReconConfig()) -> np.ndarray:
    return circular_fov(sslrecon.infer(model, ds, cfg))


def halve_blades(ds: KSpaceDataset) -> KSpaceDataset:
    """Keep every other blade (cross-blade acceleration by 2)."""
    traj = trajectory.subsample_blades(ds.trajectory, 2)
    return ds.replace(samples=ds.samples[::2], acquired_mask=ds.acquired_mask[::2],
                      trajectory=traj)


# ---------------------------------------------------------------- image dumps

def to_uint8(image, percentile: float = 99.0, scale: float = 1.0, ref_level: float | None = None):
    """Magnitude scaled so the given percentile (or ``ref_level``) maps to 255, clipped."""
    m = np.abs(np.asarray(image)) * scale
    level = float(np.percentile(m, percentile)) if ref_level is None else ref_level
    if level <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.clip(np.round(m / level * 255), 0, 255).astype(np.uint8)


def write_pgm(path, image8):
    """Binary P5 PGM, maxval 255."""
    a = np.asarray(image8)
    if a.dtype != np.uint8 or a.ndim != 2:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    pos += 1
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError("not an 8-bit P5 PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def difference_image(x, ref, gain: float = 5.0) -> np.ndarray:
    """``gain * (|x| - |ref|)``; identical inputs give exact zeros."""
    x, ref = _mag_pair(x, ref)
    return gain * (x - ref)


# ---------------------------------------------------------------- experiment

@dataclass
class SuiteConfig:
    """Desk-scale comparison of the three methods on seeded phantoms."""

    eval_seeds: tuple = (0, 1, 2, 3, 4)
    train_seeds: tuple = (1000, 1001, 1002, 1003, 1004, 1005, 1006, 1007)
    setup: phantom.SimulationSetup = field(default_factory=phantom.SimulationSetup)
    recon: ReconConfig = field(default_factory=ReconConfig)
    checkpoint: str | None = None
    out_dir: str | None = None
    write_images: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        d = dict(d)
        setup = phantom.SimulationSetup(**d.pop("setup", {}))
        recon = ReconConfig.from_dict(d.pop("recon", {}))
        for k in ("eval_seeds", "train_seeds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(setup=setup, recon=recon, **d)


def simulate_many(setup, seeds):
    return [phantom.simulate(setup, s) for s in seeds]


def get_model(cfg: SuiteConfig, log=None):
    if cfg.checkpoint and Path(cfg.checkpoint).exists():
        return sslrecon.UnrolledModel.load(cfg.checkpoint), []
    if not cfg.train_seeds:
        raise ValueError("no checkpoint and no training seeds")
    data = simulate_many(cfg.setup, cfg.train_seeds)
    model, records = sslrecon.train(data, cfg.recon, callback=log)
    if cfg.checkpoint:
        model.save(cfg.checkpoint, {"seed": cfg.recon.seed})
    return model, records


MPPCA_R4 = "mppca(unscored)"


def run_experiment(cfg: SuiteConfig, model: sslrecon.UnrolledModel | None = None,
                   log=None) -> MetricsReport:
    """Five rows per phantom: GRAPPA, MPPCA and SSL at R=2, MPPCA (flagged) and SSL at R=4.

    With ``out_dir`` set, writes ``metrics.csv``, magnitude PGMs and x5
    difference PGMs against the truth, and the raw complex images as a
    ``.pks`` container.
    """
    if model is None:
        model, _ = get_model(cfg, log)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    report = MetricsReport()
    rc = cfg.recon
    for seed in cfg.eval_seeds:
        ds = phantom.simulate(cfg.setup, seed)
        truth = ds.extras["truth"]
        r4 = halve_blades(ds)
        R2, R4 = ds.trajectory.inblade_R, 2 * ds.trajectory.inblade_R
        images = {
            ("grappa", R2): recon_grappa_pipeline(ds, rc),
            ("mppca", R2): recon_mppca_pipeline(ds, rc),
            ("ssl", R2): recon_ssl_pipeline(ds, model, rc),
            (MPPCA_R4, R4): recon_mppca_pipeline(r4, rc),
            ("ssl", R4): recon_ssl_pipeline(r4, model, rc),
        }
        name = f"phantom{seed}"
        for (method, R), img in images.items():
            report.add(name, method, R, img, truth)
        if out and cfg.write_images:
            level = float(np.percentile(np.abs(truth), 99))
            write_pgm(out / f"{name}_truth.pgm", to_uint8(truth, ref_level=level))
            raw = {"truth": truth}
            for (method, R), img in images.items():
                tag = f"{name}_{method.replace('(', '_').replace(')', '')}_R{R}"
                write_pgm(out / f"{tag}.pgm", to_uint8(img, ref_level=level))
                diff = difference_image(img, truth)
                write_pgm(out / f"{tag}_diff.pgm", to_uint8(diff, ref_level=level))
                raw[tag] = img
            write_arrays(out / f"{name}_images.pks", raw, meta={"seed": int(seed)})
        if log:
            log({"dataset": name, **{f"{m}_R{R}": nrmse(i, truth) for (m, R), i in images.items()}})
    if out:
        report.write_csv(out / "metrics.csv")
    return report
