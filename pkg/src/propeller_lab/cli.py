"""``propeller-lab`` command line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffkit, harness, mppca, phantom, sslrecon
from .datamodel import ReconConfig, read_dataset, write_arrays, write_dataset

log = logging.getLogger("propeller_lab")


def _load_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _recon_config(path, seed=None) -> ReconConfig:
    d = _load_json(path)
    if seed is not None:
        d["seed"] = seed
    return ReconConfig.from_dict(d)


def _write_image(path, image, meta, pgm=None):
    write_arrays(path, {"image": np.asarray(image, dtype=complex)}, meta=meta,
                 extra_manifest={"kind": "image"})
    if pgm:
        harness.write_pgm(pgm, harness.to_uint8(image))


def cmd_sim(a):
    d = _load_json(a.config)
    setup = phantom.SimulationSetup(**d)
    seeds = [a.seed + i for i in range(a.count)]
    out = Path(a.out)
    for s in seeds:
        ds = phantom.simulate(setup, s, with_truth=not a.no_truth)
        path = out if a.count == 1 else out / f"sim_{s:05d}.pks"
        write_dataset(ds, path)
        log.info("wrote %s", path)


def cmd_recon(a):
    cfg = _recon_config(a.config)
    ds = read_dataset(a.inp)
    if a.method == "grappa":
        img = harness.recon_grappa_pipeline(ds, cfg)
    else:
        img = harness.recon_mppca_pipeline(ds, cfg)
    _write_image(a.out, img, {"method": a.method}, a.pgm)


def cmd_denoise(a):
    ds = read_dataset(a.inp)
    spec = mppca.PatchSpec(a.patch[0], a.patch[1], a.stride)
    out = mppca.figure2_pipeline(ds, harness._psi(ds), spec)
    write_dataset(out, a.out)


def _dataset_paths(root):
    root = Path(root)
    if (root / "manifest.json").exists():
        return [root]
    paths = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
    if not paths:
        raise SystemExit(f"no .pks datasets found under {root}")
    return paths


def cmd_train(a):
    cfg = _recon_config(a.config, a.seed)
    paths = _dataset_paths(a.data)
    cfg_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()}
    samples = [sslrecon.prepare(read_dataset(p), cfg, name=p.name) for p in paths]

    def progress(rec):
        log.info("epoch %d sample %s ratio %.3f loss %.6g", rec.epoch, rec.sample_id,
                 rec.ratio, rec.loss)

    model, records = sslrecon.train(samples, cfg, callback=progress)
    model.save(a.out, {"config": cfg_dict, "datasets": [p.name for p in paths]})
    rec_path = Path(a.records) if a.records else Path(a.out) / "train_records.csv"
    sslrecon.write_records(records, rec_path)
    log.info("checkpoint %s, %d records -> %s", a.out, len(records), rec_path)


def cmd_infer(a):
    model = sslrecon.UnrolledModel.load(a.ckpt)
    cfg = _recon_config(a.config)
    ds = read_dataset(a.inp)
    if a.half_blades:
        ds = harness.halve_blades(ds)
    img = harness.recon_ssl_pipeline(ds, model, cfg)
    _write_image(a.out, img, {"method": "ssl", "half_blades": bool(a.half_blades)}, a.pgm)


def cmd_eval(a):
    d = _load_json(a.config)
    if a.ckpt:
        d["checkpoint"] = a.ckpt
    if a.out:
        d["out_dir"] = a.out
    cfg = harness.SuiteConfig.from_dict(d)
    report = harness.run_experiment(cfg, log=lambda r: log.info("%s", r))
    for m, R in (("grappa", 2), ("mppca", 2), ("ssl", 2), (harness.MPPCA_R4, 4), ("ssl", 4)):
        try:
            print(f"{m:>16s} R={R}: median NRMSE {report.median(m, R):.4f}")
        except KeyError:
            pass


def cmd_gradcheck(a):
    res = diffkit.check_registered(seed=a.seed)
    res["unrolled(2 cascades)"] = sslrecon.end_to_end_gradcheck(seed=a.seed)
    bad = False
    for name, err in res.items():
        tol = 1e-3 if name.startswith("unrolled") else 1e-4
        ok = err < tol
        bad |= not ok
        print(f"{name:24s} max rel err {err:.3e}  {'PASS' if ok else 'FAIL'} (< {tol:g})")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="propeller-lab",
                                description="Desk-scale PROPELLER reconstruction laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sim", help="simulate noisy phantom datasets")
    s.add_argument("--config", help="JSON with simulation settings")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1, help="number of datasets (>1 writes a directory)")
    s.add_argument("--no-truth", action="store_true", help="omit truth/maps extras")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sim)

    s = sub.add_parser("recon", help="classical reconstruction")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=("grappa", "mppca"), default="grappa")
    s.add_argument("--config")
    s.add_argument("--pgm")
    s.set_defaults(func=cmd_recon)

    s = sub.add_parser("denoise", help="k-space denoising")
    dsub = s.add_subparsers(dest="denoiser", required=True)
    m = dsub.add_parser("mppca", help="blade-wise coil MPPCA")
    m.add_argument("--in", dest="inp", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--patch", type=int, nargs=2, default=(7, 7), metavar=("H", "W"))
    m.add_argument("--stride", type=int, default=1)
    m.add_argument("--config")
    m.set_defaults(func=cmd_denoise)

    s = sub.add_parser("train", help="self-supervised training")
    s.add_argument("--data", required=True, help="directory of .pks datasets")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--records", help="TrainRecord CSV (default: inside the checkpoint)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="reconstruct with a trained model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--half-blades", action="store_true", help="drop every other blade first")
    s.add_argument("--config")
    s.add_argument("--pgm")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="three-method comparison on seeded phantoms")
    s.add_argument("--config")
    s.add_argument("--ckpt")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return int(args.func(args) or 0)
    except (ValueError, OSError) as exc:
        print(f"propeller-lab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
