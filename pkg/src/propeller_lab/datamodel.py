"""In-memory data types and the ``.pks`` on-disk container.

A ``.pks`` container is a directory holding ``manifest.json`` and one raw
little-endian blob per array. Complex arrays are stored as interleaved
real/imaginary pairs.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1

# manifest dtype string -> numpy dtype
DTYPES = {
    "c64le": np.dtype("<c8"),
    "c128le": np.dtype("<c16"),
    "f32le": np.dtype("<f4"),
    "f64le": np.dtype("<f8"),
    "u8": np.dtype("u1"),
}


class ContainerError(ValueError):
    """Raised when a ``.pks`` container is malformed or inconsistent."""


class InvariantError(ValueError):
    """Raised when a data object violates one of its invariants."""


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.bool_:
        return "u8"
    for code, dt in DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return code
    raise ContainerError(f"unsupported array dtype {arr.dtype}")


@dataclass(frozen=True)
class NoisePrescan:
    """Noise-only samples recorded with the RF off, shape ``[coil, sample]``."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2:
            raise InvariantError("prescan samples must be [coil][sample]")
        if s.shape[1] < 10 * s.shape[0]:
            raise InvariantError(
                f"prescan needs >= {10 * s.shape[0]} samples for {s.shape[0]} coils, got {s.shape[1]}")
        if not np.all(np.isfinite(s)):
            raise InvariantError("prescan contains non-finite values")

    @property
    def coils(self) -> int:
        return self.samples.shape[0]

    @property
    def nsamples(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class KSpaceDataset:
    """Blade-organized multi-coil PROPELLER k-space.

    Parameters
    ----------
    samples : ndarray, complex, shape ``(blades, coils, lines, readout)``
    acquired_mask : ndarray, bool, shape ``(blades, lines, readout)``
        Sampling mask shared by all coils.
    trajectory : BladeTrajectory
        Geometry of the samples.
    prescan : NoisePrescan, optional
    meta : dict
        Descriptive acquisition metadata (TE, TR, flip angle, FOV). Never
        consumed by any reconstruction.
    extras : dict
        Additional named arrays carried through the container, e.g. the
        ground-truth image and coil maps written by the simulator.
    """

    samples: np.ndarray
    acquired_mask: np.ndarray
    trajectory: Any
    prescan: NoisePrescan | None = None
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        s, m = self.samples, self.acquired_mask
        if s.ndim != 4:
            raise InvariantError("samples must be [blade][coil][line][readout]")
        nb, nc, nl, nr = s.shape
        if nb < 1 or nc < 1:
            raise InvariantError("need at least one blade and one coil")
        if nr < 2 * nl:
            raise InvariantError(f"readout ({nr}) must be >= 2 * lines_per_blade ({nl})")
        if m.shape != (nb, nl, nr) or m.dtype != np.bool_:
            raise InvariantError(f"acquired_mask must be bool {(nb, nl, nr)}, got {m.dtype} {m.shape}")
        if not np.all(np.isfinite(s)):
            raise InvariantError("samples contain non-finite values")
        if np.any(s[np.broadcast_to(~m[:, None], s.shape)] != 0):
            raise InvariantError("nonzero sample at a position outside acquired_mask")
        if self.trajectory is not None:
            t = self.trajectory
            if (t.nblades, t.lines_per_blade, t.readout) != (nb, nl, nr):
                raise InvariantError("trajectory geometry does not match samples")
        if self.prescan is not None and self.prescan.coils != nc:
            raise InvariantError("prescan coil count does not match samples")

    @property
    def blades(self) -> int:
        return self.samples.shape[0]

    @property
    def coils(self) -> int:
        return self.samples.shape[1]

    @property
    def lines_per_blade(self) -> int:
        return self.samples.shape[2]

    @property
    def readout(self) -> int:
        return self.samples.shape[3]

    def replace(self, **changes) -> "KSpaceDataset":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return KSpaceDataset(**kw)


@dataclass(frozen=True)
class ReconConfig:
    """Numerical knobs shared by the reconstruction pipelines."""

    oversampling: float = 2.0
    kernel_width: int = 4
    dcf_width: int = 6
    dc_iters: int = 10
    grappa_source_lines: int = 2
    grappa_taps: int = 5
    grappa_lambda: float = 1e-4
    walsh_block: int = 7
    patch: tuple = (7, 7)
    stride: int = 1
    phase_radius: float | None = None
    sens_radius: float | None = None
    # self-supervised learning
    cascades: int = 6
    channels: int = 16
    learning_rate: float = 1e-3
    epochs: int = 200
    split_low: float = 0.3
    split_high: float = 0.99
    loss_alpha: float = 0.5
    shared_weights: bool = True
    eta_init: float = 0.5
    patience: int = 0
    sens_source: str = "classical"
    phase_correct: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("kernel_width", "dcf_width", "dc_iters", "grappa_source_lines", "grappa_taps",
                     "walsh_block", "stride", "cascades", "channels", "epochs"):
            if getattr(self, name) < 1:
                raise InvariantError(f"{name} must be positive")
        if self.oversampling <= 0 or self.learning_rate < 0:
            raise InvariantError("oversampling must be positive, learning_rate non-negative")
        if not (0 < self.split_low < self.split_high < 1):
            raise InvariantError("split-ratio bounds must satisfy 0 < low < high < 1")
        if not 0 <= self.loss_alpha <= 1:
            raise InvariantError("loss_alpha must lie in [0, 1]")
        if self.sens_source not in ("classical", "classical_plus_refine"):
            raise InvariantError(f"unknown sens_source {self.sens_source!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvariantError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "patch" in d:
            d["patch"] = tuple(d["patch"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ReconConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# container I/O

def write_arrays(path, arrays: dict, meta: dict | None = None, extra_manifest: dict | None = None,
                 shape: list | None = None):
    """Write named arrays as a ``.pks`` directory."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ContainerError(f"cannot create container at {path}: {exc}") from exc
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        fname = f"{name}.bin"
        data = np.ascontiguousarray(arr.astype(DTYPES[code], copy=False))
        with open(path / fname, "wb") as fh:
            fh.write(data.tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": code}
    manifest = {
        "version": FORMAT_VERSION,
        "shape": list(shape) if shape is not None else [],
        "arrays": entries,
        "meta": meta or {},
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    tmp = path / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, path / "manifest.json")


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    try:
        text = mpath.read_text()
    except OSError as exc:
        raise ContainerError(f"cannot read manifest at {mpath}: {exc}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContainerError(f"malformed manifest: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ContainerError("malformed manifest: not an object")
    for key in ("version", "shape", "arrays", "meta"):
        if key not in manifest:
            raise ContainerError(f"malformed manifest: missing key {key!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {manifest['version']}")
    return manifest


def read_arrays(path) -> tuple[dict, dict]:
    """Read every array of a ``.pks`` directory. Returns ``(arrays, manifest)``."""
    path = Path(path)
    manifest = read_manifest(path)
    base = path if path.is_dir() else path.parent
    arrays = {}
    for name, entry in manifest["arrays"].items():
        try:
            dt = DTYPES[entry["dtype"]]
            shape = tuple(int(n) for n in entry["shape"])
            raw = (base / entry["file"]).read_bytes()
        except (KeyError, TypeError) as exc:
            raise ContainerError(f"malformed manifest entry for {name!r}") from exc
        except OSError as exc:
            raise ContainerError(f"missing payload for {name!r}: {exc}") from exc
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if len(raw) != expected:
            raise ContainerError(
                f"payload length mismatch for {name!r}: manifest implies {expected} bytes, file has {len(raw)}")
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        if arr.dtype.kind in "fc" and not np.all(np.isfinite(arr)):
            raise ContainerError(f"non-finite values in payload {name!r}")
        arrays[name] = arr
    return arrays, manifest


def write_dataset(dataset: KSpaceDataset, path) -> None:
    """Serialize a dataset to a ``.pks`` container (bit-exact)."""
    dataset.validate()
    arrays = {
        "samples": dataset.samples,
        "acquired_mask": dataset.acquired_mask.astype(np.uint8),
    }
    if dataset.prescan is not None:
        arrays["prescan"] = dataset.prescan.samples
    for name, arr in dataset.extras.items():
        if name in arrays:
            raise ContainerError(f"extra array name {name!r} collides with a core array")
        arrays[name] = arr
    extra = {}
    if dataset.trajectory is not None:
        extra["traj"] = dataset.trajectory.params()
    write_arrays(path, arrays, meta=dataset.meta, extra_manifest=extra,
                 shape=list(dataset.samples.shape))


def read_dataset(path) -> KSpaceDataset:
    """Load a dataset written by :func:`write_dataset`."""
    from .trajectory import BladeTrajectory

    arrays, manifest = read_arrays(path)
    for key in ("samples", "acquired_mask"):
        if key not in arrays:
            raise ContainerError(f"malformed manifest: no {key!r} array")
    samples = arrays.pop("samples")
    if list(samples.shape) != list(manifest["shape"]):
        raise ContainerError(f"payload shape {samples.shape} disagrees with manifest shape {manifest['shape']}")
    mask_u8 = arrays.pop("acquired_mask")
    if np.any(mask_u8 > 1):
        raise ContainerError("acquired_mask payload must be 0/1")
    prescan = arrays.pop("prescan", None)
    traj = BladeTrajectory.from_params(manifest["traj"]) if "traj" in manifest else None
    try:
        return KSpaceDataset(
            samples=samples,
            acquired_mask=mask_u8.astype(bool),
            trajectory=traj,
            prescan=NoisePrescan(prescan) if prescan is not None else None,
            meta=manifest["meta"],
            extras=arrays,
        )
    except InvariantError as exc:
        raise ContainerError(f"container violates dataset invariants: {exc}") from exc


def datasets_equal(a: KSpaceDataset, b: KSpaceDataset) -> bool:
    """Bitwise equality of all fields (used by roundtrip tests)."""
    def same(x, y):
        return x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()

    if not (same(a.samples, b.samples) and same(a.acquired_mask, b.acquired_mask)):
        return False
    if (a.prescan is None) != (b.prescan is None):
        return False
    if a.prescan is not None and not same(a.prescan.samples, b.prescan.samples):
        return False
    if a.meta != b.meta or set(a.extras) != set(b.extras):
        return False
    if any(not same(a.extras[k], b.extras[k]) for k in a.extras):
        return False
    ta, tb = a.trajectory, b.trajectory
    if (ta is None) != (tb is None):
        return False
    return ta is None or ta.params() == tb.params()
