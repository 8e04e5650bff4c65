"""Input checks shared by the estimator wrappers and the CLI."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .datamodel import KSpaceDataset, read_dataset


def check_dataset(x) -> KSpaceDataset:
    """Accept a :class:`KSpaceDataset` or a path to a ``.pks`` container."""
    if isinstance(x, KSpaceDataset):
        x.validate()
        return x
    if isinstance(x, (str, Path)):
        return read_dataset(x)
    raise TypeError(f"expected a KSpaceDataset or a .pks path, got {type(x).__name__}")


def check_datasets(X) -> list[KSpaceDataset]:
    """A single dataset/path or a non-empty sequence of them, as a list."""
    if isinstance(X, (KSpaceDataset, str, Path)):
        X = [X]
    X = [check_dataset(x) for x in X]
    if not X:
        raise ValueError("no datasets given")
    return X


def check_coil_images(x, min_coils: int = 1) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"coil images must be (coils, H, W), got shape {x.shape}")
    if x.shape[0] < min_coils:
        raise ValueError(f"need at least {min_coils} coils, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("coil images contain non-finite values")
    return x


def check_reference(images, refs) -> tuple[list, list]:
    refs = [np.asarray(r) for r in refs]
    if len(refs) != len(images):
        raise ValueError(f"{len(images)} reconstructions but {len(refs)} references")
    for im, r in zip(images, refs):
        if im.shape != r.shape:
            raise ValueError(f"reference shape {r.shape} != reconstruction shape {im.shape}")
    return images, refs
