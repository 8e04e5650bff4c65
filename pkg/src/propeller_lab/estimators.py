"""scikit-learn style wrappers around the reconstruction pipelines.

Datasets play the role of samples: ``X`` is a dataset, a ``.pks`` path or a
list of them, and ``predict`` returns a stack of complex images. Training
of the self-supervised model needs no targets, so ``y`` is ignored.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import harness, mppca, sslrecon
from ._validation import check_coil_images, check_datasets, check_reference, check_dataset
from .datamodel import KSpaceDataset, ReconConfig


def _config(est) -> ReconConfig:
    names = {f.name for f in fields(ReconConfig)}
    return ReconConfig.from_dict({k: v for k, v in est.get_params().items() if k in names})


class _ReconBase(BaseEstimator):
    def _recon(self, ds: KSpaceDataset) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        """Reconstruct every dataset; returns ``(n, N, N)`` complex images."""
        return np.stack([self._recon(ds) for ds in check_datasets(X)])

    def score(self, X, y) -> float:
        """Negative median NRMSE against reference images ``y`` (higher is better)."""
        images, refs = check_reference(list(self.predict(X)), y)
        return -float(np.median([harness.nrmse(i, r) for i, r in zip(images, refs)]))


class GrappaReconstructor(_ReconBase):
    """Per-blade GRAPPA followed by gridding and Walsh combination."""

    def __init__(self, grappa_source_lines=2, grappa_taps=5, grappa_lambda=1e-4,
                 walsh_block=7, phase_radius=None, oversampling=2.0, kernel_width=4, dcf_width=6):
        self.grappa_source_lines = grappa_source_lines
        self.grappa_taps = grappa_taps
        self.grappa_lambda = grappa_lambda
        self.walsh_block = walsh_block
        self.phase_radius = phase_radius
        self.oversampling = oversampling
        self.kernel_width = kernel_width
        self.dcf_width = dcf_width

    def fit(self, X=None, y=None):
        """Stateless: kernels are calibrated per dataset at prediction time."""
        self.config_ = _config(self)
        return self

    def _recon(self, ds):
        return harness.recon_grappa_pipeline(ds, getattr(self, "config_", _config(self)))


class MPPCAReconstructor(GrappaReconstructor):
    """Blade-wise MPPCA denoising, then the GRAPPA pipeline."""

    def __init__(self, patch=(7, 7), stride=1, grappa_source_lines=2, grappa_taps=5,
                 grappa_lambda=1e-4, walsh_block=7, phase_radius=None, oversampling=2.0,
                 kernel_width=4, dcf_width=6):
        super().__init__(grappa_source_lines, grappa_taps, grappa_lambda, walsh_block,
                         phase_radius, oversampling, kernel_width, dcf_width)
        self.patch = patch
        self.stride = stride

    def _recon(self, ds):
        return harness.recon_mppca_pipeline(ds, getattr(self, "config_", _config(self)))


class MPPCADenoiser(TransformerMixin, BaseEstimator):
    """Coil-dimension MPPCA as a transformer.

    ``transform`` accepts either a ``(coils, H, W)`` image stack or a
    k-space dataset (denoised blade by blade, whitened with its prescan).
    """

    def __init__(self, patch=(7, 7), stride=1):
        self.patch = patch
        self.stride = stride

    def _spec(self):
        return mppca.PatchSpec(int(self.patch[0]), int(self.patch[1]), int(self.stride))

    def fit(self, X=None, y=None):
        self.spec_ = self._spec()
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        if isinstance(X, (KSpaceDataset, str, Path)):
            ds = check_dataset(X)
            return mppca.figure2_pipeline(ds, harness._psi(ds), self.spec_)
        return mppca.denoise_coil_stack(check_coil_images(X, 2), self.spec_)


class SSLReconstructor(_ReconBase):
    """Unrolled network trained with k-space splitting (no ground truth needed)."""

    def __init__(self, cascades=6, channels=16, learning_rate=1e-3, epochs=200,
                 split_low=0.3, split_high=0.99, loss_alpha=0.5, shared_weights=True,
                 eta_init=0.5, patience=0, phase_correct=True, seed=0,
                 oversampling=2.0, kernel_width=4, dcf_width=6):
        self.cascades = cascades
        self.channels = channels
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.split_low = split_low
        self.split_high = split_high
        self.loss_alpha = loss_alpha
        self.shared_weights = shared_weights
        self.eta_init = eta_init
        self.patience = patience
        self.phase_correct = phase_correct
        self.seed = seed
        self.oversampling = oversampling
        self.kernel_width = kernel_width
        self.dcf_width = dcf_width

    def fit(self, X, y=None):
        cfg = _config(self)
        self.model_, self.records_ = sslrecon.train(check_datasets(X), cfg)
        self.config_ = cfg
        return self

    def _recon(self, ds):
        check_is_fitted(self, "model_")
        return harness.recon_ssl_pipeline(ds, self.model_, self.config_)

    @classmethod
    def from_checkpoint(cls, path, **params) -> "SSLReconstructor":
        """Wrap a saved model without training."""
        model = sslrecon.UnrolledModel.load(path)
        est = cls(cascades=model.cascades, channels=model.width,
                  shared_weights=model.shared, **params)
        est.model_, est.records_, est.config_ = model, [], _config(est)
        return est
