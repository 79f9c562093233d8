"""Scikit-learn style front end for the dual-branch segmenter.

`DualModalitySegmenter` follows the estimator contract (constructor stores
parameters verbatim, `fit` returns self, fitted state in trailing-underscore
attributes, `get_params`/`set_params` inherited), so the model composes with
sklearn tooling such as `clone`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .data_model import DataError, DatasetSplit, ModalitySample, SegMask
from .trainer import TrainConfig, evaluate, predict_masks, sliding_window_probs, train


def check_sample_list(X: Sequence[ModalitySample]) -> list[ModalitySample]:
    """Validate an input collection of aligned two-modality samples."""
    samples = list(X)
    if not samples:
        raise DataError("empty sample list")
    for s in samples:
        if not isinstance(s, ModalitySample):
            raise DataError(f"expected ModalitySample entries, got {type(s).__name__}")
    ids = [s.id for s in samples]
    if len(ids) != len(set(ids)):
        raise DataError("duplicate sample ids")
    return samples


class DualModalitySegmenter(BaseEstimator):
    """Semi-supervised two-branch volumetric segmenter.

    Labeled samples (those carrying a mask) drive the supervised objective;
    unlabeled samples contribute through cross-modal consistency when
    `mcml_enabled` is set.
    """

    def __init__(
        self,
        num_classes: int = 2,
        base_channels: int = 16,
        num_stages: int = 4,
        mmf_enabled: bool = True,
        mae_enabled: bool = True,
        mcml_enabled: bool = True,
        alpha: float = 1.0,
        alpha_rampup_iters: int = 0,
        max_iters: int = 500,
        batch_size: int = 4,
        labeled_per_batch: int = 2,
        lr_initial: float = 1e-2,
        lr_power: float = 0.9,
        patch_shape: tuple[int, int, int] = (16, 16, 16),
        dropout_rate: float = 0.5,
        seed: int = 0,
        threads: int = 0,
    ):
        self.num_classes = num_classes
        self.base_channels = base_channels
        self.num_stages = num_stages
        self.mmf_enabled = mmf_enabled
        self.mae_enabled = mae_enabled
        self.mcml_enabled = mcml_enabled
        self.alpha = alpha
        self.alpha_rampup_iters = alpha_rampup_iters
        self.max_iters = max_iters
        self.batch_size = batch_size
        self.labeled_per_batch = labeled_per_batch
        self.lr_initial = lr_initial
        self.lr_power = lr_power
        self.patch_shape = patch_shape
        self.dropout_rate = dropout_rate
        self.seed = seed
        self.threads = threads

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            max_iters=self.max_iters,
            batch_size=self.batch_size,
            labeled_per_batch=self.labeled_per_batch,
            lr_initial=self.lr_initial,
            lr_power=self.lr_power,
            alpha=self.alpha,
            alpha_rampup_iters=self.alpha_rampup_iters,
            patch_shape=tuple(self.patch_shape),
            eval_every=0,
            checkpoint_every=0,
            seed=self.seed,
            mmf_enabled=self.mmf_enabled,
            mae_enabled=self.mae_enabled,
            mcml_enabled=self.mcml_enabled,
            num_classes=self.num_classes,
            base_channels=self.base_channels,
            num_stages=self.num_stages,
            dropout_rate=self.dropout_rate,
            threads=self.threads,
        )

    def fit(self, X: Sequence[ModalitySample], y=None) -> "DualModalitySegmenter":
        """Train on a mixed labeled/unlabeled collection; mask presence decides."""
        samples = check_sample_list(X)
        labeled = [s for s in samples if s.labeled]
        unlabeled = [s for s in samples if not s.labeled]
        if not labeled:
            raise DataError("fit requires at least one labeled sample")
        split = DatasetSplit(labeled=tuple(labeled), unlabeled=tuple(unlabeled))
        cfg = self._train_config()
        if not unlabeled:
            cfg = type(cfg)(**{**cfg.__dict__, "labeled_per_batch": cfg.batch_size})
        result = train(cfg, split)
        self.model_ = result.model
        self.config_ = cfg
        self.log_ = result.log
        self.n_labeled_ = len(labeled)
        self.n_unlabeled_ = len(unlabeled)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def predict(self, X: Sequence[ModalitySample], branch: str = "fused") -> list[SegMask]:
        self._check_fitted()
        samples = check_sample_list(X)
        return predict_masks(self.model_, samples, self.config_.patch_shape, branch=branch)

    def predict_proba(self, X: Sequence[ModalitySample]) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-sample (prob_a, prob_b) probability maps of shape (C, D, H, W)."""
        self._check_fitted()
        samples = check_sample_list(X)
        return [sliding_window_probs(self.model_, s, self.config_.patch_shape) for s in samples]

    def score(self, X: Sequence[ModalitySample], y=None) -> float:
        """Mean fused Dice over labeled samples."""
        self._check_fitted()
        report = evaluate(self.model_, check_sample_list(X), self.config_)
        return report.dsc_mean
