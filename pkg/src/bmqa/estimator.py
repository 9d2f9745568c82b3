"""scikit-learn style wrapper around the training pipeline."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import QualityDataset, QualitySample
from .errors import ContractError
from .pipeline import PipelineConfig, train_pipeline
from .train import preset


class BMQARegressor(RegressorMixin, BaseEstimator):
    """Quality regressor over ``(image, transcript)`` pairs.

    ``X`` is a sequence of pairs, images as (H, W, 3) arrays (uint8 or floats
    in [0, 1]); a transcript of ``None`` at predict time switches that item to
    the caption-generated path. ``y`` holds MOS values in [0, 1].
    Every sample is used for training; at least 10 are required.
    """

    def __init__(self, pt_kind="none", run_ss=True, ss_epochs=20, st_epochs=60, cap_epochs=20,
                 train_captioner=True, loss_mode="mean_nll", seed=0):
        self.pt_kind = pt_kind
        self.run_ss = run_ss
        self.ss_epochs = ss_epochs
        self.st_epochs = st_epochs
        self.cap_epochs = cap_epochs
        self.train_captioner = train_captioner
        self.loss_mode = loss_mode
        self.seed = seed

    def _config(self):
        cfg = PipelineConfig(pt_kind=self.pt_kind, run_ss=self.run_ss,
                             train_captioner=self.train_captioner, seed=self.seed)
        cfg.stages["ss"] = preset("ss", epochs=self.ss_epochs, loss_mode=self.loss_mode)
        cfg.stages["pt"] = preset("pt", loss_mode=self.loss_mode)
        cfg.stages["st"] = preset("st", epochs=self.st_epochs)
        cfg.stages["cap"] = preset("cap", epochs=self.cap_epochs)
        return cfg

    @staticmethod
    def _split_pairs(X):
        images, texts = [], []
        for item in X:
            if len(item) != 2:
                raise ContractError("each X item must be an (image, transcript) pair")
            images.append(np.asarray(item[0]))
            texts.append(item[1])
        images = np.stack(images)
        if images.dtype != np.uint8:
            images = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
        return images, texts

    def fit(self, X, y):
        images, texts = self._split_pairs(X)
        y = np.asarray(y, dtype=np.float64)
        if len(y) != len(images):
            raise ContractError("X and y differ in length")
        if any(t is None for t in texts):
            raise ContractError("training needs a transcript for every image")
        samples = [QualitySample(f"mem/{i}", t, float(v), f"s{i:06d}", "mem") for i, (t, v) in enumerate(zip(texts, y))]
        for s in samples:
            s.validate()
        ds = QualityDataset(samples, images)
        cfg = dataclasses.replace(self._config(), split_ratios=(1, 0, 0))
        result = train_pipeline(ds, cfg)
        self.system_ = result.system
        self.histories_ = result.histories
        return self

    def predict(self, X):
        check_is_fitted(self, "system_")
        images, texts = self._split_pairs(X)
        out = np.empty(len(images))
        have = np.array([t is not None for t in texts])
        if have.any():
            idx = np.flatnonzero(have)
            out[idx] = self.system_.predict(images[idx], [texts[i] for i in idx])
        if (~have).any():
            idx = np.flatnonzero(~have)
            out[idx] = self.system_.predict_image_only(images[idx])
        return out

