"""Scikit-learn style front end around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .network import EncoderConfig
from .training import TrainConfig, dice_iou, predict_probs, train
from .validation import check_image_stack, check_samples

__all__ = ["MixedSupervisionSegmenter"]


class MixedSupervisionSegmenter(BaseEstimator):
    """Binary segmenter trained on mixed pixel/box/scribble supervision.

    fit consumes a list of Sample objects covering all three annotation
    kinds; predict/predict_proba run on Samples or raw (N, 3, H, W)
    arrays.  Follows scikit-learn conventions (get_params/set_params,
    trailing-underscore fitted attributes), so it composes with model
    selection utilities that treat X as an opaque sequence.
    """

    def __init__(
        self,
        learning_rate: float = 0.02,
        momentum: float = 0.9,
        batch_size: int = 4,
        iterations: int = 3000,
        use_sp: bool = True,
        use_bme: bool = True,
        use_lr: bool = True,
        lambda_mode: str = "fixed",
        lambda_value: float = 0.5,
        lambda_low: float = 0.3,
        lambda_high: float = 0.7,
        seed: int = 0,
        dtype: str = "float32",
        channels: tuple = (16, 32, 64, 128),
        decoder_channels: int = 16,
    ):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.iterations = iterations
        self.use_sp = use_sp
        self.use_bme = use_bme
        self.use_lr = use_lr
        self.lambda_mode = lambda_mode
        self.lambda_value = lambda_value
        self.lambda_low = lambda_low
        self.lambda_high = lambda_high
        self.seed = seed
        self.dtype = dtype
        self.channels = channels
        self.decoder_channels = decoder_channels

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            iterations=self.iterations,
            use_sp=self.use_sp,
            use_bme=self.use_bme,
            use_lr=self.use_lr,
            lambda_mode=self.lambda_mode,
            lambda_value=self.lambda_value,
            lambda_low=self.lambda_low,
            lambda_high=self.lambda_high,
            seed=self.seed,
            eval_interval=0,
            dtype=self.dtype,
        )

    def fit(self, X, y=None):
        """Train on a list of Sample objects (pixel, box, and scribble
        kinds must all be present in the train split); y is ignored."""
        samples = check_samples(X)
        h, w = samples[0].image.shape[-2:]
        cfg = self._train_config()
        encoder_cfg = EncoderConfig(
            channels=tuple(self.channels),
            height=h,
            width=w,
            decoder_channels=self.decoder_channels,
        )
        result = train(samples, cfg, encoder_cfg=encoder_cfg)
        self.params_ = result.params
        self.config_ = cfg
        self.encoder_config_ = encoder_cfg
        self.loss_history_ = result.rows
        self.image_size_ = (h, w)
        return self

    def _as_images(self, X) -> np.ndarray:
        if len(X) and hasattr(X[0], "image"):
            samples = check_samples(X)
            arr = np.stack([s.image for s in samples])
        else:
            arr = check_image_stack(X)
        if arr.shape[-2:] != self.image_size_:
            raise ValueError(
                f"images are {arr.shape[-2:]}, model was fit for {self.image_size_}"
            )
        return arr

    def predict_proba(self, X) -> np.ndarray:
        """Foreground probability maps, shape (N, H, W)."""
        check_is_fitted(self, "params_")
        return predict_probs(self.params_, self._as_images(X))

    def predict(self, X) -> np.ndarray:
        """Binary masks at the 0.5 threshold, shape (N, H, W) uint8."""
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    def score(self, X, y=None) -> float:
        """Mean Dice against y or, when y is omitted, the samples' truth."""
        check_is_fitted(self, "params_")
        preds = self.predict(X)
        if y is not None:
            truths = np.asarray(y)
        elif len(X) and hasattr(X[0], "truth"):
            truths = np.stack([s.truth for s in X])
        else:
            raise ValueError("score needs truth masks: pass Samples or provide y")
        if truths.shape != preds.shape:
            raise ValueError(f"truth shape {truths.shape} != predictions {preds.shape}")
        return float(np.mean([dice_iou(p, t)[0] for p, t in zip(preds, truths)]))
