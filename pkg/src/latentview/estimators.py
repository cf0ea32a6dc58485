"""scikit-learn style wrappers over the functional API."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .diffusion import DEFAULT_STEPS, DEFAULT_T_STAR, NoiseSchedule, ddim_invert, ddim_sample
from .evaluation import synthesize
from .exceptions import NotFittedError
from .fusion import FusionConfig
from .training import TRAIN_PRESETS, PairDataset, train_loop
from .tunet import PRESETS, CameraTensors, TUNet


class DDIMInverter(BaseEstimator, TransformerMixin):
    """``transform`` maps clean latents to the mean component of their inversion;
    ``inverse_transform`` samples back to timestep 0."""

    def __init__(self, prior=None, schedule=None, t_star=DEFAULT_T_STAR, steps=DEFAULT_STEPS):
        self.prior = prior
        self.schedule = schedule
        self.t_star = t_star
        self.steps = steps

    def fit(self, X=None, y=None):
        if self.prior is None:
            raise ValueError("DDIMInverter needs a prior")
        self.schedule_ = self.schedule or NoiseSchedule(num_train_steps=self.prior.num_train_steps)
        return self

    def _check(self):
        if not hasattr(self, "schedule_"):
            raise NotFittedError("call fit() first")

    def invert(self, X):
        self._check()
        return ddim_invert(torch.as_tensor(np.asarray(X)), self.prior, self.schedule_, self.t_star, self.steps)

    def transform(self, X):
        return self.invert(X).mu.numpy()

    def inverse_transform(self, Z):
        self._check()
        return ddim_sample(torch.as_tensor(np.asarray(Z)), self.prior, self.schedule_, self.t_star, self.steps).numpy()


class TUNetRegressor(BaseEstimator):
    """Fits a TUNet on a :class:`PairDataset` and predicts target mean latents."""

    def __init__(self, preset="desk", num_classes=None, epochs=None, batch_size=None, learning_rate=None,
                 pairs_per_scene=None, t_star=DEFAULT_T_STAR, seed=0, out_dir=None):
        self.preset = preset
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.pairs_per_scene = pairs_per_scene
        self.t_star = t_star
        self.seed = seed
        self.out_dir = out_dir

    def _train_config(self):
        over = {k: v for k, v in dict(epochs=self.epochs, batch_size=self.batch_size,
                                      learning_rate=self.learning_rate,
                                      pairs_per_scene=self.pairs_per_scene).items() if v is not None}
        return TRAIN_PRESETS[self.preset](t_star=self.t_star, seed=self.seed, **over)

    def fit(self, X: PairDataset, y=None, val: PairDataset | None = None):
        if not isinstance(X, PairDataset):
            raise TypeError("fit expects a PairDataset")
        cfg_fn = PRESETS[self.preset]
        model_cfg = cfg_fn(self.num_classes) if self.num_classes else cfg_fn()
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.model_ = TUNet(model_cfg)
        self.result_ = train_loop(self._train_config(), X, self.model_, self.out_dir, val)
        self.loss_history_ = self.result_.epoch_losses
        return self

    def predict(self, z_ref, cam_ref: CameraTensors, cam_tar: CameraTensors, class_ref, class_tar=None):
        if not hasattr(self, "model_"):
            raise NotFittedError("TUNetRegressor is not fitted")
        z = torch.as_tensor(np.asarray(z_ref), dtype=torch.float32)
        with torch.no_grad():
            out = self.model_(z, cam_ref, cam_tar, class_ref,
                              class_ref if class_tar is None else class_tar, self.t_star)
        return out.numpy()


class NovelViewSynthesizer(BaseEstimator):
    """Bundles a trained TUNet, prior and codec; ``predict`` returns the synthesized image."""

    def __init__(self, model=None, prior=None, codec=None, schedule=None, strategy="both",
                 coefficient_sign="minus", t_star=DEFAULT_T_STAR, steps=DEFAULT_STEPS):
        self.model = model
        self.prior = prior
        self.codec = codec
        self.schedule = schedule
        self.strategy = strategy
        self.coefficient_sign = coefficient_sign
        self.t_star = t_star
        self.steps = steps

    def fit(self, X=None, y=None):
        if self.model is None or self.prior is None or self.codec is None:
            raise ValueError("model, prior and codec are required")
        self.fusion_ = FusionConfig(self.strategy, self.coefficient_sign, self.t_star)
        self.schedule_ = self.schedule or NoiseSchedule(num_train_steps=self.prior.num_train_steps)
        return self

    def predict(self, ref_image, cam_ref, cam_tar, class_id=0, ground_truth=None):
        if not hasattr(self, "fusion_"):
            self.fit()
        return synthesize(ref_image, cam_ref, cam_tar, class_id, self.model, self.prior, self.codec,
                          self.schedule_, self.fusion_, self.steps, ground_truth=ground_truth)
