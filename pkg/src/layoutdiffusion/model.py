"""Estimator-style facade over the diffusion trainer and sampler.

Follows scikit-learn conventions: constructor arguments are stored verbatim
and describe hyperparameters only, fitted state lives in trailing-underscore
attributes, and ``get_params`` / ``set_params`` make the class clonable and
grid-searchable without a scikit-learn dependency.
"""
from __future__ import annotations

import inspect
from typing import Sequence

import numpy as np

from .data import batch_to_layouts, pad_batch
from .denoiser import DenoiserConfig, denoise
from .diffusion import DiffusionConfig, TrainConfig, q_sample, sample, train
from .exceptions import DataError, NotFittedError
from .rng import RngStream
from .validation import check_dataset, check_label_conditions, check_seed


class LayoutDiffusion:
    """Conditional diffusion model over layout geometry.

    ``fit`` learns the denoiser from a dataset of layouts; ``sample`` draws
    new geometry for user-specified element attributes.  Defaults follow
    the reference configuration (8 layers, 8 heads, 1000 steps, linear
    1e-4..0.02 noise schedule); shrink the network for desk-scale runs.
    """

    def __init__(self, d_model=256, num_layers=8, num_heads=8, ffn_dim=None,
                 activation="gelu", positional_encoding=False, timesteps=1000,
                 beta_start=1e-4, beta_end=0.02, learning_rate=1e-5,
                 batch_size=64, max_steps=1000, precision="float64",
                 n_max=36, init_seed=0, train_seed=1):
        self.d_model = d_model
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.activation = activation
        self.positional_encoding = positional_encoding
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.precision = precision
        self.n_max = n_max
        self.init_seed = init_seed
        self.train_seed = train_seed

    # -- sklearn protocol -------------------------------------------------

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"invalid parameter {name!r} for LayoutDiffusion")
            setattr(self, name, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"LayoutDiffusion({args})"

    # -- fitting -----------------------------------------------------------

    def _make_train_config(self, dataset) -> TrainConfig:
        denoiser = DenoiserConfig(
            d_model=self.d_model, num_layers=self.num_layers,
            num_heads=self.num_heads, ffn_dim=self.ffn_dim,
            num_classes=dataset.num_classes, attr_dim=dataset.feature_dim,
            activation=self.activation,
            positional_encoding=self.positional_encoding, n_max=self.n_max)
        diffusion = DiffusionConfig(timesteps=self.timesteps,
                                    beta_start=self.beta_start, beta_end=self.beta_end)
        return TrainConfig(
            denoiser=denoiser, diffusion=diffusion,
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_steps=self.max_steps, init_seed=check_seed(self.init_seed, "init_seed"),
            train_seed=check_seed(self.train_seed, "train_seed"),
            precision=self.precision)

    def fit(self, layouts, y=None):
        """Train the denoiser on a Dataset or a sequence of Layout objects."""
        dataset = check_dataset(layouts)
        config = self._make_train_config(dataset)
        result = train(dataset, config)
        self.config_ = config
        self.schedule_ = config.diffusion.schedule()
        self.params_ = result.params
        self.adam_state_ = result.adam_state
        self.loss_history_ = [loss for _, loss in result.losses]
        self.n_steps_ = result.step
        self.label_names_ = dataset.label_names
        self.feature_dim_ = dataset.feature_dim
        self.canvas_ = dataset.canvas
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this LayoutDiffusion instance is not fitted; call fit first")

    # -- sampling ----------------------------------------------------------

    def sample(self, conditions: Sequence, seed: int, return_raw: bool = False):
        """Generate one layout per condition (a list of label ids, or a
        [n, attr_dim] feature array in continuous mode)."""
        self._check_fitted()
        seed = check_seed(seed)
        if self.label_names_ is not None:
            conditions = check_label_conditions(conditions, len(self.label_names_))
            sizes = [len(c) for c in conditions]
        else:
            conditions = [np.asarray(c, dtype=np.float64) for c in conditions]
            for i, feats in enumerate(conditions):
                if feats.ndim != 2 or feats.shape[1] != self.feature_dim_:
                    raise DataError(f"condition {i}: expected [n, {self.feature_dim_}] features")
                if feats.shape[0] == 0:
                    raise DataError(f"condition {i} has no elements")
            sizes = [c.shape[0] for c in conditions]

        batch_size = len(conditions)
        n_max = max(sizes)
        mask = np.zeros((batch_size, n_max), dtype=bool)
        if self.label_names_ is not None:
            attributes = np.zeros((batch_size, n_max), dtype=np.int64)
            for row, labels in enumerate(conditions):
                attributes[row, : len(labels)] = labels
                mask[row, : len(labels)] = True
        else:
            attributes = np.zeros((batch_size, n_max, self.feature_dim_))
            for row, feats in enumerate(conditions):
                attributes[row, : feats.shape[0]] = feats
                mask[row, : feats.shape[0]] = True

        result = sample(attributes, mask, self.params_, self.config_.denoiser,
                        self.schedule_, RngStream(seed), self.config_.diffusion)
        geometry = result.geometry_raw if return_raw else (
            result.geometry_clamped if result.geometry_clamped is not None
            else result.geometry_raw)
        return batch_to_layouts(geometry, attributes, mask,
                                ids=[f"sample-{i:06d}" for i in range(batch_size)])

    def score(self, layouts, y=None) -> float:
        """Negative mean training objective over the given layouts (higher is better)."""
        self._check_fitted()
        dataset = check_dataset(layouts)
        batch = pad_batch(dataset.layouts)
        stream = RngStream(0)
        dtype = self.params_[self.params_.names()[0]].data.dtype
        mask_f = batch.mask.astype(dtype)[..., None]
        t = stream.integers(1, self.schedule_.timesteps + 1, [batch.size])
        noise = stream.gaussian(batch.geometry.shape).astype(dtype) * mask_f
        g_t = q_sample(batch.geometry.astype(dtype), t, noise, self.schedule_, mask=batch.mask)
        pred = denoise(g_t, t, batch.attributes, batch.mask, self.params_,
                       self.config_.denoiser).data
        err = ((pred - noise) ** 2 * mask_f).sum() / (batch.mask.sum() * 4.0)
        return -float(err)
