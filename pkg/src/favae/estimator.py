"""Scikit-learn estimator facade over the trainer.

``FAVAE`` is an unsupervised transformer: ``fit(X)`` trains the ladder
autoencoder on sequences X of shape [N, C, T], ``transform(X)`` returns the
concatenated posterior means (the representation the disentanglement
metrics consume), and ``inverse_transform(Z)`` decodes latents back into
sequences.  Parameters follow sklearn conventions (stored verbatim, so
``clone``/``get_params`` behave), which lets the model drop into pipelines
and model-selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .training import TrainConfig, train


def check_sequences(X, n_channels: int | None = None,
                    t_steps: int | None = None) -> np.ndarray:
    """Validate a batch of sequences: [N, C, T], finite, nonempty."""
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValueError(f"expected sequences of shape [N, C, T], got ndim={X.ndim}")
    if min(X.shape) < 1:
        raise ValueError(f"empty sequence batch: shape {X.shape}")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("sequences contain NaN or Inf")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {X.shape[1]}")
    if t_steps is not None and X.shape[2] != t_steps:
        raise ValueError(f"expected length {t_steps}, got {X.shape[2]}")
    return X


def check_latents(Z, total_dim: int) -> np.ndarray:
    Z = np.asarray(Z)
    if Z.ndim != 2 or Z.shape[1] != total_dim:
        raise ValueError(f"expected latents of shape [N, {total_dim}], got {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("latents contain NaN or Inf")
    return Z


class FAVAE(TransformerMixin, BaseEstimator):
    """Ladder time-convolution VAE with a capacity-annealed objective.

    Parameters mirror :class:`favae.training.TrainConfig`; ``random_state``
    seeds initialization, shuffling, and reparameterization noise, making
    fits bit-reproducible.
    """

    def __init__(self, latent_dims=(8, 4, 2), channels=64, block_depth=2,
                 kernel=3, stride=2, beta=16.0, capacity=(20.0, 1.0, 5.0),
                 use_ladder=True, use_capacity=True, warmup_steps=None,
                 learning_rate=1e-3, batch_size=128, epochs=3000,
                 random_state=0, dtype="float32"):
        self.latent_dims = latent_dims
        self.channels = channels
        self.block_depth = block_depth
        self.kernel = kernel
        self.stride = stride
        self.beta = beta
        self.capacity = capacity
        self.use_ladder = use_ladder
        self.use_capacity = use_capacity
        self.warmup_steps = warmup_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.dtype = dtype

    def _config(self) -> TrainConfig:
        return TrainConfig(
            beta=self.beta, c_final=tuple(self.capacity),
            use_ladder=self.use_ladder, use_capacity=self.use_capacity,
            warmup_steps=self.warmup_steps, learning_rate=self.learning_rate,
            batch_size=self.batch_size, epochs=self.epochs,
            seed=self.random_state, latent_dims=tuple(self.latent_dims),
            channels=self.channels, block_depth=self.block_depth,
            kernel=self.kernel, stride=self.stride, dtype=self.dtype,
        )

    def fit(self, X, y=None):
        X = check_sequences(X)
        result = train(self._config(), sequences=X)
        self.model_ = result.model
        self.loss_log_ = result.loss_log
        self.checkpoint_ = result.checkpoint
        self.train_recon_ = result.eval_recon
        self.n_channels_ = X.shape[1]
        self.t_steps_ = X.shape[2]
        return self

    def transform(self, X) -> np.ndarray:
        """Concatenated per-ladder posterior means, [N, sum(latent_dims)]."""
        check_is_fitted(self)
        X = check_sequences(X, self.n_channels_, self.t_steps_)
        mu, _ = self.model_.posterior_params(X)
        return mu

    def inverse_transform(self, Z) -> np.ndarray:
        """Decode latents back to sequences [N, C, T]."""
        check_is_fitted(self)
        cfg = self.model_.config
        Z = check_latents(Z, cfg.total_latent_dim)
        splits = np.cumsum(cfg.latent_dims)[:-1]
        return self.model_.decode_arrays(np.split(Z, splits, axis=1))

    def score(self, X, y=None) -> float:
        """Negative deterministic reconstruction loss (higher is better)."""
        check_is_fitted(self)
        X = check_sequences(X, self.n_channels_, self.t_steps_)
        recon = self.model_.reconstruct(X)
        x = np.asarray(X, dtype=recon.dtype)
        return -float(0.5 * ((x - recon) ** 2).sum() / x.shape[0])

    def ladder_of_dim(self) -> np.ndarray:
        check_is_fitted(self)
        return self.model_.ladder_of_dim()
