"""Loss terms: fixed-variance Gaussian reconstruction, closed-form diagonal
Gaussian KL, the per-level capacity schedule, the capacity-shifted objective
total = recon + beta * sum_l |KL_l - C_l|, and a minibatch-mixture estimator
that splits the mean KL into index-code mutual information, total
correlation, and dimension-wise KL.

Reduction convention throughout: sum over time/feature/latent dimensions,
mean over the batch, so beta is comparable across batch sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import RngStream, Tensor


def recon_nll(x: Tensor, mean: Tensor) -> Tensor:
    """0.5 * sum of squared error over channels and time, averaged over the
    batch (unit-variance factored Gaussian likelihood, constants dropped)."""
    if x.shape != mean.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs mean {mean.shape}")
    n_batch = x.shape[0] if x.ndim >= 2 else 1
    return tt.scale(tt.sum_all(tt.square(tt.sub(x, mean))), 0.5 / n_batch)


def kl_diag_gaussian(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)), summed over dims, batch-averaged.

    0.5 * sum_j (mu_j^2 + sigma_j^2 - 2 log sigma_j - 1); log_sigma arrives
    pre-clamped from the encoder.
    """
    if mu.shape != log_sigma.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape} vs log_sigma {log_sigma.shape}")
    n_batch = mu.shape[0] if mu.ndim >= 2 else 1
    two_ls = tt.scale(log_sigma, 2.0)
    inner = tt.add_scalar(tt.sub(tt.add(tt.square(mu), tt.exp(two_ls)), two_ls), -1.0)
    return tt.scale(tt.sum_all(inner), 0.5 / n_batch)


@dataclass(frozen=True)
class CapacitySchedule:
    """Per-level KL targets rising linearly from 0 to ``c_final`` over
    ``warmup_steps`` training steps, then held."""

    c_final: tuple[float, ...]
    warmup_steps: int

    def __post_init__(self):
        if any(c < 0 for c in self.c_final):
            raise ValueError("capacity targets must be nonnegative")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    def at(self, step: int) -> np.ndarray:
        if step < 0:
            raise ValueError("step must be >= 0")
        if self.warmup_steps == 0:
            frac = 1.0
        else:
            frac = min(1.0, step / self.warmup_steps)
        return np.array(self.c_final) * frac


def capacity_at(schedule: CapacitySchedule, step: int) -> np.ndarray:
    return schedule.at(step)


@dataclass
class LossReport:
    recon_nll: float
    kl_per_ladder: list[float]
    capacity_per_ladder: list[float]
    beta: float
    total: float

    def is_finite(self) -> bool:
        vals = [self.recon_nll, self.total, *self.kl_per_ladder, *self.capacity_per_ladder]
        return all(math.isfinite(v) for v in vals)


def favae_loss(x: Tensor, recon_mean: Tensor, mus: list[Tensor],
               log_sigmas: list[Tensor], beta: float,
               schedule: CapacitySchedule, step: int) -> tuple[Tensor, LossReport]:
    """total = recon + beta * sum_l |KL_l - C_l(step)|.

    The absolute value's subgradient at KL_l == C_l is 0, so a level sitting
    exactly on target feels no pull.  Returns the scalar loss tensor (for
    backward) together with a float report.
    """
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    if len(mus) != len(log_sigmas):
        raise ValueError("one (mu, log_sigma) pair per ladder level required")
    capacities = schedule.at(step)
    if len(capacities) != len(mus):
        raise ValueError(f"schedule has {len(capacities)} levels, model has {len(mus)}")
    rec = recon_nll(x, recon_mean)
    kls = [kl_diag_gaussian(mu, ls) for mu, ls in zip(mus, log_sigmas)]
    total = rec
    for kl, c in zip(kls, capacities):
        penalty = tt.abs_(tt.add_scalar(kl, -float(c)))
        total = tt.add(total, tt.scale(penalty, beta))
    report = LossReport(
        recon_nll=float(rec.data),
        kl_per_ladder=[float(kl.data) for kl in kls],
        capacity_per_ladder=[float(c) for c in capacities],
        beta=beta,
        total=float(total.data),
    )
    return total, report


# ---------------------------------------------------------------------------
# KL decomposition diagnostic
# ---------------------------------------------------------------------------

@dataclass
class KLDecomposition:
    index_code_mi: float
    total_correlation: float
    dimwise_kl: float
    sample_count: int

    @property
    def total(self) -> float:
        return self.index_code_mi + self.total_correlation + self.dimwise_kl

    def to_dict(self) -> dict:
        return {
            "index_code_mi": self.index_code_mi,
            "total_correlation": self.total_correlation,
            "dimwise_kl": self.dimwise_kl,
            "sample_count": self.sample_count,
            "total": self.total,
        }


def _log_normal(z: np.ndarray, mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
    """log N(z; mu, sigma) evaluated elementwise with broadcasting."""
    var = np.exp(2.0 * log_sigma)
    return -0.5 * (np.log(2.0 * np.pi) + 2.0 * log_sigma + (z - mu) ** 2 / var)


def _logmeanexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.mean(np.exp(a - m), axis=axis))
    return out


def kl_decomposition_estimate(mu: np.ndarray, log_sigma: np.ndarray,
                              rng: RngStream) -> KLDecomposition:
    """Monte-Carlo split of the batch-mean KL into three parts.

    ``mu``/``log_sigma`` are the [M, D] posterior parameters of M samples;
    the aggregate posterior is the uniform mixture of the M per-sample
    posteriors, and each expectation uses one reparameterized draw per
    sample.  The three terms sum exactly to a one-draw estimate of the mean
    KL, so against the closed form they agree up to Monte-Carlo error.
    """
    mu = np.asarray(mu, dtype=np.float64)
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    if mu.ndim != 2 or mu.shape != log_sigma.shape:
        raise ValueError("expected matching [M, D] posterior parameter arrays")
    m, _ = mu.shape
    if m < 2:
        raise ValueError("decomposition needs at least 2 samples")
    z = mu + np.exp(log_sigma) * rng.standard_normal(mu.shape)

    # log q(z_i | x_m) per dimension: [i, m, j]
    log_q_dims = _log_normal(z[:, None, :], mu[None, :, :], log_sigma[None, :, :])
    log_q_own = log_q_dims[np.arange(m), np.arange(m)].sum(axis=1)      # log q(z_i|x_i)
    log_q_mix = _logmeanexp(log_q_dims.sum(axis=2), axis=1)             # log q^(z_i)
    log_q_marg = _logmeanexp(log_q_dims, axis=1).sum(axis=1)            # sum_j log q^(z_ij)
    log_prior = _log_normal(z, np.zeros(()), np.zeros(())).sum(axis=1)

    if not (np.all(np.isfinite(log_q_own)) and np.all(np.isfinite(log_q_mix))
            and np.all(np.isfinite(log_q_marg))):
        raise FloatingPointError("non-finite log density in KL decomposition")

    return KLDecomposition(
        index_code_mi=float(np.mean(log_q_own - log_q_mix)),
        total_correlation=float(np.mean(log_q_mix - log_q_marg)),
        dimwise_kl=float(np.mean(log_q_marg - log_prior)),
        sample_count=m,
    )


def kl_decomposition_for_model(model, x: np.ndarray, rng: RngStream) -> KLDecomposition:
    """Run the decomposition on a model's posterior over batch ``x`` [M, C, T]."""
    mu, log_sigma = model.posterior_params(x)
    return kl_decomposition_estimate(mu, log_sigma, rng)


def kl_closed_form(mu: np.ndarray, log_sigma: np.ndarray) -> float:
    """Batch-mean closed-form KL for [M, D] posterior parameters."""
    mu = np.asarray(mu, dtype=np.float64)
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    per_sample = 0.5 * (mu**2 + np.exp(2 * log_sigma) - 2 * log_sigma - 1).sum(axis=1)
    return float(per_sample.mean())
