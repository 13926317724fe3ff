"""Loss terms: reconstruction MSE, diagonal-Gaussian KL, cross-entropy.

Total loss is the plain sum of the three terms (unit weights by default;
weights are exposed as experimentation knobs). Reconstruction error is the
mean over all elements, which keeps its magnitude independent of image
resolution. When the model has no decoder, the whole unsupervised branch
(reconstruction and KL) is dropped and the total is the supervised term
alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autodiff import Tensor, add, clamp_min, mul, neg, sub, texp, tlog, tsum
from .errors import ConfigError, ShapeError

LOG_EPS = 1e-12


@dataclass
class ObjectiveConfig:
    recon_weight: float = 1.0
    kl_weight: float = 1.0
    supervised_weight: float = 1.0
    supervised_mode: str = "categorical"

    def __post_init__(self):
        if self.supervised_mode not in ("categorical", "bce"):
            raise ConfigError(
                f"supervised_mode must be 'categorical' or 'bce', got {self.supervised_mode!r}")
        for name in ("recon_weight", "kl_weight", "supervised_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    supervised: float
    total: float


def recon_mse(reconstruction: Tensor, target) -> Tensor:
    """Mean over every element of the squared difference."""
    target_t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if reconstruction.shape != target_t.shape:
        raise ShapeError(
            f"reconstruction {reconstruction.shape} does not match target {target_t.shape}")
    diff = sub(reconstruction, target_t)
    return mul(diff, diff).mean()


def kl_diag_gaussian(dist) -> Tensor:
    """Batch mean of 0.5 * sum_d(mu^2 + exp(logvar) - 1 - logvar).

    This is the closed-form KL divergence from a diagonal Gaussian to the
    standard normal prior; non-negative for every input.
    """
    mu, logvar = dist.mu, dist.logvar
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} must match")
    per_dim = sub(sub(add(mul(mu, mu), texp(logvar)), Tensor(1.0)), logvar)
    per_sample = mul(tsum(per_dim, axis=1), Tensor(0.5))
    return per_sample.mean()


def supervised_loss(probs: Tensor, y_mixed, mode: str = "categorical") -> Tensor:
    """Cross-entropy of predicted probabilities against (possibly soft) targets.

    categorical: -(1/B) * sum_n sum_c y * log p, the default.
    bce: treats each of the 4 class probabilities as an independent Bernoulli,
    -(1/B) * sum_n sum_c [y*log p + (1-y)*log(1-p)].
    Logs are clamped at 1e-12.
    """
    if mode not in ("categorical", "bce"):
        raise ConfigError(f"supervised mode must be 'categorical' or 'bce', got {mode!r}")
    y = np.asarray(y_mixed.data if isinstance(y_mixed, Tensor) else y_mixed, dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError(f"targets {y.shape} do not match probabilities {probs.shape}")
    if np.any(y < 0):
        raise ConfigError("supervised targets must be non-negative")
    batch = probs.shape[0]
    y_t = Tensor(y)
    log_p = tlog(clamp_min(probs, LOG_EPS))
    terms = mul(y_t, log_p)
    if mode == "bce":
        log_not_p = tlog(clamp_min(sub(Tensor(1.0), probs), LOG_EPS))
        terms = add(terms, mul(Tensor(1.0 - y), log_not_p))
    return mul(neg(tsum(terms)), Tensor(1.0 / batch))


def total_loss(forward_out, y_mixed, recon_target_mixed=None,
               config: Optional[ObjectiveConfig] = None) -> Tuple[Tensor, LossBreakdown]:
    """Combine the three terms; returns the scalar graph node and a float report.

    The breakdown holds each term's weighted contribution, so
    recon + kl + supervised == total always, whatever the weights. With a
    decoder-less forward output the unsupervised terms are identically zero.
    """
    config = config or ObjectiveConfig()

    def weighted(term: Tensor, w: float) -> Tensor:
        return term if w == 1.0 else mul(term, Tensor(np.float64(w)))

    parts = []
    recon_val = 0.0
    kl_val = 0.0
    if forward_out.reconstruction is not None:
        if recon_target_mixed is None:
            raise ConfigError("reconstruction produced but no reconstruction target given")
        recon_t = weighted(recon_mse(forward_out.reconstruction, recon_target_mixed),
                           config.recon_weight)
        kl_t = weighted(kl_diag_gaussian(forward_out.latent), config.kl_weight)
        recon_val = recon_t.item()
        kl_val = kl_t.item()
        parts.extend([recon_t, kl_t])
    sup_t = weighted(supervised_loss(forward_out.probs, y_mixed, mode=config.supervised_mode),
                     config.supervised_weight)
    sup_val = sup_t.item()
    parts.append(sup_t)
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return total, LossBreakdown(recon=recon_val, kl=kl_val, supervised=sup_val,
                                total=total.item())
