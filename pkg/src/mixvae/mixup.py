"""Convex mixing of paired batch elements at a random encoder depth.

One draw per mini-batch: a coefficient lambda ~ Beta(alpha, alpha), a single
permutation pairing element i with element perm(i), and a block index chosen
uniformly from the eligible set (block 0 means the raw input space). The same
(lambda, permutation) mixes the hidden state, the class targets, and the
reconstruction targets, so a forced lambda of 1 makes the whole step identical
to an unmixed step: 1.0 * x + 0.0 * y is exact in IEEE arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .autodiff import Rng, Tensor, add, mul, take_rows
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class MixupConfig:
    enabled: bool = True
    alpha: float = 1.0
    # None means "every boundary of the model this config is used with",
    # resolved by with_default_blocks() before sampling.
    eligible_blocks: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"mixup alpha must be > 0, got {self.alpha}")
        if self.eligible_blocks is not None:
            blocks = tuple(int(b) for b in self.eligible_blocks)
            if len(blocks) == 0:
                raise ConfigError("mixup eligible_blocks must be non-empty")
            if any(b < 0 for b in blocks):
                raise ConfigError(f"mixup eligible_blocks must be >= 0, got {blocks}")
            object.__setattr__(self, "eligible_blocks", blocks)

    def with_default_blocks(self, num_blocks: int) -> "MixupConfig":
        """Resolve eligible_blocks to {0..num_blocks} if unset, and range-check."""
        if self.eligible_blocks is None:
            return replace(self, eligible_blocks=tuple(range(num_blocks + 1)))
        if max(self.eligible_blocks) > num_blocks:
            raise ConfigError(
                f"eligible_blocks {self.eligible_blocks} out of range for a "
                f"{num_blocks}-block encoder")
        return self


@dataclass(frozen=True)
class MixupDraw:
    """Frozen per-batch randomness: coefficient, pairing, and mixing depth."""
    lam: float
    permutation: np.ndarray
    block_index: int


def noop_draw(batch_size: int) -> MixupDraw:
    """A draw that provably changes nothing: lambda 1, identity pairing."""
    return MixupDraw(lam=1.0, permutation=np.arange(batch_size), block_index=0)


def sample_draw(config: MixupConfig, batch_size: int, rng: Rng) -> MixupDraw:
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if config.eligible_blocks is None:
        raise ConfigError("eligible_blocks unresolved; call with_default_blocks first")
    if batch_size < 2:
        # Nothing to pair with; record a provable no-op instead of failing.
        return noop_draw(batch_size)
    lam = float(rng.beta(config.alpha, config.alpha))
    perm = rng.permutation(batch_size)
    block_index = int(config.eligible_blocks[int(rng.integers(0, len(config.eligible_blocks)))])
    return MixupDraw(lam=lam, permutation=perm, block_index=block_index)


def mix_tensors(a: Tensor, b: Tensor, lam: float) -> Tensor:
    """lam * a + (1 - lam) * b, differentiable through both operands."""
    if a.shape != b.shape:
        raise ShapeError(f"mixup operands differ in shape: {a.shape} vs {b.shape}")
    return add(mul(a, Tensor(np.float64(lam))),
               mul(b, Tensor(np.float64(1.0 - lam))))


def apply_draw(a: Tensor, draw: MixupDraw) -> Tensor:
    """Mix each batch row with its permuted partner: lam*a + (1-lam)*a[perm]."""
    if a.ndim < 1 or a.shape[0] != draw.permutation.shape[0]:
        raise ShapeError(
            f"batch shape {a.shape} does not match permutation length "
            f"{draw.permutation.shape[0]}")
    return mix_tensors(a, take_rows(a, draw.permutation), draw.lam)


def mix_targets(y_onehot: np.ndarray, recon_targets: Optional[np.ndarray],
                draw: MixupDraw) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Mix class targets and reconstruction targets with the batch's draw.

    Accepts one-hot or soft label rows; recon_targets may be None when no
    decoder is in play. Both use the same (lam, permutation) as the hidden
    state mix, which keeps supervision consistent with the mixed forward.
    """
    y = np.asarray(y_onehot, dtype=np.float64)
    if y.ndim < 1 or y.shape[0] != draw.permutation.shape[0]:
        raise ShapeError(
            f"target batch {y.shape} does not match permutation length "
            f"{draw.permutation.shape[0]}")
    if np.any(y < 0):
        raise ConfigError("class targets must be non-negative")
    y_mixed = draw.lam * y + (1.0 - draw.lam) * y[draw.permutation]
    if recon_targets is None:
        return y_mixed, None
    r = np.asarray(recon_targets, dtype=np.float64)
    if r.shape[0] != y.shape[0]:
        raise ShapeError(
            f"reconstruction target batch {r.shape[0]} does not match "
            f"label batch {y.shape[0]}")
    r_mixed = draw.lam * r + (1.0 - draw.lam) * r[draw.permutation]
    return y_mixed, r_mixed
