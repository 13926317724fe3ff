"""Two-stage training loop with Nesterov SGD and plateau learning-rate decay.

Stage 1 freezes the encoder group and trains the latent head, classifier,
and decoder; stage 2 unfreezes everything. Velocity buffers persist across
the stage boundary; parameters that first become trainable in stage 2 start
from zero velocity.

The SGD update is pinned to the common deep-learning Nesterov form:

    g <- grad + weight_decay * p
    v <- momentum * v + g
    p <- p - lr * (g + momentum * v)      (nesterov)
    p <- p - lr * v                       (plain momentum)

Weight decay applies to every parameter, biases included (exclude_bias_decay
turns that off). The plateau rule multiplies lr by plateau_factor after
`patience` consecutive epochs without strict improvement of the monitored
loss, then resets its counter. Checkpoint selection tracks the best
validation accuracy with a strict greater-than, so the earliest best epoch
wins ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .autodiff import Rng, Tensor, no_grad
from .errors import ConfigError, NonFiniteLossError, UsageError
from .mixup import MixupConfig, MixupDraw, mix_targets, sample_draw
from .model import VaeClassifier
from .objective import LossBreakdown, ObjectiveConfig, total_loss

CURVE_COLUMNS = ("epoch", "stage", "lr", "train_total", "train_recon",
                 "train_kl", "train_sup", "val_total", "val_accuracy")


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    batch_size: int = 64
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    stage1_epochs: int = 30
    stage2_epochs: int = 50
    plateau_monitor: str = "val_total"
    exclude_bias_decay: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if not 0.0 < self.plateau_factor <= 1.0:
            raise ConfigError(f"plateau_factor must be in (0, 1], got {self.plateau_factor}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("stage epoch counts must be >= 0")
        if self.plateau_monitor not in ("val_total", "train_total"):
            raise ConfigError(
                f"plateau_monitor must be 'val_total' or 'train_total', got {self.plateau_monitor!r}")


@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    velocities: Dict[str, np.ndarray] = field(default_factory=dict)
    best_val_accuracy: Optional[float] = None
    best_epoch: Optional[int] = None
    epochs_since_improvement: int = 0
    best_monitored: Optional[float] = None
    rng_state: Optional[dict] = None


def sgd_step(params: Iterable[Tuple[str, Tensor]], state: TrainState, config: OptimConfig):
    """Apply one pinned Nesterov SGD update to every listed parameter.

    Callers pass only the parameters that are currently trainable; frozen
    ones simply never appear here, which also leaves their velocities
    untouched.
    """
    for name, p in params:
        if p.grad is None:
            raise UsageError(f"sgd_step: parameter {name} has no gradient")
        wd = 0.0 if (config.exclude_bias_decay and name.endswith(".bias")) else config.weight_decay
        g = p.grad + wd * p.data if wd else p.grad
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise UsageError(
                f"sgd_step: velocity shape {v.shape} does not match parameter "
                f"{name} shape {p.data.shape}")
        v = config.momentum * v + g
        state.velocities[name] = v
        if config.nesterov:
            p.data = p.data - state.lr * (g + config.momentum * v)
        else:
            p.data = p.data - state.lr * v


def plateau_scheduler(state: TrainState, monitored_loss: float, config: OptimConfig) -> float:
    """Decay lr after `patience` consecutive epochs without strict improvement."""
    if state.best_monitored is None or monitored_loss < state.best_monitored:
        state.best_monitored = monitored_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= config.plateau_patience:
            state.lr = state.lr * config.plateau_factor
            state.epochs_since_improvement = 0
    return state.lr


class BestCheckpointTracker:
    """Keep the parameters of the epoch with the highest validation accuracy.

    Strict improvement only, so the first epoch reaching a given accuracy is
    the one retained.
    """

    def __init__(self):
        self.best_accuracy: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.best_params: Optional[Dict[str, np.ndarray]] = None

    def update(self, epoch: int, accuracy: float, model: VaeClassifier) -> bool:
        if self.best_accuracy is None or accuracy > self.best_accuracy:
            self.best_accuracy = accuracy
            self.best_epoch = epoch
            self.best_params = model.state_arrays()
            return True
        return False


def _check_finite(breakdown: LossBreakdown, where: str):
    for term in ("recon", "kl", "supervised", "total"):
        value = getattr(breakdown, term)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite {term} loss ({value}) at {where}")


def train_step(model: VaeClassifier, batch, state: TrainState, optim: OptimConfig,
               rng: Rng, mixup_config: Optional[MixupConfig] = None,
               objective: Optional[ObjectiveConfig] = None,
               draw: Optional[MixupDraw] = None, frozen: frozenset = frozenset(),
               where: str = "batch 0") -> LossBreakdown:
    """One optimization step on one batch; returns the loss breakdown.

    Randomness is consumed from `rng` in pinned order: the mixup draw (when
    one is sampled here), the reparameterization noise, then the dropout
    mask. Passing `draw` explicitly skips the sampling, keeping the stream
    aligned with a run that has mixup disabled.
    """
    x, patch, y = batch[0], batch[1], batch[2]
    batch_size = y.shape[0]
    if draw is None and mixup_config is not None and mixup_config.enabled:
        resolved = mixup_config.with_default_blocks(model.config.num_blocks)
        draw = sample_draw(resolved, batch_size, rng)
    if draw is not None:
        y_used, patch_used = mix_targets(y, patch if model.config.use_decoder else None, draw)
        out = model.forward(x, "train", rng=rng, mixup=draw)
    else:
        y_used, patch_used = y, (patch if model.config.use_decoder else None)
        out = model.forward(x, "train", rng=rng)
    loss, breakdown = total_loss(out, y_used, patch_used, objective)
    _check_finite(breakdown, where)
    model.zero_grad()
    loss.backward()
    trainable = [(n, p) for n, p in model.parameters() if n not in frozen]
    sgd_step(trainable, state, optim)
    return breakdown


@dataclass
class TrainResult:
    curves: List[dict]
    best_epoch: Optional[int]
    best_val_accuracy: Optional[float]
    best_params: Optional[Dict[str, np.ndarray]]
    state: TrainState


def evaluate_epoch(model: VaeClassifier, batches, objective: Optional[ObjectiveConfig] = None):
    """Deterministic eval pass: mean total loss and argmax accuracy."""
    total_sum = 0.0
    correct = 0
    count = 0
    with no_grad():
        for batch in batches:
            x, patch, y = batch[0], batch[1], batch[2]
            out = model.forward(x, "eval")
            _, breakdown = total_loss(out, y, patch if model.config.use_decoder else None,
                                      objective)
            b = y.shape[0]
            total_sum += breakdown.total * b
            preds = np.argmax(out.probs.data, axis=1)
            truths = np.argmax(np.asarray(y), axis=1)
            correct += int(np.sum(preds == truths))
            count += b
    if count == 0:
        raise UsageError("evaluation split is empty")
    return total_sum / count, correct / count


def train(model: VaeClassifier, data, optim: OptimConfig, rng: Rng,
          mixup_config: Optional[MixupConfig] = None,
          objective: Optional[ObjectiveConfig] = None) -> TrainResult:
    """Run the full two-stage schedule over a batch source.

    `data` provides train_batches(batch_size, rng) and val_batches(batch_size)
    yielding (x, patch_target, y_onehot, ...) tuples. Returns per-epoch curve
    rows and the best-validation-accuracy parameter snapshot.
    """
    state = TrainState(lr=optim.lr)
    tracker = BestCheckpointTracker()
    curves: List[dict] = []
    encoder_names = frozenset(n for n, _ in model.parameter_groups()["encoder"])
    total_epochs = optim.stage1_epochs + optim.stage2_epochs
    if total_epochs < 1:
        raise ConfigError("stage1_epochs + stage2_epochs must be at least 1")

    for epoch in range(1, total_epochs + 1):
        stage = 1 if epoch <= optim.stage1_epochs else 2
        frozen = encoder_names if stage == 1 else frozenset()
        state.epoch = epoch
        lr_used = state.lr
        epoch_rng = rng.derive("epoch", epoch)

        sums = {"total": 0.0, "recon": 0.0, "kl": 0.0, "supervised": 0.0}
        seen = 0
        for bi, batch in enumerate(data.train_batches(optim.batch_size,
                                                      epoch_rng.derive("data"))):
            step_rng = epoch_rng.derive("step", bi)
            breakdown = train_step(model, batch, state, optim, step_rng,
                                   mixup_config=mixup_config, objective=objective,
                                   frozen=frozen, where=f"epoch {epoch} batch {bi}")
            b = batch[2].shape[0]
            seen += b
            sums["total"] += breakdown.total * b
            sums["recon"] += breakdown.recon * b
            sums["kl"] += breakdown.kl * b
            sums["supervised"] += breakdown.supervised * b
        if seen == 0:
            raise UsageError("training split is empty")

        val_total, val_accuracy = evaluate_epoch(
            model, data.val_batches(optim.batch_size), objective)
        row = {
            "epoch": epoch,
            "stage": stage,
            "lr": lr_used,
            "train_total": sums["total"] / seen,
            "train_recon": sums["recon"] / seen,
            "train_kl": sums["kl"] / seen,
            "train_sup": sums["supervised"] / seen,
            "val_total": val_total,
            "val_accuracy": val_accuracy,
        }
        curves.append(row)
        if tracker.update(epoch, val_accuracy, model):
            state.best_val_accuracy = val_accuracy
            state.best_epoch = epoch
        monitored = val_total if optim.plateau_monitor == "val_total" else row["train_total"]
        plateau_scheduler(state, monitored, optim)

    state.rng_state = rng.state()
    return TrainResult(curves=curves, best_epoch=tracker.best_epoch,
                       best_val_accuracy=tracker.best_accuracy,
                       best_params=tracker.best_params, state=state)


def format_curves_csv(curves: List[dict]) -> str:
    """Render curve rows with shortest-round-trip float formatting (stable bytes)."""
    lines = [",".join(CURVE_COLUMNS)]
    for row in curves:
        lines.append(",".join(
            str(row[c]) if c in ("epoch", "stage") else repr(float(row[c]))
            for c in CURVE_COLUMNS))
    return "\n".join(lines) + "\n"


def write_curves_csv(path, curves: List[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_curves_csv(curves))
