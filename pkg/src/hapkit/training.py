"""SGD-with-momentum training and fine-tuning."""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .datasets import Dataset
from .errors import ConfigError, NonFiniteError, TrainingDivergedError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings.

    The learning rate is multiplied by ``gamma`` at each milestone, given as a
    fraction of ``epochs`` (default: at one half and three quarters).
    """

    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 60
    batch_size: int = 64
    weight_decay: float = 4e-4
    milestones: tuple = (0.5, 0.75)
    gamma: float = 0.1
    seed: int = 0
    val_fraction: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"invalid optimizer settings: {self}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if any(not 0 < m < 1 for m in self.milestones) or not 0 < self.gamma <= 1:
            raise ConfigError(f"milestones must lie strictly inside (0, 1): {self.milestones}")

    def lr_at(self, epoch):
        drops = sum(epoch >= int(m * self.epochs) for m in self.milestones)
        return self.lr * self.gamma ** drops

    def replace(self, **changes):
        return TrainConfig(**{**asdict(self), **changes})


def _split(dataset, config):
    if isinstance(dataset, Dataset):
        return dataset.split(config.val_fraction, config.seed)
    train_set, val_set = dataset
    return train_set, val_set


def train(model, dataset, config=TrainConfig()):
    """Train with SGD + momentum; return the best-validation checkpoint.

    ``dataset`` is a :class:`Dataset` (split by ``config.val_fraction``) or
    a ``(train, validation)`` pair.  The initial weights count as a candidate
    checkpoint.

    Returns:
        (model, validation_accuracy)
    """
    train_set, val_set = _split(dataset, config)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be nonempty")
    fn = model.loss_fn
    params = [p.copy() for p in model.params]
    velocity = [np.zeros_like(p) for p in params]
    targets = train_set.targets
    rng = np.random.default_rng(config.seed)
    best_acc = model.accuracy(val_set.X, val_set.y)
    best = [p.copy() for p in params]
    n = len(train_set)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                loss, tape = ad.forward(fn, params, (train_set.X[idx], targets[idx]))
                grads = ad.gradient(tape)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}, batch {b} (lr={lr:g}): {exc}"
                ) from exc
            total += loss * len(idx)
            for p, g, v in zip(params, grads, velocity):
                v *= config.momentum
                v += g + config.weight_decay * p
                p -= lr * v
        acc = model.with_params(params).accuracy(val_set.X, val_set.y)
        log.debug("epoch %d lr %.4g loss %.5f val_acc %.4f", epoch, lr, total / n, acc)
        if acc > best_acc:
            best_acc, best = acc, [p.copy() for p in params]
    return model.with_params(best), float(best_acc)


def finetune(model, dataset, config=TrainConfig(epochs=20, lr=0.02)):
    """Recover accuracy after pruning or implanting; same loop as :func:`train`."""
    return train(model, dataset, config)
