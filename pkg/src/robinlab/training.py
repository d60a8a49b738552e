"""SGD training with adversarial-example augmentation and the TRADES / MART
surrogate losses.

Adversarial training replaces a cosine-warm-up fraction of each batch with
PGD examples crafted against the current weights. TRADES regularizes
predictions to stay constant inside the threat ball via a KL term; MART
uses a margin cross-entropy on the adversarial input plus a KL term
weighted by (1 - clean true-class confidence).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import models
from .attacks import AttackConfig, AttackError, as_logits_fn, pgd_attack
from .autodiff import Tensor
from .data import Dataset, balanced_batches
from .models import ModelSpec, Parameters

__all__ = [
    "TrainConfig",
    "TrainingError",
    "warmup_fraction",
    "standard_train",
    "adversarial_train",
    "train_model",
    "trades_loss",
    "mart_loss",
    "trades_objective",
    "mart_objective",
    "accuracy",
]

DEFENSES = ("standard", "adv", "trades", "mart")


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Epochs, schedule and defense of one SGD run.

    ``lr_decay_epochs=None`` decays once at T/2 (factor 0.1). The warm-up
    applies to adversarial training only unless ``warmup_surrogates`` is set.
    """

    epochs: int
    batch_size: int = 128
    lr: float = 0.1
    lr_decay_epochs: tuple[int, ...] | None = None
    lr_decay_factor: float = 0.1
    weight_decay: float = 5e-4
    defense: str = "standard"
    lam: float = 1.0
    attack: AttackConfig | None = None
    seed: int = 0
    balanced: bool = False
    warmup_surrogates: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.defense not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}")
        if self.lam < 0 or self.weight_decay < 0:
            raise ValueError("lam and weight_decay must be >= 0")
        if self.defense != "standard" and self.attack is None:
            raise ValueError(f"defense {self.defense!r} needs an attack config")

    def decay_epochs(self) -> tuple[int, ...]:
        if self.lr_decay_epochs is not None:
            return self.lr_decay_epochs
        return (max(1, self.epochs // 2),)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e in self.decay_epochs():
            if epoch >= e:
                lr *= self.lr_decay_factor
        return lr


def warmup_fraction(t: int, total: int) -> float:
    """Adversarial share of each batch at epoch t: 1 - (1 + cos(pi t/T)) / 2."""
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    return 1.0 - 0.5 * (1.0 + math.cos(math.pi * t / total))


def accuracy(spec: ModelSpec, params: Parameters, dataset: Dataset) -> float:
    return float((models.predict(spec, params, dataset.inputs) == dataset.labels).mean())


def _sgd_step(params: Parameters, lr: float, weight_decay: float) -> None:
    for t in params.tensors.values():
        t.data -= lr * (t.grad + weight_decay * t.data)
        t.grad = None


def _epoch_batches(dataset: Dataset, config: TrainConfig, epoch: int
                   ) -> Iterator[np.ndarray]:
    if config.balanced:
        yield from balanced_batches(
            dataset, config.batch_size,
            seed=_derive(config.seed, "balanced", epoch))
        return
    rng = np.random.default_rng(_derive(config.seed, "shuffle", epoch))
    order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), config.batch_size):
        yield order[start:start + config.batch_size]


def _derive(seed: int, label: str, *parts: int) -> int:
    """Stable sub-stream id, independent of Python hash randomization."""
    import hashlib

    msg = f"{seed}:{label}:" + ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(msg.encode()).digest()[:8], "little")


def _craft_adversarial(spec: ModelSpec, params: Parameters, xb: np.ndarray,
                       yb: np.ndarray, attack: AttackConfig, seed: int,
                       loss_fn=None) -> np.ndarray:
    cfg = replace(attack, seed=seed)
    return pgd_attack(as_logits_fn(spec, params), xb, yb, cfg,
                      loss_fn=loss_fn).adversarial


# ---------------------------------------------------------------------------
# surrogate objectives (value given a fixed adversarial input, used directly
# by the gradient tests) and full losses (which also craft the input)
# ---------------------------------------------------------------------------

def _pair_if_needed(logits: Tensor) -> Tensor:
    return ad.pair_logits(logits) if logits.shape[1] == 1 else logits


def trades_objective(spec: ModelSpec, params: Parameters, x: np.ndarray,
                     x_adv: np.ndarray, y: np.ndarray, lam: float) -> Tensor:
    """Cross-entropy on clean inputs plus lam * KL(clean || adversarial)."""
    logits_clean = models.forward(spec, params, ad.constant(x))
    ce = models.classification_loss(logits_clean, y)
    if lam == 0.0:
        return ce
    logits_adv = models.forward(spec, params, ad.constant(x_adv))
    kl = ad.kl_divergence(_pair_if_needed(logits_clean), _pair_if_needed(logits_adv))
    return ad.add(ce, ad.scale(kl, lam))


def mart_objective(spec: ModelSpec, params: Parameters, x: np.ndarray,
                   x_adv: np.ndarray, y: np.ndarray, lam: float) -> Tensor:
    """Margin cross-entropy on the adversarial input plus the KL term
    weighted per example by (1 - clean true-class probability)."""
    logits_adv = _pair_if_needed(models.forward(spec, params, ad.constant(x_adv)))
    bce = ad.mart_bce(logits_adv, y)
    if lam == 0.0:
        return bce
    logits_clean = _pair_if_needed(models.forward(spec, params, ad.constant(x)))
    kl = ad.kl_rows(logits_clean, logits_adv)
    weight = ad.sub(ad.constant(np.ones(len(y))), ad.true_class_prob(logits_clean, y))
    penalty = ad.scale(ad.sum_all(ad.mul(kl, weight)), lam / len(y))
    return ad.add(bce, penalty)


def _trades_inner_loss(clean_logits: np.ndarray):
    """Inner maximization target: KL between the (frozen) clean prediction
    and the prediction at the perturbed point."""
    const = ad.constant(clean_logits)

    def loss(logits: Tensor, _y) -> Tensor:
        return ad.kl_divergence(_pair_if_needed(const), _pair_if_needed(logits))

    return loss


def trades_loss(spec: ModelSpec, params: Parameters, x: np.ndarray,
                y: np.ndarray, lam: float, attack: AttackConfig,
                attack_seed: int | None = None) -> Tensor:
    """Full TRADES loss: crafts x' by PGD on the KL term, then evaluates
    the surrogate objective. lam=0 reduces exactly to the cross-entropy."""
    if lam == 0.0:
        return trades_objective(spec, params, x, x, y, 0.0)
    clean = models.logits_of(spec, params, x)
    x_adv = _craft_adversarial(
        spec, params, x, y, attack,
        attack.seed if attack_seed is None else attack_seed,
        loss_fn=_trades_inner_loss(clean))
    return trades_objective(spec, params, x, x_adv, y, lam)


def mart_loss(spec: ModelSpec, params: Parameters, x: np.ndarray,
              y: np.ndarray, lam: float, attack: AttackConfig,
              attack_seed: int | None = None) -> Tensor:
    """Full MART loss: x' from cross-entropy PGD, then the margin objective."""
    x_adv = _craft_adversarial(
        spec, params, x, y, attack,
        attack.seed if attack_seed is None else attack_seed)
    return mart_objective(spec, params, x, x_adv, y, lam)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def train_model(spec: ModelSpec, dataset: Dataset, config: TrainConfig,
                log: list | None = None) -> Parameters:
    """Run one SGD training under the configured defense. Deterministic in
    ``config.seed``; appends one record per epoch to ``log`` when given."""
    params = models.init_model(spec, config.seed)
    total = config.epochs
    for epoch in range(total):
        lr = config.lr_at(epoch)
        epoch1 = epoch + 1  # the warm-up formula counts epochs from 1
        if config.defense == "adv":
            adv_fraction = warmup_fraction(epoch1, total)
        elif config.defense in ("trades", "mart"):
            adv_fraction = warmup_fraction(epoch1, total) if config.warmup_surrogates else 1.0
        else:
            adv_fraction = 0.0

        for batch_id, idx in enumerate(_epoch_batches(dataset, config, epoch)):
            xb = dataset.inputs[idx]
            yb = dataset.labels[idx]
            atk_seed = _derive(config.seed, "attack", epoch, batch_id)
            try:
                loss = _batch_loss(spec, params, xb, yb, config, adv_fraction, atk_seed)
            except AttackError as e:
                raise TrainingError(
                    f"attack failed in epoch {epoch}, batch {batch_id}: {e}") from e
            ad.backward(loss)
            _sgd_step(params, lr, config.weight_decay)

        if log is not None:
            frozen = params.detached()
            clean = models.forward(spec, frozen, ad.constant(dataset.inputs))
            log.append({
                "epoch": epoch,
                "clean_loss": models.classification_loss(clean, dataset.labels).item(),
                "adv_fraction": adv_fraction,
                "train_acc": accuracy(spec, params, dataset),
            })
    return params


def _batch_loss(spec: ModelSpec, params: Parameters, xb: np.ndarray,
                yb: np.ndarray, config: TrainConfig, adv_fraction: float,
                atk_seed: int) -> Tensor:
    if config.defense == "trades":
        lam = config.lam if adv_fraction > 0 else 0.0
        return trades_loss(spec, params, xb, yb, lam, config.attack, atk_seed)
    if config.defense == "mart":
        lam = config.lam if adv_fraction > 0 else 0.0
        return mart_loss(spec, params, xb, yb, lam, config.attack, atk_seed)
    if config.defense == "adv" and config.attack is not None:
        n_adv = int(round(adv_fraction * len(yb)))
        if n_adv > 0:
            adv = _craft_adversarial(spec, params, xb[:n_adv], yb[:n_adv],
                                     config.attack, atk_seed)
            xb = np.concatenate([adv, xb[n_adv:]])
    logits = models.forward(spec, params, ad.tensor(xb))
    return models.classification_loss(logits, yb)


def standard_train(spec: ModelSpec, dataset: Dataset, config: TrainConfig,
                   log: list | None = None) -> Parameters:
    if config.defense != "standard":
        raise ValueError(f"standard_train called with defense {config.defense!r}")
    return train_model(spec, dataset, config, log)


def adversarial_train(spec: ModelSpec, dataset: Dataset, config: TrainConfig,
                      log: list | None = None) -> Parameters:
    if config.defense != "adv":
        raise ValueError(f"adversarial_train called with defense {config.defense!r}")
    return train_model(spec, dataset, config, log)
