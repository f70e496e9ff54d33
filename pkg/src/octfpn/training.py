"""Adam, plateau learning-rate halving, early stopping, the per-fold training
loop and head-swap weight transfer."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import rng as rng_mod
from .backbone import BackboneConfig
from .checkpoint import Checkpoint
from .data import AugmentationConfig, apply_augmentation, sample_augmentation
from .fusion import FPNModel, FusionConfig, build_model
from .layers import loss_targets, weighted_cce

log = logging.getLogger(__name__)

OUTPUT_LAYER = ("classifier/output/kernel", "classifier/output/bias")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_patience: int = 1
    early_stop_patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def flat(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_flat(cls, flat: Mapping[str, np.ndarray], t: int) -> "AdamState":
        state = cls(t=t)
        for key, arr in flat.items():
            which, name = key.split("/", 1)
            (state.m if which == "m" else state.v)[name] = np.array(arr)
        return state


def adam_step(params: dict, grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  Returns ``(new_params, state)``.

    ``params`` is not modified; parameters without a gradient are carried over.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    t = state.t + 1
    new = dict(params)
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    state.t = t
    return new, state


# ---------------------------------------------------------------------------
# schedule rules
# ---------------------------------------------------------------------------


def _improved(history: Sequence[float], j: int) -> bool:
    return j == 0 or history[j] < min(history[:j])


def lr_on_plateau(lr: float, history: Sequence[float]) -> float:
    """Halve ``lr`` unless the latest validation loss beat every earlier one."""
    if not history:
        raise ValueError("validation loss history is empty")
    return lr if _improved(history, len(history) - 1) else lr / 2


def early_stop(history: Sequence[float], patience: int = 10) -> bool:
    """True once the last ``patience`` epochs all failed to improve on the running best."""
    trailing = 0
    for j in range(len(history)):
        trailing = 0 if _improved(history, j) else trailing + 1
    return trailing >= patience


@dataclass
class Schedule:
    lr: float
    history: list[float] = field(default_factory=list)
    bad_epochs: int = 0

    @property
    def best(self) -> float:
        return min(self.history) if self.history else math.inf

    def update(self, val_loss: float, lr_patience: int = 1, stop_patience: int = 10) -> tuple[bool, bool]:
        """Record an epoch; returns ``(improved, stop)`` and adjusts ``lr``."""
        improved = val_loss < self.best
        self.history.append(float(val_loss))
        self.bad_epochs = 0 if improved else self.bad_epochs + 1
        if not improved and self.bad_epochs % lr_patience == 0:
            self.lr = self.lr / 2
        return improved, self.bad_epochs >= stop_patience


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    params: dict[str, np.ndarray]
    optimizer: AdamState
    schedule: Schedule
    epoch: int
    best_epoch: int
    stopped: bool
    log: list[dict]


def batch_images(images, indices, config: TrainConfig, aug: AugmentationConfig | None, fold, epoch):
    batch = images[indices]
    if not (config.augment and aug is not None):
        return batch
    out = np.empty_like(batch)
    for j, idx in enumerate(indices):
        draw = sample_augmentation(aug, rng_mod.stream(config.seed, "augment", fold, epoch, int(idx)))
        out[j] = apply_augmentation(batch[j], draw)
    return out


def evaluate_loss(model: FPNModel, params, images, labels, weights) -> float:
    if len(labels) == 0:
        return math.nan
    probs = model.predict(images, params)
    return weighted_cce(probs, labels, weights)


def train_fold(model: FPNModel, images: np.ndarray, labels: np.ndarray, train_idx, val_idx,
               config: TrainConfig, class_weights: Sequence[float],
               augmentation: AugmentationConfig | None = None, fold: int = 0,
               resume: TrainResult | None = None, max_epochs: int | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on ``train_idx``, select the best validation-loss parameters.

    Randomness is keyed by ``(config.seed, fold, epoch)`` so resuming from a
    :class:`TrainResult` reproduces uninterrupted training exactly.
    ``max_epochs`` overrides ``config.max_epochs`` for the epoch budget of this call.
    """
    train_idx = np.asarray(train_idx, dtype=int)
    val_idx = np.asarray(val_idx, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if train_idx.size == 0:
        raise ValueError(f"fold {fold}: empty training set")
    weights = np.asarray(class_weights, dtype=np.float64)
    limit = config.max_epochs if max_epochs is None else max_epochs
    if resume is None:
        params = {k: v.copy() for k, v in model.params.items()}
        result = TrainResult({k: v.copy() for k, v in params.items()}, params, AdamState(),
                             Schedule(config.learning_rate), 0, -1, False, [])
    else:
        result = resume
    while result.epoch < limit and not result.stopped:
        epoch = result.epoch
        order = train_idx[rng_mod.stream(config.seed, "shuffle", fold, epoch).permutation(train_idx.size)]
        lr = result.schedule.lr
        losses = []
        for b, start in enumerate(range(0, order.size, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = batch_images(images, idx, config, augmentation, fold, epoch)
            targets = loss_targets(labels[idx], weights, model.n_classes)
            trace = ad.run(model.tape, {"image": x, "targets": targets}, result.params, [model.loss],
                           training=True, rng_key=(config.seed, "dropout", fold, epoch, b))
            grads = ad.backward(model.tape, model.loss, trace=trace)
            losses.append(float(trace.values[model.loss]) * idx.size)
            result.params, result.optimizer = adam_step(result.params, grads, result.optimizer, lr,
                                                        config.beta1, config.beta2, config.epsilon)
        train_loss = sum(losses) / order.size
        if val_idx.size:
            val_loss = evaluate_loss(model, result.params, images[val_idx], labels[val_idx], weights)
        else:
            val_loss = train_loss
        improved, stop = result.schedule.update(val_loss, config.lr_patience, config.early_stop_patience)
        if improved:
            result.best_params = {k: v.copy() for k, v in result.params.items()}
            result.best_epoch = epoch
        result.epoch = epoch + 1
        result.stopped = stop
        record = {"fold": fold, "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                  "lr": lr, "stopped": stop}
        result.log.append(record)
        log.debug("fold %d epoch %d train %.4f val %.4f lr %.2e", fold, epoch, train_loss, val_loss, lr)
        if on_epoch is not None:
            on_epoch(record)
    return result


def result_checkpoint(model: FPNModel, result: TrainResult, fold: int, seed: int, best: bool = True) -> Checkpoint:
    """Package a training result; ``best=False`` stores the resumable last state."""
    params = result.best_params if best else result.params
    state = {"lr": result.schedule.lr, "history": result.schedule.history,
             "bad_epochs": result.schedule.bad_epochs, "best_epoch": result.best_epoch,
             "stopped": result.stopped, "log": result.log}
    best_loss = result.schedule.best
    return Checkpoint(
        params={k: np.asarray(v) for k, v in params.items()},
        backbone=model.backbone.to_dict(), fusion=model.fusion.to_dict(),
        epoch=result.epoch,
        best_val_loss=None if not math.isfinite(best_loss) else best_loss,
        rng_cursor={"seed": seed, "fold": fold, "next_epoch": result.epoch},
        state=state,
        optimizer={} if best else result.optimizer.flat(),
        optimizer_step=0 if best else result.optimizer.t,
        best_params={} if best else {k: np.asarray(v) for k, v in result.best_params.items()},
    )


def resume_from(ckpt: Checkpoint) -> TrainResult:
    """Rebuild a :class:`TrainResult` from a checkpoint written with ``best=False``."""
    s = ckpt.state
    schedule = Schedule(s["lr"], list(s["history"]), s["bad_epochs"])
    params = {k: np.array(v) for k, v in ckpt.params.items()}
    best = {k: np.array(v) for k, v in (ckpt.best_params or ckpt.params).items()}
    return TrainResult(best, params,
                       AdamState.from_flat(ckpt.optimizer, ckpt.optimizer_step), schedule,
                       ckpt.epoch, s["best_epoch"], s["stopped"], list(s["log"]))


def model_from_checkpoint(ckpt: Checkpoint) -> FPNModel:
    model = build_model(BackboneConfig.from_dict(ckpt.backbone), FusionConfig.from_dict(ckpt.fusion),
                        materialize=False)
    missing = set(model.tape.parameters) ^ set(ckpt.params)
    if missing:
        raise ValueError(f"checkpoint does not match its own configs: {sorted(missing)}")
    model.params = {k: np.array(v) for k, v in ckpt.params.items()}
    return model


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


@dataclass
class TransferReport:
    copied: list[str]
    reinitialized: list[str]


def transfer_weights(source: Checkpoint, backbone: BackboneConfig, fusion: FusionConfig,
                     seed: int = 0, sections: Sequence[str] | None = None):
    """Initialise a new model from ``source``.

    Every parameter with matching name and shape is copied.  The final output
    layer is freshly initialised when the class count changes.  With
    ``sections`` (e.g. ``("encoder",)``) only parameters under those prefixes
    are copied and the rest keep their fresh initialisation.  Any other
    structural difference raises ``ValueError`` listing the offending names.

    Returns ``(model, TransferReport)``.
    """
    model = build_model(backbone, fusion, seed=seed)
    src = source.params
    copied, fresh, mismatched = [], [], []
    for name in sorted(model.tape.parameters):
        shape = model.tape.parameters[name].shape
        if sections is not None and name.split("/", 1)[0] not in sections:
            fresh.append(name)
            continue
        if name in src and tuple(src[name].shape) == tuple(shape):
            model.params[name] = np.array(src[name], dtype=model.params[name].dtype)
            copied.append(name)
        elif name in OUTPUT_LAYER and name in src and source.fusion.get("n_classes") != fusion.n_classes:
            fresh.append(name)
        else:
            mismatched.append(name)
    if sections is None:
        mismatched += sorted(set(src) - set(model.tape.parameters))
    else:
        mismatched += sorted(n for n in set(src) - set(model.tape.parameters)
                             if n.split("/", 1)[0] in sections)
    if mismatched:
        raise ValueError("source and target structures differ at: " + ", ".join(sorted(set(mismatched))))
    return model, TransferReport(copied, fresh)
