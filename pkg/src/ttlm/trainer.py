"""Truncated-BPTT training with global-norm clipping and averaged SGD."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .corpus import THINK_ID, make_batches
from .errors import ConfigError, NonFiniteError, TrainingDiverged
from .evaluation import masked_perplexity
from .injector import ThinkingTokenConfig, derive_loss_mask, inject
from .model import HiddenState, ModelParams, init_params, loss_and_grad

log = logging.getLogger(__name__)

SGD, ASGD = "SGD", "ASGD"
LOG_FIELDS = ("epoch", "train_nll", "valid_ppl", "lr", "mode", "seconds")


@dataclass
class TrainConfig:
    bptt_len: int = 70
    batch_lanes: int = 12
    clip_norm: float = 0.25
    hidden: int = 450
    embed: int = 450
    layers: int = 1
    learn_rate: float = 2.0
    max_epochs: int = 40
    seed: int = 0
    asgd_nonmono: int = 5
    asgd_start_epoch: int | None = None  # fixed trigger epoch instead of the non-monotonic rule
    lr_patience: int = 2
    thinking_n: int = 0
    train_mask_thinking: bool = False
    tie_weights: bool = False

    def validate(self) -> None:
        for name in ("bptt_len", "batch_lanes", "hidden", "embed", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.layers != 1:
            raise ConfigError("only single-layer models are supported")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0")
        if self.learn_rate < 0 or self.thinking_n < 0 or self.asgd_nonmono < 0:
            raise ConfigError("learn_rate, thinking_n and asgd_nonmono must be >= 0")
        if self.tie_weights and self.embed != self.hidden:
            raise ConfigError(f"weight tying needs embed == hidden, got {self.embed} and {self.hidden}")


@dataclass
class OptimizerState:
    mode: str = SGD
    averaged: ModelParams | None = None
    steps_averaged: int = 0
    val_history: list[float] = field(default_factory=list)

    def start_averaging(self, params: ModelParams) -> None:
        self.mode = ASGD
        self.averaged = params.copy()
        self.steps_averaged = 1


def global_norm(grads: ModelParams) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.tensors()))


def clip_gradients(grads: ModelParams, clip_norm: float) -> tuple[ModelParams, float]:
    """Rescale all gradients jointly so their global L2 norm is at most ``clip_norm``.

    Returns the (possibly scaled) gradients and the norm before clipping.
    """
    if not clip_norm > 0:
        raise ConfigError("clip_norm must be > 0")
    for name, g in grads.named_tensors():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name}")
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return grads.map(lambda g: g * scale), norm
    return grads, norm


def sgd_step(params: ModelParams, grads: ModelParams, learn_rate: float) -> ModelParams:
    """In-place ``p -= lr * g``; returns ``params``."""
    for (name, p), g in zip(params.named_tensors(), grads.tensors()):
        p -= learn_rate * g
        if not np.isfinite(p).all():
            raise NonFiniteError(f"non-finite parameters in {name} after update")
    return params


def asgd_accumulate(opt: OptimizerState, params: ModelParams) -> OptimizerState:
    if opt.mode != ASGD:
        raise ValueError("averaging is not active")
    k = opt.steps_averaged + 1
    for avg, p in zip(opt.averaged.tensors(), params.tensors()):
        avg += (p - avg) / k
    opt.steps_averaged = k
    return opt


def maybe_trigger_asgd(opt: OptimizerState, current_val_nll: float, params: ModelParams | None = None,
                       nonmono: int = 5) -> OptimizerState:
    """Switch to averaging when validation stops improving.

    Triggers once ``current_val_nll`` is not below the best of the previous
    ``nonmono`` validations (at least ``nonmono`` of them, and at least one).
    """
    window = max(nonmono, 1)
    prior = opt.val_history
    if opt.mode == SGD and len(prior) >= window and current_val_nll >= min(prior[-window:]):
        if params is not None:
            opt.start_averaging(params)
        else:
            opt.mode = ASGD
        log.info("non-monotonic trigger: switching to averaged SGD")
    opt.val_history.append(current_val_nll)
    return opt


@dataclass
class PlateauHalving:
    """Halve the learning rate after ``patience`` epochs without a new best."""

    lr: float
    patience: int = 2
    best: float = math.inf
    bad_epochs: int = 0

    def update(self, val_nll: float) -> bool:
        if val_nll < self.best:
            self.best = val_nll
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr /= 2
            self.bad_epochs = 0
        return False


@dataclass
class EpochLog:
    epoch: int
    train_nll: float
    valid_ppl: float
    lr: float
    mode: str
    seconds: float

    def row(self) -> list:
        return [self.epoch, repr(self.train_nll), repr(self.valid_ppl), repr(self.lr), self.mode, f"{self.seconds:.3f}"]


def _prepare_streams(config: TrainConfig, train_ids, valid_ids):
    cfg = ThinkingTokenConfig(config.thinking_n, THINK_ID)
    return inject(train_ids, cfg), inject(valid_ids, cfg)


def train(config: TrainConfig, train_ids, valid_ids, vocab_size: int, checkpoint_path=None, log_path=None,
          vocab_hash: int = 0) -> tuple[ModelParams, list[EpochLog]]:
    """Train from scratch on encoded (not yet injected) streams.

    Returns the averaged parameters if averaging kicked in, else the last iterate.
    """
    config.validate()
    train_stream, valid_stream = _prepare_streams(config, train_ids, valid_ids)
    batches = make_batches(train_stream, config.batch_lanes, config.bptt_len)
    params = init_params(vocab_size, config.embed, config.hidden, config.seed, config.tie_weights)
    opt = OptimizerState()
    schedule = PlateauHalving(config.learn_rate, config.lr_patience)

    initial_nll = math.log(masked_perplexity(params, valid_stream).perplexity)
    history: list[EpochLog] = []
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_FIELDS)

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        mode, lr = opt.mode, schedule.lr
        state = HiddenState.zeros(batches.lanes, config.hidden)
        sum_nll, sum_count = 0.0, 0
        for inputs, targets in batches.windows():
            mask = derive_loss_mask(targets, THINK_ID).flags if config.train_mask_thinking else None
            nll, count, grads, state = loss_and_grad(params, inputs, targets, mask, state)
            if count == 0:
                continue
            grads, _ = clip_gradients(grads.map(lambda g: g / count), config.clip_norm)
            sgd_step(params, grads, lr)
            if opt.mode == ASGD:
                asgd_accumulate(opt, params)
            sum_nll += nll
            sum_count += count

        eval_params = opt.averaged if opt.mode == ASGD else params
        valid_ppl = masked_perplexity(eval_params, valid_stream).perplexity
        val_nll = math.log(valid_ppl)
        if not math.isfinite(val_nll) or val_nll > 3 * initial_nll:
            raise TrainingDiverged(f"epoch {epoch}: validation NLL {val_nll:.4f} exceeds 3x initial {initial_nll:.4f}")

        entry = EpochLog(epoch, sum_nll / max(sum_count, 1), valid_ppl, lr, mode, time.perf_counter() - started)
        history.append(entry)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(entry.row())
        log.info("epoch %d train_nll %.4f valid_ppl %.3f lr %g %s %.1fs", epoch, entry.train_nll, valid_ppl, lr,
                 mode, entry.seconds)

        if schedule.update(val_nll) and checkpoint_path is not None:
            save_checkpoint(eval_params, checkpoint_path, vocab_hash, config.thinking_n)

        if config.asgd_start_epoch is not None:
            if opt.mode == SGD and epoch >= config.asgd_start_epoch:
                opt.start_averaging(params)
            opt.val_history.append(val_nll)
        else:
            maybe_trigger_asgd(opt, val_nll, params, config.asgd_nonmono)

    return (opt.averaged if opt.mode == ASGD else params), history


def read_epoch_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
