"""Two-stage optimization: stage 1 fits the captioner with plain NLL; stage 2
continues from the stage-1 checkpoint with the alpha-weighted aggregate of
NLL and the TE or NDE regularizer over counterfactual samples.

Every run is a pure function of (dataset, config): batch order comes from the
config seed, the optimizer is deterministic, and traces/checkpoints are
byte-stable. Counterfactual captions are generated once from the stage-1
model and frozen for all of stage 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoding import beam_search_batch
from .errors import ConfigError, TrainingDiverged
from .losses import LOG_PROB_FLOOR, RegularizationConfig, nll_loss_and_grad, stage2_loss_and_grad
from .model import PARAM_NAMES, ModelConfig, NeuralCaptioner

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    alpha: float = 1.0
    variant: str = "nde"
    seed: int = 0
    clip_norm: float = 1.0
    optimizer: str = "adam"
    log_prob_floor: float = LOG_PROB_FLOOR

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        # lr 0 is allowed: it is the null update used by determinism checks
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if self.variant not in ("te", "nde"):
            raise ConfigError("variant must be te or nde")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "alpha": self.alpha,
            "variant": self.variant,
            "seed": self.seed,
            "clip_norm": self.clip_norm,
            "optimizer": self.optimizer,
            "log_prob_floor": self.log_prob_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class _Optimizer:
    """SGD or Adam over the named parameter dict, deterministic order."""

    def __init__(self, kind: str, lr: float):
        self.kind = kind
        self.lr = lr
        self.t = 0
        self.m = None
        self.v = None
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        if self.kind == "sgd":
            for name in PARAM_NAMES:
                params[name] -= self.lr * grads[name]
            return
        if self.m is None:
            self.m = {n: np.zeros_like(params[n]) for n in PARAM_NAMES}
            self.v = {n: np.zeros_like(params[n]) for n in PARAM_NAMES}
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name in PARAM_NAMES:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / b1t
            vhat = self.v[name] / b2t
            params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_gradients(grads: dict, clip_norm: float) -> float:
    """Scale grads in place to global norm <= clip_norm; returns the pre-clip norm."""
    total = 0.0
    for name in PARAM_NAMES:
        total += float(np.sum(grads[name] * grads[name]))
    norm = float(np.sqrt(total))
    if norm > clip_norm:
        scale = clip_norm / norm
        for name in PARAM_NAMES:
            grads[name] *= scale
    return norm


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,))))
    return rng.permutation(n)


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]


@dataclass
class TrainResult:
    params: dict
    step_trace: list = field(default_factory=list)  # dicts: step, nll, reg, aggregate
    epoch_trace: list = field(default_factory=list)  # dicts: epoch, nll


def write_trace(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train_stage1(
    config: ModelConfig,
    init_params: dict,
    items,
    train_config: TrainConfig,
    on_step=None,
    max_steps: int | None = None,
) -> TrainResult:
    """Vanilla NLL training over (image, caption) pairs."""
    if len(items) == 0:
        raise ValueError("empty dataset")
    params = {k: v.copy() for k, v in init_params.items()}
    opt = _Optimizer(train_config.optimizer, train_config.learning_rate)
    result = TrainResult(params=params)
    step = 0
    for epoch in range(train_config.epochs):
        order = _epoch_order(train_config.seed, epoch, len(items))
        epoch_nll, epoch_tokens = 0.0, 0
        for batch_idx in _batches(order, train_config.batch_size):
            batch = [items[i] for i in batch_idx]
            nll, grads = nll_loss_and_grad(config, params, batch)
            if not np.isfinite(nll):
                raise TrainingDiverged(f"NLL became non-finite at step {step}")
            clip_gradients(grads, train_config.clip_norm)
            opt.step(params, grads)
            step += 1
            result.step_trace.append({"step": step, "nll": nll, "reg": 0.0, "aggregate": nll})
            epoch_nll += nll
            epoch_tokens += sum(len(t) for _, t in batch)
            if on_step is not None:
                on_step(step, params)
            if max_steps is not None and step >= max_steps:
                result.epoch_trace.append({"epoch": epoch + 1, "nll": epoch_nll, "nll_per_token": epoch_nll / epoch_tokens})
                return result
        result.epoch_trace.append({"epoch": epoch + 1, "nll": epoch_nll, "nll_per_token": epoch_nll / epoch_tokens})
    return result


def train_stage2(
    config: ModelConfig,
    stage1_params: dict,
    samples,
    train_config: TrainConfig,
    on_step=None,
    max_steps: int | None = None,
) -> TrainResult:
    """Aggregate-loss training over counterfactual samples.

    At alpha=1 each step is bit-identical to a stage-1 step on the samples'
    factual halves in the same batch order.
    """
    if len(samples) == 0:
        raise ValueError("empty counterfactual dataset")
    reg_config = RegularizationConfig(
        alpha=train_config.alpha,
        variant=train_config.variant,
        log_prob_floor=train_config.log_prob_floor,
    )
    params = {k: v.copy() for k, v in stage1_params.items()}
    opt = _Optimizer(train_config.optimizer, train_config.learning_rate)
    result = TrainResult(params=params)
    step = 0
    for epoch in range(train_config.epochs):
        order = _epoch_order(train_config.seed, epoch, len(samples))
        for batch_idx in _batches(order, train_config.batch_size):
            batch = [samples[i] for i in batch_idx]
            nll, reg, agg, grads = stage2_loss_and_grad(config, params, batch, reg_config)
            if not np.isfinite(agg):
                raise TrainingDiverged(f"aggregate loss became non-finite at step {step}")
            clip_gradients(grads, train_config.clip_norm)
            opt.step(params, grads)
            step += 1
            result.step_trace.append({"step": step, "nll": nll, "reg": reg, "aggregate": agg})
            if on_step is not None:
                on_step(step, params)
            if max_steps is not None and step >= max_steps:
                return result
    return result


def fill_cf_captions(config: ModelConfig, stage1_params: dict, records, beam_width: int = 5) -> list:
    """Generate S* for every record's counterfactual image with the stage-1
    model (beam search, lockstep across records). S* is diagnostic input for
    the regularizers, never a training target; hallucinated content in it is
    expected and fine."""
    from .dataio import with_cf_captions  # local import to avoid a cycle

    model = NeuralCaptioner(config, stage1_params)
    grids = [r.cf_image.flat() for r in records]
    captions = []
    chunk = 512  # keep lockstep forward batches at a sane width
    for i in range(0, len(grids), chunk):
        results = beam_search_batch(model, grids[i : i + chunk], beam_width, n_keep=1)
        captions.extend([res.items[0][0] for res in results])
    return with_cf_captions(records, captions)
