"""Optimizer, learning-rate schedule, and the two-phase training protocol.

Phase one pretrains the whole toy backbone (projector, blocks, both
languages' adapters and heads) on monolingual data, routing each utterance
through its own language's adapter and head. Phase two freezes everything
but the fine-tuning mode's trainable set and trains on code-switched data:
``matrix-ft`` updates the matrix adapters + matrix head, ``pacs`` the mixer
blocks + merged head, ``tcs`` the gate + merged head.

Batching is realized as gradient accumulation over single utterances with
the summed utterance CTC loss averaged across the window. Gradients are
norm-clipped (config switch) before each bias-corrected Adam update.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from csasr.autograd import ParamSet, Tensor, log_softmax, mul
from csasr.backbone import (
    MODE_MATRIX_FT,
    MODE_PACS,
    MODE_TCS,
    ModelConfig,
    encode_single,
    freeze_for_mode,
)
from csasr.checkpoints import Checkpoint
from csasr.ctc import ctc_loss
from csasr.rng import SplitMix64
from csasr.switching import MergedHead, add_switch_params, build_merged_head, encode_cs
from csasr.synthdata import Corpus, Utterance, merged_transcript_to_ids, transcript_to_ids

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "AdamState",
    "lr_at",
    "adam_step",
    "clip_gradients",
    "pretrain",
    "finetune",
    "TrainResult",
]


class TrainingDivergedError(Exception):
    """Raised when a loss or gradient goes non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup: int = 100              # optimizer steps of linear ramp
    power: float = 1.0             # polynomial decay exponent
    accum: int = 16                # utterances per optimizer step
    max_epochs: int = 100
    patience: int = 10             # epochs without val improvement
    min_delta: float = 1e-4        # improvement below this does not reset patience
    clip_norm: float = 1.0
    clip: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    zero_infinity: bool = True

    def validate(self, total_steps: int) -> None:
        if self.warmup >= total_steps:
            raise ValueError(
                f"warmup ({self.warmup}) must be smaller than total steps ({total_steps})"
            )
        if self.accum < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("degenerate training config")


def lr_at(step: int, base: float, warmup: int, total: int, power: float = 1.0) -> float:
    """Linear ramp to ``base`` over ``warmup`` steps, then polynomial decay to 0."""
    if step < 1:
        raise ValueError(f"lr_at expects step >= 1, got {step}")
    if warmup > 0 and step <= warmup:
        return base * (step / warmup)
    if step >= total:
        return 0.0
    frac = (step - warmup) / (total - warmup)
    return base * (1.0 - frac) ** power


class AdamState:
    """First/second moment buffers for exactly the trainable parameters."""

    def __init__(self, params: ParamSet, config: TrainConfig):
        self.config = config
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for path, tensor in params.trainable():
            self.m[path] = np.zeros_like(tensor.data)
            self.v[path] = np.zeros_like(tensor.data)


def clip_gradients(params: ParamSet, max_norm: float) -> float:
    """Scale all trainable gradients so their global norm is <= max_norm."""
    total = 0.0
    for _, tensor in params.trainable():
        if tensor.grad is not None:
            total += float((tensor.grad ** 2).sum())
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise TrainingDivergedError(f"gradient norm is {norm}")
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, tensor in params.trainable():
            if tensor.grad is not None:
                tensor.grad = tensor.grad * scale
    return norm


def adam_step(params: ParamSet, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update on the trainable set; zeroes gradients after."""
    cfg = state.config
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for path, tensor in params.trainable():
        if tensor.grad is None:
            raise TrainingDivergedError(
                f"trainable parameter {path!r} has no gradient (detached graph?)"
            )
        g = tensor.grad
        m = state.m[path]
        v = state.v[path]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        tensor.data = tensor.data - lr * update
    params.zero_grads()


# ---------------------------------------------------------------------------
# loss construction per mode
# ---------------------------------------------------------------------------

def _single_lang_loss(utt: Utterance, lang: int, table: list[str], params: ParamSet,
                      config: ModelConfig, zero_infinity: bool,
                      drop_unknown: bool = False) -> Tensor:
    logits = encode_single(Tensor(utt.features), lang, params, config)
    target = transcript_to_ids(utt.transcript, table, drop_unknown=drop_unknown)
    return ctc_loss(log_softmax(logits), target, zero_infinity=zero_infinity)


def _cs_loss(utt: Utterance, params: ParamSet, config: ModelConfig,
             merged: MergedHead, masked: np.ndarray, zero_infinity: bool,
             training: bool) -> Tensor:
    result = encode_cs(Tensor(utt.features), params, config, merged, training=training)
    target = merged_transcript_to_ids(utt.transcript, merged.token_table, masked)
    return ctc_loss(log_softmax(result.logits), target, zero_infinity=zero_infinity)


# ---------------------------------------------------------------------------
# generic loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamSet
    best_val_loss: float
    epochs_run: int
    log_lines: list[str] = field(default_factory=list)
    best_val_history: list[float] = field(default_factory=list)


def _train_loop(params: ParamSet, train_items: list, val_items: list,
                loss_fn, tconfig: TrainConfig) -> TrainResult:
    """Shared epoch loop: accumulate, clip, step, validate, early-stop.

    ``loss_fn(item, training)`` must return a scalar loss tensor.
    """
    steps_per_epoch = max(1, math.ceil(len(train_items) / tconfig.accum))
    total_steps = tconfig.max_epochs * steps_per_epoch
    tconfig.validate(total_steps)
    rng = SplitMix64(tconfig.seed)
    state = AdamState(params, tconfig)
    result = TrainResult(params=params, best_val_loss=math.inf, epochs_run=0)
    best_snapshot = params.snapshot()
    stale_epochs = 0
    inv_window = 1.0 / tconfig.accum

    for epoch in range(1, tconfig.max_epochs + 1):
        start = time.perf_counter()
        order = list(train_items)
        rng.shuffle(order)
        epoch_loss = 0.0
        pending = 0
        last_lr = 0.0
        for item in order:
            loss = loss_fn(item, True)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite training loss {value}")
            epoch_loss += value
            mul(loss, Tensor(inv_window)).backward()
            pending += 1
            if pending == tconfig.accum:
                if tconfig.clip:
                    clip_gradients(params, tconfig.clip_norm)
                last_lr = lr_at(state.step_count + 1, tconfig.lr, tconfig.warmup,
                                total_steps, tconfig.power)
                adam_step(params, state, last_lr)
                pending = 0
        if pending:
            if tconfig.clip:
                clip_gradients(params, tconfig.clip_norm)
            last_lr = lr_at(state.step_count + 1, tconfig.lr, tconfig.warmup,
                            total_steps, tconfig.power)
            adam_step(params, state, last_lr)

        val_loss = 0.0
        for item in val_items:
            val_loss += loss_fn(item, False).item()
        val_loss /= max(1, len(val_items))
        train_loss = epoch_loss / max(1, len(train_items))
        wall = time.perf_counter() - start
        result.log_lines.append(
            f"{epoch}\t{train_loss:.6f}\t{val_loss:.6f}\t{last_lr:.8f}\t{wall:.2f}"
        )
        result.epochs_run = epoch

        if val_loss < result.best_val_loss - tconfig.min_delta:
            stale_epochs = 0
        else:
            stale_epochs += 1
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            best_snapshot = params.snapshot()
        result.best_val_history.append(result.best_val_loss)
        if stale_epochs > tconfig.patience:
            break

    params.restore(best_snapshot)
    return result


# ---------------------------------------------------------------------------
# the two phases
# ---------------------------------------------------------------------------

def pretrain(corpus: Corpus, model_config: ModelConfig, tconfig: TrainConfig,
             params: ParamSet | None = None) -> TrainResult:
    """Monolingual pretraining of the full backbone on both languages."""
    table0, table1 = corpus.token_tables()
    model_config.validate()
    if model_config.vocab0 != len(table0) or model_config.vocab1 != len(table1):
        raise ValueError("model vocab sizes do not match the corpus token tables")
    if params is None:
        from csasr.backbone import build_params
        params = build_params(model_config, tconfig.seed)
    train_items = ([(u, 0) for u in corpus.splits["mono_a_train"]]
                   + [(u, 1) for u in corpus.splits["mono_b_train"]])
    val_items = ([(u, 0) for u in corpus.splits["mono_a_val"]]
                 + [(u, 1) for u in corpus.splits["mono_b_val"]])
    tables = {0: table0, 1: table1}

    def loss_fn(item, training):
        utt, lang = item
        return _single_lang_loss(utt, lang, tables[lang], params, model_config,
                                 tconfig.zero_infinity)

    return _train_loop(params, train_items, val_items, loss_fn, tconfig)


def finetune(ckpt: Checkpoint, corpus: Corpus, mode: str,
             tconfig: TrainConfig) -> tuple[TrainResult, MergedHead | None, ModelConfig]:
    """Frozen-backbone fine-tuning on the code-switched train split."""
    if mode not in (MODE_MATRIX_FT, MODE_PACS, MODE_TCS):
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    params = ckpt.params
    config = ModelConfig(**{**ckpt.config.to_dict(), "mode": mode})
    config.validate()
    table0, table1 = ckpt.table0, ckpt.table1

    merged: MergedHead | None = None
    if mode in (MODE_PACS, MODE_TCS):
        add_switch_params(params, config, tconfig.seed)
        merged = build_merged_head(params, table0, table1, config.d_model)
    freeze_for_mode(params, mode)

    train_items = corpus.splits["cs_train"]
    val_items = corpus.splits["cs_val"]

    if mode == MODE_MATRIX_FT:
        def loss_fn(utt, training):
            # cross-language characters absent from the matrix table are
            # dropped from targets; references keep them, so they still score
            return _single_lang_loss(utt, 0, table0, params, config,
                                     tconfig.zero_infinity, drop_unknown=True)
    else:
        masked = np.isneginf(merged.mask.data)

        def loss_fn(utt, training):
            return _cs_loss(utt, params, config, merged, masked,
                            tconfig.zero_infinity, training)

    result = _train_loop(params, train_items, val_items, loss_fn, tconfig)
    return result, merged, config
