"""Toy multilingual encoder: projector, transformer blocks, per-language
bottleneck adapters, per-language output heads.

The layout mirrors a large adapter-based multilingual ASR encoder at desk
scale: frame features are projected to the model width, sinusoidal positions
are added once, and each post-LN transformer block is followed by a
language-specific residual adapter (LayerNorm -> down -> ReLU -> up -> +h).
A language-specific linear head maps final hidden states to token logits.

Parameters live in a flat `ParamSet` keyed by dotted paths such as
``block.3.adapter.lang0.down.weight``; the training mode decides which path
prefixes stay trainable (everything else is frozen).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from csasr.autograd import (
    ParamSet,
    Tensor,
    add,
    affine,
    attention_core,
    gelu,
    layer_norm,
    relu,
)
from csasr.rng import SplitMix64

__all__ = [
    "ModelConfig",
    "MODE_SINGLE",
    "MODE_MATRIX_FT",
    "MODE_PACS",
    "MODE_TCS",
    "MODES",
    "build_params",
    "positional_encoding",
    "linear",
    "projector_forward",
    "transformer_block_forward",
    "adapter_forward",
    "encode_hidden_single",
    "encode_single",
    "head_logits",
    "freeze_for_mode",
    "trainable_prefixes_for_mode",
]

MODE_SINGLE = "single"
MODE_MATRIX_FT = "matrix-ft"
MODE_PACS = "pacs"
MODE_TCS = "tcs"
MODES = (MODE_SINGLE, MODE_MATRIX_FT, MODE_PACS, MODE_TCS)

GATE_STRAIGHT_THROUGH = "straight_through"
GATE_SOFT = "soft"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk-scale instantiation."""

    n_blocks: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    adapter_bottleneck: int = 16
    d_feature: int = 32
    vocab0: int = 2                # matrix-language head width (>= blank + 1)
    vocab1: int = 2                # embedded-language head width
    layer_norm_eps: float = 1e-5
    mode: str = MODE_SINGLE
    gate_train_mode: str = GATE_STRAIGHT_THROUGH
    gate_threshold: float = 0.5    # fixed, not learned

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not self.adapter_bottleneck < self.d_model:
            raise ValueError("adapter_bottleneck must be smaller than d_model")
        if min(self.vocab0, self.vocab1) < 2:
            raise ValueError("each vocab needs at least blank + one symbol")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.gate_train_mode not in (GATE_STRAIGHT_THROUGH, GATE_SOFT):
            raise ValueError(f"unknown gate_train_mode {self.gate_train_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _gauss(rng: SplitMix64, shape: tuple[int, ...], scale: float) -> np.ndarray:
    n = int(np.prod(shape))
    return (np.asarray(rng.normals(n)) * scale).reshape(shape)


def _add_param(params: ParamSet, path: str, data: np.ndarray) -> None:
    params.add(path, Tensor(data, requires_grad=True))


def _add_linear(params: ParamSet, prefix: str, d_in: int, d_out: int,
                rng: SplitMix64, zero: bool = False) -> None:
    weight = np.zeros((d_in, d_out)) if zero else _gauss(rng, (d_in, d_out), 1.0 / math.sqrt(d_in))
    _add_param(params, f"{prefix}.weight", weight)
    _add_param(params, f"{prefix}.bias", np.zeros(d_out))


def _add_layer_norm(params: ParamSet, prefix: str, d: int) -> None:
    _add_param(params, f"{prefix}.gain", np.ones(d))
    _add_param(params, f"{prefix}.bias", np.zeros(d))


def add_transformer_block(params: ParamSet, prefix: str, d_model: int, d_ff: int,
                          rng: SplitMix64) -> None:
    for name in ("q", "k", "v", "out"):
        _add_linear(params, f"{prefix}.attn.{name}", d_model, d_model, rng)
    _add_layer_norm(params, f"{prefix}.ln1", d_model)
    _add_linear(params, f"{prefix}.ffn.fc1", d_model, d_ff, rng)
    _add_linear(params, f"{prefix}.ffn.fc2", d_ff, d_model, rng)
    _add_layer_norm(params, f"{prefix}.ln2", d_model)


def add_adapter(params: ParamSet, prefix: str, d_model: int, bottleneck: int,
                rng: SplitMix64) -> None:
    # zero-initialized up-projection makes a fresh adapter the identity map
    _add_layer_norm(params, f"{prefix}.norm", d_model)
    _add_param(params, f"{prefix}.down.weight", _gauss(rng, (d_model, bottleneck), 0.02))
    _add_param(params, f"{prefix}.down.bias", np.zeros(bottleneck))
    _add_param(params, f"{prefix}.up.weight", np.zeros((bottleneck, d_model)))
    _add_param(params, f"{prefix}.up.bias", np.zeros(d_model))


def build_params(config: ModelConfig, seed: int) -> ParamSet:
    """Backbone parameters: projector, blocks, both languages' adapters+heads."""
    config.validate()
    rng = SplitMix64(seed)
    params = ParamSet()
    _add_linear(params, "projector", config.d_feature, config.d_model, rng)
    for i in range(config.n_blocks):
        add_transformer_block(params, f"block.{i}", config.d_model, config.d_ff, rng)
        for lang in (0, 1):
            add_adapter(params, f"block.{i}.adapter.lang{lang}",
                        config.d_model, config.adapter_bottleneck, rng)
    for lang, vocab in ((0, config.vocab0), (1, config.vocab1)):
        _add_linear(params, f"head.lang{lang}", config.d_model, vocab, rng)
    return params


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(t: int, d_model: int) -> np.ndarray:
    """Sinusoidal positional table, added once after the projector."""
    key = (t, d_model)
    if key not in _PE_CACHE:
        pos = np.arange(t)[:, None]
        dim = np.arange(0, d_model, 2)[None, :]
        angle = pos / np.power(10000.0, dim / d_model)
        pe = np.zeros((t, d_model))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : pe[:, 1::2].shape[1]])
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def linear(h: Tensor, params: ParamSet, prefix: str) -> Tensor:
    return affine(h, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def projector_forward(features: Tensor, params: ParamSet, config: ModelConfig) -> Tensor:
    """Per-frame affine map into model width, plus positional encoding.

    The result is the stream every transformer block (and the frame gate,
    when one is configured) consumes.
    """
    if features.shape[-1] != config.d_feature:
        raise ValueError(
            f"projector: got feature dim {features.shape[-1]}, expected {config.d_feature}"
        )
    h = linear(features, params, "projector")
    pe = Tensor(positional_encoding(h.shape[0], config.d_model))
    return add(h, pe)


def multi_head_attention(h: Tensor, params: ParamSet, prefix: str, n_heads: int,
                         collect_attn: list | None = None) -> Tensor:
    q = linear(h, params, f"{prefix}.q")
    k = linear(h, params, f"{prefix}.k")
    v = linear(h, params, f"{prefix}.v")
    ctx = attention_core(q, k, v, n_heads, collect_attn)
    return linear(ctx, params, f"{prefix}.out")


def transformer_block_forward(h: Tensor, params: ParamSet, prefix: str,
                              config: ModelConfig,
                              collect_attn: list | None = None) -> Tensor:
    """Post-LN block: LN(h + MHA(h)) then LN(h + FFN(h))."""
    attn_out = multi_head_attention(h, params, f"{prefix}.attn", config.n_heads,
                                    collect_attn)
    h = layer_norm(add(h, attn_out), params[f"{prefix}.ln1.gain"],
                   params[f"{prefix}.ln1.bias"], config.layer_norm_eps)
    ffn = linear(gelu(linear(h, params, f"{prefix}.ffn.fc1")), params, f"{prefix}.ffn.fc2")
    return layer_norm(add(h, ffn), params[f"{prefix}.ln2.gain"],
                      params[f"{prefix}.ln2.bias"], config.layer_norm_eps)


def adapter_forward(h: Tensor, params: ParamSet, prefix: str,
                    config: ModelConfig) -> Tensor:
    """Residual bottleneck adapter: h + up(relu(down(LN(h))))."""
    y = layer_norm(h, params[f"{prefix}.norm.gain"], params[f"{prefix}.norm.bias"],
                   config.layer_norm_eps)
    y = relu(linear(y, params, f"{prefix}.down"))
    y = linear(y, params, f"{prefix}.up")
    return add(h, y)


def encode_hidden_single(features: Tensor, lang: int, params: ParamSet,
                         config: ModelConfig) -> Tensor:
    """Pre-head hidden states of the single-adapter path for one language."""
    if lang not in (0, 1):
        raise ValueError(f"unknown language id {lang!r}; expected 0 or 1")
    if f"block.0.adapter.lang{lang}.norm.gain" not in params:
        raise ValueError(f"no adapters present for language {lang}")
    h = projector_forward(features, params, config)
    for i in range(config.n_blocks):
        h = transformer_block_forward(h, params, f"block.{i}", config)
        h = adapter_forward(h, params, f"block.{i}.adapter.lang{lang}", config)
    return h


def head_logits(h: Tensor, lang: int, params: ParamSet) -> Tensor:
    return linear(h, params, f"head.lang{lang}")


def encode_single(features: Tensor, lang: int, params: ParamSet,
                  config: ModelConfig) -> Tensor:
    """Plain single-language path: blocks + that language's adapter and head."""
    return head_logits(encode_hidden_single(features, lang, params, config), lang, params)


# ---------------------------------------------------------------------------
# frozen / trainable partition
# ---------------------------------------------------------------------------

def trainable_prefixes_for_mode(mode: str) -> tuple[str, ...]:
    if mode == MODE_MATRIX_FT:
        return (".adapter.lang0.", "head.lang0.")
    if mode == MODE_PACS:
        return (".pacs.", "head.merged.")
    if mode == MODE_TCS:
        return ("tcs.", "head.merged.")
    raise ValueError(f"mode {mode!r} has no fine-tuning partition")


def freeze_for_mode(params: ParamSet, mode: str) -> None:
    """Freeze everything outside the mode's trainable set.

    matrix-ft trains the matrix adapters and matrix head; pacs trains the
    mixer blocks and merged head; tcs trains the gate and merged head. The
    pretrained backbone (projector, blocks, both language adapters in
    pacs/tcs) is always fixed.
    """
    keep = trainable_prefixes_for_mode(mode)
    for path, tensor in params.items():
        trainable = any(
            path.startswith(p) if not p.startswith(".") else p in path
            for p in keep
        )
        if not trainable:
            tensor.requires_grad = False
            tensor.grad = None
            params.frozen_paths.add(path)
