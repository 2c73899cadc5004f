"""Code-switching machinery: merged output head, post-adapter mixer blocks,
and the frame-level transformer gate.

Two mechanisms route information from the two language adapters:

* **pacs** (post-adapter code switching): per block, both adapters run on the
  block output, their results are concatenated (width 2*d_model) and fed to a
  mixer block shaped like an adapter; the mixer's output is added to the
  matrix adapter's output. With a zero-initialized up-projection the path is
  exactly the matrix single-adapter path, so fine-tuning starts from the
  matrix-language baseline.

* **tcs** (transformer code switching): one transformer block over the
  projector output, a linear map to one scalar per frame, and a sigmoid give
  a soft gate; binarizing at a strict ``> 0.5`` yields the hard per-frame
  language code (0 = matrix adapter, 1 = embedded adapter). The gate is
  computed once per utterance and reused at every block, selecting per frame
  via ``(1 - g) * matrix + g * embedded`` with the scalar repeated across the
  feature dimension. Training passes gradients through the threshold with a
  straight-through surrogate (or can mix with the soft gate directly).

The merged head concatenates the two pretrained heads' weights and adds a
fixed -inf logit mask over matrix-head entries that duplicate embedded-head
symbols (Latin letters, digits, punctuation) and over the embedded head's
blank, so CTC keeps a single blank and masked tokens get probability exactly
zero forever.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from csasr.autograd import (
    ParamSet,
    Tensor,
    add,
    concat_last_dim,
    layer_norm,
    matmul,
    mul,
    relu,
    sigmoid,
    straight_through_threshold,
)
from csasr.backbone import (
    GATE_SOFT,
    MODE_PACS,
    MODE_TCS,
    ModelConfig,
    add_transformer_block,
    adapter_forward,
    linear,
    projector_forward,
    transformer_block_forward,
)
from csasr.rng import SplitMix64

__all__ = [
    "GateSequence",
    "MergedHead",
    "build_merged_head",
    "add_switch_params",
    "pacs_forward",
    "tcs_gate",
    "tcs_mix",
    "encode_cs",
    "CSForward",
    "write_gate_dump",
    "read_gate_dump",
]

_MASKABLE = set(string.ascii_lowercase) | set(string.digits) | set(string.punctuation)


@dataclass
class GateSequence:
    """Per-frame gate: soft values in (0,1) and their binarized form."""

    soft: Tensor            # [T, 1]
    hard: Tensor            # [T, 1], {0, 1}; carries straight-through grad in training
    mixing: Tensor          # the tensor Eq-style mixing consumes (hard or soft)

    def hard_labels(self) -> list[int]:
        return [int(v) for v in self.hard.data[:, 0]]


@dataclass
class MergedHead:
    token_table: list[str]
    mask: Tensor            # [V1+V2] of {0, -inf}, additive on logits, constant
    blank_index: int
    v1: int
    v2: int

    def masked_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.mask.data) if v == -np.inf]


def build_merged_head(params: ParamSet, table0: list[str], table1: list[str],
                      d_model: int) -> MergedHead:
    """Concatenate the two pretrained heads into one trainable merged head.

    Columns [0, V1) are copied from the matrix head, [V1, V1+V2) from the
    embedded head; nothing is re-initialized. The mask silences matrix-head
    Latin letters / digits / punctuation and the embedded head's blank.
    """
    w0, b0 = params["head.lang0.weight"], params["head.lang0.bias"]
    w1, b1 = params["head.lang1.weight"], params["head.lang1.bias"]
    if w0.shape[0] != d_model or w1.shape[0] != d_model:
        raise ValueError(
            f"merged head: head widths {w0.shape[0]}/{w1.shape[0]} do not match "
            f"d_model {d_model}"
        )
    v1, v2 = len(table0), len(table1)
    if w0.shape[1] != v1 or w1.shape[1] != v2:
        raise ValueError("merged head: token tables do not match head shapes")
    weight = np.concatenate([w0.data, w1.data], axis=1).copy()
    bias = np.concatenate([b0.data, b1.data]).copy()
    if "head.merged.weight" in params:
        params["head.merged.weight"].data = weight
        params["head.merged.bias"].data = bias
    else:
        params.add("head.merged.weight", Tensor(weight, requires_grad=True))
        params.add("head.merged.bias", Tensor(bias, requires_grad=True))

    mask = np.zeros(v1 + v2)
    for i, tok in enumerate(table0):
        if tok in _MASKABLE:
            mask[i] = -np.inf
    mask[v1] = -np.inf  # the embedded head's blank; index 0 stays the only blank
    return MergedHead(list(table0) + list(table1), Tensor(mask), 0, v1, v2)


def add_switch_params(params: ParamSet, config: ModelConfig, seed: int) -> None:
    """Create the mode's switcher parameters (fresh, before fine-tuning).

    Down-projections start as a small Gaussian and up/output projections as
    zero, so the first forward pass reproduces the matrix-language baseline.
    """
    rng = SplitMix64(seed)
    if config.mode == MODE_PACS:
        d2 = 2 * config.d_model
        for i in range(config.n_blocks):
            prefix = f"block.{i}.pacs"
            params.add(f"{prefix}.norm.gain", Tensor(np.ones(d2), requires_grad=True))
            params.add(f"{prefix}.norm.bias", Tensor(np.zeros(d2), requires_grad=True))
            params.add(f"{prefix}.down.weight",
                       Tensor(np.asarray(rng.normals(d2 * config.adapter_bottleneck))
                              .reshape(d2, config.adapter_bottleneck) * 0.02,
                              requires_grad=True))
            params.add(f"{prefix}.down.bias",
                       Tensor(np.zeros(config.adapter_bottleneck), requires_grad=True))
            params.add(f"{prefix}.up.weight",
                       Tensor(np.zeros((config.adapter_bottleneck, config.d_model)),
                              requires_grad=True))
            params.add(f"{prefix}.up.bias",
                       Tensor(np.zeros(config.d_model), requires_grad=True))
    elif config.mode == MODE_TCS:
        add_transformer_block(params, "tcs", config.d_model, config.d_ff, rng)
        params.add("tcs.out.weight",
                   Tensor(np.zeros((config.d_model, 1)), requires_grad=True))
        params.add("tcs.out.bias", Tensor(np.zeros(1), requires_grad=True))
    else:
        raise ValueError(f"mode {config.mode!r} has no switcher parameters")


def pacs_forward(h_block: Tensor, params: ParamSet, block_idx: int,
                 config: ModelConfig) -> Tensor:
    """Mix both adapters' outputs through the block's mixer.

    Returns ``o_a1 + mixer(concat(o_a1, o_a2))``; the residual is taken from
    the matrix adapter's output so a zero-initialized mixer reproduces the
    matrix single-adapter path exactly.
    """
    prefix = f"block.{block_idx}"
    o_a1 = adapter_forward(h_block, params, f"{prefix}.adapter.lang0", config)
    o_a2 = adapter_forward(h_block, params, f"{prefix}.adapter.lang1", config)
    y = concat_last_dim(o_a1, o_a2)
    y = layer_norm(y, params[f"{prefix}.pacs.norm.gain"],
                   params[f"{prefix}.pacs.norm.bias"], config.layer_norm_eps)
    y = relu(linear(y, params, f"{prefix}.pacs.down"))
    y = linear(y, params, f"{prefix}.pacs.up")
    return add(o_a1, y)


def tcs_gate(projector_out: Tensor, params: ParamSet, config: ModelConfig,
             training: bool) -> GateSequence:
    """Per-frame gate from the projector output, shared by every block.

    The hard gate uses a strict ``> threshold`` comparison, so a perfectly
    uncertain frame (sigmoid exactly 0.5) routes to the matrix language. In
    training the hard gate carries straight-through gradients (or, with
    ``gate_train_mode = "soft"``, the soft gate itself is used for mixing);
    in eval the hard gate is a constant.
    """
    h = transformer_block_forward(projector_out, params, "tcs", config)
    z = linear(h, params, "tcs.out")
    soft = sigmoid(z)
    if training:
        if config.gate_train_mode == GATE_SOFT:
            hard = Tensor((soft.data > config.gate_threshold).astype(np.float64))
            return GateSequence(soft=soft, hard=hard, mixing=soft)
        hard = straight_through_threshold(soft, config.gate_threshold)
        return GateSequence(soft=soft, hard=hard, mixing=hard)
    hard = Tensor((soft.data > config.gate_threshold).astype(np.float64))
    return GateSequence(soft=soft, hard=hard, mixing=hard)


def tcs_mix(o_a1: Tensor, o_a2: Tensor, gate: Tensor) -> Tensor:
    """Convex per-frame routing: ``(1 - g) * o_a1 + g * o_a2``.

    ``gate`` is [T, 1] and broadcasts across the feature dimension; with hard
    gate values each frame comes from exactly one adapter.
    """
    if o_a1.shape != o_a2.shape or gate.shape[0] != o_a1.shape[0]:
        raise ValueError(
            f"tcs_mix: length mismatch between {o_a1.shape}, {o_a2.shape}, "
            f"gate {gate.shape}"
        )
    keep = 1.0 - gate  # __rsub__: scalar minus tensor
    return add(mul(o_a1, keep), mul(o_a2, gate))


@dataclass
class CSForward:
    """Full code-switched forward: merged-head logits plus intermediates."""

    logits: Tensor           # [T, V1+V2], mask already added
    hidden: Tensor           # pre-head hidden states [T, d_model]
    gate: GateSequence | None


def encode_cs(features: Tensor, params: ParamSet, config: ModelConfig,
              merged: MergedHead, training: bool = False,
              gate_override: int | None = None) -> CSForward:
    """Code-switched encoding through both adapters and the merged head.

    Trains end to end with CTC alone; no auxiliary loss. ``gate_override``
    forces a constant all-0 or all-1 gate (diagnostics: 0 reproduces the
    matrix path, 1 the embedded path).
    """
    if config.mode not in (MODE_PACS, MODE_TCS):
        raise ValueError(f"encode_cs requires mode pacs or tcs, got {config.mode!r}")
    required = "block.0.pacs.down.weight" if config.mode == MODE_PACS else "tcs.out.weight"
    if required not in params:
        raise ValueError(
            f"missing switcher parameters for mode {config.mode!r} "
            f"(no {required!r}); call add_switch_params first"
        )
    h = projector_forward(features, params, config)
    gate: GateSequence | None = None
    if config.mode == MODE_TCS:
        if gate_override is None:
            gate = tcs_gate(h, params, config, training)
        else:
            const = np.full((h.shape[0], 1), float(gate_override))
            t = Tensor(const)
            gate = GateSequence(soft=t, hard=t, mixing=t)
    for i in range(config.n_blocks):
        h = transformer_block_forward(h, params, f"block.{i}", config)
        if config.mode == MODE_PACS:
            h = pacs_forward(h, params, i, config)
        else:
            o_a1 = adapter_forward(h, params, f"block.{i}.adapter.lang0", config)
            o_a2 = adapter_forward(h, params, f"block.{i}.adapter.lang1", config)
            h = tcs_mix(o_a1, o_a2, gate.mixing)
    logits = add(linear(h, params, "head.merged"), merged.mask)
    return CSForward(logits=logits, hidden=h, gate=gate)


# ---------------------------------------------------------------------------
# gate dump: one line per utterance -- id then T space-separated {0,1} values
# ---------------------------------------------------------------------------

def write_gate_dump(path: str, gates: list[tuple[str, list[int]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, values in gates:
            fh.write(utt_id + " " + " ".join(str(int(v)) for v in values) + "\n")


def read_gate_dump(path: str) -> list[tuple[str, list[int]]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            out.append((parts[0], [int(v) for v in parts[1:]]))
    return out
