"""Desk-scale adapter-based bilingual ASR with frame-level code switching.

The package implements, from scratch on numpy:

* a reverse-mode autodiff engine (`csasr.autograd`),
* a toy transformer encoder with per-language bottleneck adapters and
  language-specific output heads (`csasr.backbone`),
* two code-switching mechanisms: post-adapter mixer blocks and a
  frame-level transformer gate routing between the two language adapters
  (`csasr.switching`),
* CTC loss with an enumeration oracle and greedy decoding (`csasr.ctc`),
* character / word / mixed error rates and gate scoring (`csasr.metrics`),
* a deterministic synthetic bilingual corpus with ground-truth per-frame
  language labels (`csasr.synthdata`),
* Adam with warmup + polynomial decay and the two-phase training protocol
  (`csasr.training`),
* a command-line pipeline driver (`csasr.cli`).
"""

from csasr.autograd import ParamSet, Tensor, grad_check
from csasr.backbone import ModelConfig

__all__ = ["Tensor", "ParamSet", "ModelConfig", "grad_check"]

__version__ = "0.1.0"
