"""Error-rate scoring: exact Levenshtein alignment, CER/WER/MER, gate quality.

Scoring normalizes text first (lowercase, collapse runs of whitespace, strip
ends; punctuation is left alone). The mixed rate treats every character the
classifier marks as a "char-token" as its own token and whitespace-separated
runs of the remaining characters as word tokens, so a transcript mixing a
char-token language with a word-token language is scored per natural unit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

__all__ = [
    "EditCounts",
    "TokenizationRule",
    "CHAR",
    "WORD",
    "MIXED",
    "normalize_text",
    "tokenize",
    "edit_distance",
    "error_rate",
    "cer",
    "wer",
    "mer",
    "gate_quality",
    "format_report_line",
    "format_summary_line",
]

_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text.lower()).strip()


def _default_char_token(ch: str) -> bool:
    # non-ASCII symbols count as char-tokens, mirroring scripts whose single
    # characters act as words; ASCII (Latin letters, digits, punctuation)
    # groups into whitespace-delimited word tokens
    return ord(ch) > 0x7F


@dataclass(frozen=True)
class TokenizationRule:
    """How a transcript becomes the token list an error rate is computed over."""

    mode: str  # "char" | "word" | "mixed"
    char_token: Callable[[str], bool] = field(default=_default_char_token)

    def __post_init__(self):
        if self.mode not in ("char", "word", "mixed"):
            raise ValueError(f"unknown tokenization mode {self.mode!r}")


CHAR = TokenizationRule("char")
WORD = TokenizationRule("word")
MIXED = TokenizationRule("mixed")


def tokenize(text: str, rule: TokenizationRule) -> list[str]:
    text = normalize_text(text)
    if rule.mode == "char":
        return list(text)
    if rule.mode == "word":
        return text.split()
    tokens: list[str] = []
    word: list[str] = []
    for ch in text:
        if ch.isspace():
            if word:
                tokens.append("".join(word))
                word = []
        elif rule.char_token(ch):
            if word:
                tokens.append("".join(word))
                word = []
            tokens.append(ch)
        else:
            word.append(ch)
    if word:
        tokens.append("".join(word))
    return tokens


@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    deletions: int
    insertions: int


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Minimal edit distance with an S/D/I split.

    Ties in the backtrace prefer substitution over insertion over deletion;
    this affects only the split, never the distance itself. Deletion means a
    reference token missing from the hypothesis; insertion means an extra
    hypothesis token.
    """
    n, m = len(ref), len(hyp)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = i
    for j in range(1, m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        row, prev = dp[i], dp[i - 1]
        ri = ref[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ri == hyp[j - 1] else 1
            row[j] = min(prev[j - 1] + cost, row[j - 1] + 1, prev[j] + 1)
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i][j] == dp[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif j > 0 and dp[i][j] == dp[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return EditCounts(dp[n][m], subs, dels, ins)


def error_rate(ref: str, hyp: str, rule: TokenizationRule) -> float:
    """Edit distance over reference token count; may exceed 1.0."""
    ref_tokens = tokenize(ref, rule)
    if not ref_tokens:
        raise ValueError("error_rate: reference is empty after tokenization")
    hyp_tokens = tokenize(hyp, rule)
    return edit_distance(ref_tokens, hyp_tokens).distance / len(ref_tokens)


def cer(ref: str, hyp: str) -> float:
    return error_rate(ref, hyp, CHAR)


def wer(ref: str, hyp: str) -> float:
    return error_rate(ref, hyp, WORD)


def mer(ref: str, hyp: str, rule: TokenizationRule = MIXED) -> float:
    return error_rate(ref, hyp, rule)


def gate_quality(pred: Sequence[int], truth: Sequence[int]) -> tuple[float, float, float]:
    """Frame accuracy plus precision/recall for the embedded class (label 1).

    Precision/recall are 0.0 when their denominator is empty.
    """
    if len(pred) != len(truth):
        raise ValueError(
            f"gate_quality: length mismatch ({len(pred)} vs {len(truth)})"
        )
    if not pred:
        raise ValueError("gate_quality: empty sequences")
    tp = fp = fn = correct = 0
    for p, t in zip(pred, truth):
        if p == t:
            correct += 1
        if p == 1 and t == 1:
            tp += 1
        elif p == 1 and t == 0:
            fp += 1
        elif p == 0 and t == 1:
            fn += 1
    accuracy = correct / len(pred)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return accuracy, precision, recall


# ---------------------------------------------------------------------------
# report formatting — one line per utterance plus a summary, fixed columns
# ---------------------------------------------------------------------------

def format_report_line(utt_id: str, values: dict[str, float], columns: list[str]) -> str:
    cells = [utt_id]
    for col in columns:
        cells.append(f"{values[col]:.6f}")
    return "\t".join(cells)


def format_summary_line(values: dict[str, float], columns: list[str], count: int) -> str:
    cells = ["SUMMARY", str(count)]
    for col in columns:
        cells.append(f"{values[col]:.6f}")
    return "\t".join(cells)
