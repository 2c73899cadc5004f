"""Deterministic synthetic bilingual corpus with ground-truth switch points.

Language A is a char-token language: 20 symbols from a non-Latin code range,
each symbol one transcript character and one CTC token. Language B is a
word-token language: a small lexicon of short Latin-letter words; its CTC
tokens are the letters plus an explicit space separator between consecutive
words. Every token emits a few frames drawn as its prototype vector plus
Gaussian noise, so single frames already carry both token and language
identity (prototypes separate the two languages along feature 0).

Code-switched utterances follow a two-state Markov chain over token units
(one unit = one A symbol or one B word), always starting in the matrix
language A and resampled until at least one embedded unit is present.
All randomness flows from one `SplitMix64` stream in generation order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from csasr.rng import SplitMix64

__all__ = [
    "LanguageSpec",
    "CorpusConfig",
    "Utterance",
    "Corpus",
    "CorpusFormatError",
    "default_token_tables",
    "generate_corpus",
    "write_corpus",
    "read_corpus",
    "transcript_to_ids",
    "merged_transcript_to_ids",
    "expected_embedded_frame_fraction",
    "SPLIT_NAMES",
]

BLANK_TOKEN = "<blank>"
LATIN_LETTERS = "abcdefghijklmnopqrstuvwxyz"
DIGITS = "0123456789"
PUNCT = ".,!?'"
# language A symbols come from the CJK range, one codepoint per symbol
_A_BASE = 0x4E00

SPLIT_NAMES = (
    "mono_a_train", "mono_a_val", "mono_a_test",
    "mono_b_train", "mono_b_val", "mono_b_test",
    "cs_train", "cs_val", "cs_test",
)


class CorpusFormatError(Exception):
    """Raised when an on-disk corpus is inconsistent or truncated."""


@dataclass
class LanguageSpec:
    """Token inventory and acoustic prototypes for one synthetic language."""

    name: str
    kind: str  # "char" | "word"
    tokens: list[str]  # CTC-emittable symbols (letters + " " for the word language)
    words: list[str] | None  # lexicon for the word language, None for char
    prototypes: dict[str, np.ndarray]
    k_min: int
    k_max: int
    sigma: float


@dataclass
class CorpusConfig:
    seed: int = 42
    cs_train: int = 400
    cs_val: int = 50
    cs_test: int = 100
    mono_train: int = 300
    mono_val: int = 50
    mono_test: int = 100
    min_tokens: int = 8            # utterance length budget, in CTC tokens
    max_tokens: int = 14
    p_matrix_to_embedded: float = 0.15
    p_embedded_to_matrix: float = 0.40
    d_feature: int = 32
    k_min: int = 2                 # frames emitted per token
    k_max: int = 4
    sigma: float = 0.3
    lang_a_symbols: int = 20
    lang_b_words: int = 15
    word_len_min: int = 2
    word_len_max: int = 4

    def validate(self) -> None:
        if self.lang_a_symbols < 2 or self.lang_b_words < 1:
            raise ValueError("degenerate config: alphabets too small")
        if self.k_min > self.k_max or self.k_min < 1:
            raise ValueError(f"degenerate config: frame range [{self.k_min}, {self.k_max}]")
        if self.min_tokens > self.max_tokens or self.min_tokens < 2:
            raise ValueError(
                f"degenerate config: token range [{self.min_tokens}, {self.max_tokens}]"
            )
        if not (0.0 < self.p_matrix_to_embedded < 1.0
                and 0.0 < self.p_embedded_to_matrix <= 1.0):
            raise ValueError("degenerate config: switch probabilities out of range")
        if self.sigma <= 0 or self.d_feature < 2:
            raise ValueError("degenerate config: feature model")


@dataclass
class Utterance:
    """One synthetic utterance with frame features and full ground truth."""

    id: str
    features: np.ndarray           # [T, d_feature] float64
    transcript: str
    frame_lang: list[int]          # 0 = matrix (A), 1 = embedded (B), length T
    spans: list[tuple[int, int, str]]  # (start_token, end_token, "a"|"b"), end exclusive

    def __eq__(self, other) -> bool:
        return (isinstance(other, Utterance)
                and self.id == other.id
                and np.array_equal(self.features, other.features)
                and self.transcript == other.transcript
                and self.frame_lang == other.frame_lang
                and self.spans == other.spans)


@dataclass
class Corpus:
    config: CorpusConfig
    lang_a: LanguageSpec
    lang_b: LanguageSpec
    splits: dict[str, list[Utterance]]

    def token_tables(self) -> tuple[list[str], list[str]]:
        return default_token_tables(self.lang_a, self.lang_b)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return False
        if asdict(self.config) != asdict(other.config):
            return False
        for mine, theirs in ((self.lang_a, other.lang_a), (self.lang_b, other.lang_b)):
            if (mine.name, mine.kind, mine.tokens, mine.words) != (
                    theirs.name, theirs.kind, theirs.tokens, theirs.words):
                return False
            if set(mine.prototypes) != set(theirs.prototypes):
                return False
            for tok, vec in mine.prototypes.items():
                if not np.array_equal(vec, theirs.prototypes[tok]):
                    return False
        return self.splits == other.splits


def default_token_tables(lang_a: LanguageSpec, lang_b: LanguageSpec) -> tuple[list[str], list[str]]:
    """Vocab tables for the two output heads; index 0 is the CTC blank.

    The matrix-language table also carries Latin letters, digits, and a few
    punctuation marks (never produced by the generator); these are the
    entries a merged-head mask must silence.
    """
    table_a = [BLANK_TOKEN] + list(lang_a.tokens) + list(LATIN_LETTERS) + list(DIGITS) + list(PUNCT)
    table_b = [BLANK_TOKEN] + list(LATIN_LETTERS) + [" "]
    return table_a, table_b


def transcript_to_ids(text: str, token_table: list[str],
                      drop_unknown: bool = False) -> list[int]:
    """Character-level encoding of a transcript into head token ids.

    With ``drop_unknown`` characters missing from the table are skipped (a
    single-language head scoring cross-language text); otherwise they raise.
    """
    index = {tok: i for i, tok in enumerate(token_table) if tok != BLANK_TOKEN}
    ids = []
    for ch in text:
        if ch in index:
            ids.append(index[ch])
        elif not drop_unknown:
            raise ValueError(f"character {ch!r} not present in token table")
    return ids


def merged_transcript_to_ids(text: str, merged_table: list[str],
                             masked: np.ndarray) -> list[int]:
    """Encode against a merged table, always picking the unmasked entry."""
    index: dict[str, int] = {}
    for i, tok in enumerate(merged_table):
        if tok == BLANK_TOKEN or masked[i]:
            continue
        # first unmasked occurrence wins; duplicates beyond it stay masked
        index.setdefault(tok, i)
    ids = []
    for ch in text:
        if ch not in index:
            raise ValueError(f"character {ch!r} has no unmasked merged-table entry")
        ids.append(index[ch])
    return ids


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _build_languages(cfg: CorpusConfig, rng: SplitMix64) -> tuple[LanguageSpec, LanguageSpec]:
    a_symbols = [chr(_A_BASE + i) for i in range(cfg.lang_a_symbols)]

    words: list[str] = []
    seen = set()
    while len(words) < cfg.lang_b_words:
        length = cfg.word_len_min + rng.randint(cfg.word_len_max - cfg.word_len_min + 1)
        word = "".join(LATIN_LETTERS[rng.randint(26)] for _ in range(length))
        if word not in seen:
            seen.add(word)
            words.append(word)

    b_letters = sorted(set("".join(words)))
    b_tokens = b_letters + [" "]

    def prototype(lang_offset: float) -> np.ndarray:
        vec = np.empty(cfg.d_feature)
        vec[0] = lang_offset
        vec[1:] = rng.normals(cfg.d_feature - 1)
        return vec

    protos_a = {sym: prototype(+1.5) for sym in a_symbols}
    protos_b = {tok: prototype(-1.5) for tok in b_tokens}

    # the task must be learnable but not trivial: prototypes at least 4 sigma apart
    all_vecs = list(protos_a.values()) + list(protos_b.values())
    for i in range(len(all_vecs)):
        for j in range(i + 1, len(all_vecs)):
            dist = float(np.linalg.norm(all_vecs[i] - all_vecs[j]))
            if dist <= 4.0 * cfg.sigma:
                raise ValueError(
                    f"prototype separation {dist:.3f} <= 4 sigma; "
                    "raise d_feature or lower sigma"
                )

    lang_a = LanguageSpec("a", "char", a_symbols, None, protos_a,
                          cfg.k_min, cfg.k_max, cfg.sigma)
    lang_b = LanguageSpec("b", "word", b_tokens, words, protos_b,
                          cfg.k_min, cfg.k_max, cfg.sigma)
    return lang_a, lang_b


def _tokens_for_utterance(condition: str, budget: int, cfg: CorpusConfig,
                          lang_a: LanguageSpec, lang_b: LanguageSpec,
                          rng: SplitMix64) -> list[tuple[str, int]]:
    """(token, lang) sequence of at least ``budget`` tokens for one condition.

    Units are one matrix symbol or one embedded word (plus a space separator
    between consecutive embedded words); units are appended until the token
    budget is met, so a trailing word may overshoot by a few tokens. Switching
    follows the two-state chain over units, starting in the matrix language.
    """
    tokens: list[tuple[str, int]] = []
    prev: int | None = None
    lang = 0 if condition != "mono_b" else 1
    while len(tokens) < budget:
        if condition == "cs" and prev is not None:
            if prev == 0:
                lang = 1 if rng.uniform() < cfg.p_matrix_to_embedded else 0
            else:
                lang = 0 if rng.uniform() < cfg.p_embedded_to_matrix else 1
        if lang == 0:
            tokens.append((rng.choice(lang_a.tokens), 0))
        else:
            if prev == 1:
                tokens.append((" ", 1))
            for letter in rng.choice(lang_b.words):
                tokens.append((letter, 1))
        prev = lang
    return tokens


def _emit_utterance(utt_id: str, tokens: list[tuple[str, int]],
                    lang_a: LanguageSpec, lang_b: LanguageSpec,
                    cfg: CorpusConfig, rng: SplitMix64) -> Utterance:
    protos: list[np.ndarray] = []
    frame_lang: list[int] = []
    for token, lang in tokens:
        proto = (lang_a if lang == 0 else lang_b).prototypes[token]
        k = cfg.k_min + rng.randint(cfg.k_max - cfg.k_min + 1)
        protos.extend([proto] * k)
        frame_lang.extend([lang] * k)
    noise = rng.normals(len(protos) * cfg.d_feature).reshape(len(protos), cfg.d_feature)
    frames = np.vstack(protos) + cfg.sigma * noise
    spans: list[tuple[int, int, str]] = []
    start = 0
    for i in range(1, len(tokens) + 1):
        if i == len(tokens) or tokens[i][1] != tokens[start][1]:
            spans.append((start, i, "a" if tokens[start][1] == 0 else "b"))
            start = i
    transcript = "".join(tok for tok, _ in tokens)
    return Utterance(utt_id, frames, transcript, frame_lang, spans)


def _gen_split(name: str, count: int, condition: str, cfg: CorpusConfig,
               lang_a: LanguageSpec, lang_b: LanguageSpec, rng: SplitMix64) -> list[Utterance]:
    utts = []
    for i in range(count):
        n_units = cfg.min_tokens + rng.randint(cfg.max_tokens - cfg.min_tokens + 1)
        if condition == "mono_a":
            unit_langs = [0] * n_units
        elif condition == "mono_b":
            unit_langs = [1] * n_units
        else:
            unit_langs = _unit_langs_cs(cfg, rng, n_units)
            while 1 not in unit_langs:  # every CS utterance has an embedded span
                unit_langs = _unit_langs_cs(cfg, rng, n_units)
        tokens = _render_units(unit_langs, lang_a, lang_b, rng)
        utts.append(_emit_utterance(f"{name}-{i:04d}", tokens, lang_a, lang_b, cfg, rng))
    return utts


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministically generate all nine splits from ``cfg.seed``."""
    cfg.validate()
    rng = SplitMix64(cfg.seed)
    lang_a, lang_b = _build_languages(cfg, rng)
    splits: dict[str, list[Utterance]] = {}
    plan = [
        ("mono_a_train", cfg.mono_train, "mono_a"),
        ("mono_a_val", cfg.mono_val, "mono_a"),
        ("mono_a_test", cfg.mono_test, "mono_a"),
        ("mono_b_train", cfg.mono_train, "mono_b"),
        ("mono_b_val", cfg.mono_val, "mono_b"),
        ("mono_b_test", cfg.mono_test, "mono_b"),
        ("cs_train", cfg.cs_train, "cs"),
        ("cs_val", cfg.cs_val, "cs"),
        ("cs_test", cfg.cs_test, "cs"),
    ]
    for name, count, condition in plan:
        splits[name] = _gen_split(name, count, condition, cfg, lang_a, lang_b, rng)
    return Corpus(cfg, lang_a, lang_b, splits)


def expected_embedded_frame_fraction(cfg: CorpusConfig, lang_b: LanguageSpec) -> float:
    """Stationary embedded-frame fraction of the switching chain.

    The chain's stationary unit-level embedded probability is
    p_me / (p_me + p_em); converting units to frames weights each language by
    its mean frames per unit (an A unit is one token; a B unit is a word's
    letters plus, in expectation, roughly one separator).
    """
    pi_e = cfg.p_matrix_to_embedded / (cfg.p_matrix_to_embedded + cfg.p_embedded_to_matrix)
    k_mean = (cfg.k_min + cfg.k_max) / 2.0
    mean_word_len = sum(len(w) for w in lang_b.words) / len(lang_b.words)
    # a consecutive B unit carries one separator token with prob p(prev == B)
    p_prev_embedded = 1.0 - cfg.p_embedded_to_matrix
    frames_a = k_mean
    frames_b = (mean_word_len + p_prev_embedded) * k_mean
    num = pi_e * frames_b
    return num / (num + (1.0 - pi_e) * frames_a)


# ---------------------------------------------------------------------------
# on-disk format: manifest.txt + per-split .bin (little-endian f64) and .tsv
# ---------------------------------------------------------------------------

_MANIFEST_NAME = "manifest.txt"


def _lang_to_json(lang: LanguageSpec) -> str:
    return json.dumps({
        "name": lang.name,
        "kind": lang.kind,
        "tokens": lang.tokens,
        "words": lang.words,
        "prototypes": {tok: vec.tolist() for tok, vec in lang.prototypes.items()},
        "k_min": lang.k_min,
        "k_max": lang.k_max,
        "sigma": lang.sigma,
    }, ensure_ascii=True, sort_keys=True)


def _lang_from_json(blob: str) -> LanguageSpec:
    raw = json.loads(blob)
    return LanguageSpec(
        raw["name"], raw["kind"], raw["tokens"], raw["words"],
        {tok: np.asarray(vec, dtype=np.float64) for tok, vec in raw["prototypes"].items()},
        raw["k_min"], raw["k_max"], raw["sigma"],
    )


def write_corpus(corpus: Corpus, path: str) -> None:
    """Write manifest + per-split feature blobs and transcript tables."""
    os.makedirs(path, exist_ok=True)
    lines = ["format = csasr-corpus-v1"]
    for key, value in sorted(asdict(corpus.config).items()):
        lines.append(f"config.{key} = {value!r}")
    lines.append(f"lang.a = {_lang_to_json(corpus.lang_a)}")
    lines.append(f"lang.b = {_lang_to_json(corpus.lang_b)}")
    d = corpus.config.d_feature
    for split in SPLIT_NAMES:
        utts = corpus.splits[split]
        offset = 0
        blob_parts = []
        tsv_lines = []
        for utt in utts:
            t = utt.features.shape[0]
            lines.append(f"utt {split} {utt.id} {t} {offset}")
            blob_parts.append(utt.features.astype("<f8").tobytes())
            offset += t * d * 8
            spans = ";".join(f"{s}:{e}:{lang}" for s, e, lang in utt.spans)
            frame_lang = "".join(str(v) for v in utt.frame_lang)
            tsv_lines.append(f"{utt.id}\t{utt.transcript}\t{frame_lang}\t{spans}")
        with open(os.path.join(path, f"{split}.bin"), "wb") as fh:
            fh.write(b"".join(blob_parts))
        with open(os.path.join(path, f"{split}.tsv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(tsv_lines) + ("\n" if tsv_lines else ""))
    with open(os.path.join(path, _MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_config_value(raw: str):
    try:
        import ast
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError) as exc:
        raise CorpusFormatError(f"bad config value in manifest: {raw!r}") from exc


def read_corpus(path: str) -> Corpus:
    manifest = os.path.join(path, _MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise CorpusFormatError(f"missing corpus manifest: {manifest}")
    config_kwargs: dict = {}
    langs: dict[str, LanguageSpec] = {}
    index: dict[str, list[tuple[str, int, int]]] = {split: [] for split in SPLIT_NAMES}
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("format ="):
                continue
            if line.startswith("config."):
                key, _, raw = line.partition(" = ")
                config_kwargs[key[len("config."):]] = _parse_config_value(raw)
            elif line.startswith("lang."):
                key, _, raw = line.partition(" = ")
                langs[key[len("lang."):]] = _lang_from_json(raw)
            elif line.startswith("utt "):
                _, split, utt_id, t, offset = line.split(" ")
                if split not in index:
                    raise CorpusFormatError(f"unknown split in manifest: {split}")
                index[split].append((utt_id, int(t), int(offset)))
            else:
                raise CorpusFormatError(f"unrecognized manifest line: {line!r}")
    if "a" not in langs or "b" not in langs:
        raise CorpusFormatError("manifest is missing a language definition")
    cfg = CorpusConfig(**config_kwargs)
    d = cfg.d_feature
    splits: dict[str, list[Utterance]] = {}
    for split in SPLIT_NAMES:
        bin_path = os.path.join(path, f"{split}.bin")
        tsv_path = os.path.join(path, f"{split}.tsv")
        for p in (bin_path, tsv_path):
            if not os.path.exists(p):
                raise CorpusFormatError(f"missing corpus file: {p}")
        with open(bin_path, "rb") as fh:
            blob = fh.read()
        expected = sum(t * d * 8 for _, t, _ in index[split])
        if len(blob) != expected:
            raise CorpusFormatError(
                f"{bin_path}: blob is {len(blob)} bytes, manifest expects {expected}"
            )
        text_rows: dict[str, tuple[str, str, str]] = {}
        with open(tsv_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                utt_id, transcript, frame_lang, spans = line.split("\t")
                text_rows[utt_id] = (transcript, frame_lang, spans)
        utts = []
        for utt_id, t, offset in index[split]:
            if utt_id not in text_rows:
                raise CorpusFormatError(f"{tsv_path}: missing row for {utt_id}")
            transcript, frame_lang_str, spans_str = text_rows[utt_id]
            feats = np.frombuffer(blob, dtype="<f8", count=t * d,
                                  offset=offset).reshape(t, d).copy()
            frame_lang = [int(c) for c in frame_lang_str]
            if len(frame_lang) != t:
                raise CorpusFormatError(
                    f"{tsv_path}: frame_lang length {len(frame_lang)} != T {t} for {utt_id}"
                )
            spans = []
            if spans_str:
                for part in spans_str.split(";"):
                    s, e, lang = part.split(":")
                    spans.append((int(s), int(e), lang))
            utts.append(Utterance(utt_id, feats, transcript, frame_lang, spans))
        splits[split] = utts
    return Corpus(cfg, langs["a"], langs["b"], splits)
