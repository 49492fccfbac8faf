"""Corpus loading, vocabulary, context/target pairing, corruption, synthesis.

Text is tokenized by whitespace splitting only; there are no subword units.
All randomized operations take an explicit seed and are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid corpus arguments."""


@dataclass(frozen=True)
class Sentence:
    doc_id: str
    sent_id: int
    text: str
    style: str | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise CorpusError(f"empty sentence text (doc {self.doc_id!r}, sent {self.sent_id})")
        if self.sent_id < 0:
            raise CorpusError(f"negative sent_id {self.sent_id} in doc {self.doc_id!r}")


@dataclass(frozen=True)
class ContextTargetPair:
    context: Sentence
    target: Sentence

    def __post_init__(self) -> None:
        if self.context.doc_id != self.target.doc_id:
            raise CorpusError("context and target must share a document")
        if self.context.sent_id != self.target.sent_id - 1:
            raise CorpusError("context must directly precede the target")


class Vocab:
    """Whitespace-token vocabulary with reserved ids 0..3 for PAD/BOS/EOS/UNK.

    Optional control tokens (used for corruption-rate conditioning) sit right
    after the specials; regular tokens follow. ``num_reserved`` marks where
    regular tokens begin.
    """

    def __init__(self, tokens: list[str], num_control: int = 0):
        self.id_to_token: list[str] = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("duplicate tokens in vocabulary")
        self.num_reserved = len(SPECIAL_TOKENS) + num_control
        if len(self.id_to_token) < 5:
            raise CorpusError("vocabulary needs at least one non-special token")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def to_dict(self) -> dict:
        return {
            "tokens": self.id_to_token[len(SPECIAL_TOKENS):],
            "num_control": self.num_reserved - len(SPECIAL_TOKENS),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(list(d["tokens"]), num_control=int(d.get("num_control", 0)))


@dataclass(frozen=True)
class CorruptionConfig:
    drop_rate_range: tuple[float, float] = (0.2, 0.5)
    replace_rate_range: tuple[float, float] = (0.1, 0.3)
    emit_rate_tokens: bool = False

    def __post_init__(self) -> None:
        for name, (lo, hi) in (("drop_rate_range", self.drop_rate_range),
                               ("replace_rate_range", self.replace_rate_range)):
            if not (0.0 <= lo <= hi <= 1.0):
                raise CorpusError(f"{name} must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})")


# Vocabulary entries for corruption-rate conditioning: ten buckets of width
# 0.1 per noise kind, prepended to the decoder input when enabled.
RATE_CONTROL_TOKENS = tuple(f"<drop{b}>" for b in range(10)) + tuple(f"<rep{b}>" for b in range(10))


def rate_bucket_token(kind: str, rate: float) -> str:
    bucket = min(int(rate * 10), 9)
    return f"<{kind}{bucket}>"


def load_corpus(path: str | Path, format: str = "jsonl") -> list[Sentence]:
    """Load sentences from a jsonl or plain-text corpus file.

    jsonl: one object per line with fields doc_id (str), sent_id (int),
    text (str) and optional style. plain: one sentence per line, a blank
    line starts a new document; doc/sent ids are assigned positionally.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    raw = path.read_text(encoding="utf-8")
    if format == "jsonl":
        sentences = _parse_jsonl(raw)
    elif format == "plain":
        sentences = _parse_plain(raw)
    else:
        raise CorpusError(f"unknown corpus format {format!r}")
    if not sentences:
        raise CorpusError(f"corpus file is empty: {path}")
    return sentences


def _parse_jsonl(raw: str) -> list[Sentence]:
    sentences: list[Sentence] = []
    seen: set[tuple[str, int]] = set()
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise CorpusError(f"line {lineno}: expected a JSON object")
        for key, typ in (("doc_id", str), ("sent_id", int), ("text", str)):
            if key not in obj:
                raise CorpusError(f"line {lineno}: missing field {key!r}")
            if not isinstance(obj[key], typ) or isinstance(obj[key], bool):
                raise CorpusError(f"line {lineno}: field {key!r} must be {typ.__name__}")
        style = obj.get("style")
        if style is not None and not isinstance(style, str):
            raise CorpusError(f"line {lineno}: field 'style' must be a string")
        key = (obj["doc_id"], obj["sent_id"])
        if key in seen:
            raise CorpusError(f"line {lineno}: duplicate sent_id {key[1]} in doc {key[0]!r}")
        seen.add(key)
        try:
            sentences.append(Sentence(obj["doc_id"], obj["sent_id"], obj["text"], style))
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from exc
    return sentences


def _parse_plain(raw: str) -> list[Sentence]:
    sentences: list[Sentence] = []
    doc_idx = 0
    sent_idx = 0
    started = False
    for line in raw.splitlines():
        if not line.strip():
            if started:
                doc_idx += 1
                sent_idx = 0
                started = False
            continue
        sentences.append(Sentence(str(doc_idx), sent_idx, line.strip()))
        sent_idx += 1
        started = True
    return sentences


def save_corpus(path: str | Path, sentences: list[Sentence]) -> None:
    """Write sentences in the jsonl corpus format."""
    lines = []
    for s in sentences:
        obj: dict = {"doc_id": s.doc_id, "sent_id": s.sent_id, "text": s.text}
        if s.style is not None:
            obj["style"] = s.style
        lines.append(json.dumps(obj, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_vocab(sentences: list[Sentence], min_freq: int = 1,
                control_tokens: tuple[str, ...] = ()) -> Vocab:
    """Build a vocabulary of whitespace tokens with frequency >= min_freq.

    Tokens are assigned ids in descending frequency, ties broken
    lexicographically. Everything else encodes to UNK.
    """
    if not sentences:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    if min_freq < 1:
        raise CorpusError("min_freq must be a positive integer")
    freqs: dict[str, int] = {}
    for s in sentences:
        for tok in s.text.split():
            freqs[tok] = freqs.get(tok, 0) + 1
    kept = sorted((t for t, f in freqs.items() if f >= min_freq),
                  key=lambda t: (-freqs[t], t))
    return Vocab(list(control_tokens) + kept, num_control=len(control_tokens))


def encode(vocab: Vocab, text: str) -> list[int]:
    """Map whitespace tokens to ids; out-of-vocabulary tokens become UNK."""
    return [vocab.token_to_id.get(tok, UNK_ID) for tok in text.split()]


def decode(vocab: Vocab, ids: list[int]) -> str:
    """Inverse of encode for in-vocabulary ids; unknown ids are an error."""
    out = []
    for i in ids:
        if not (0 <= int(i) < vocab.size):
            raise CorpusError(f"token id {i} outside vocabulary of size {vocab.size}")
        out.append(vocab.id_to_token[int(i)])
    return " ".join(out)


def pair_context_target(sentences: list[Sentence]) -> list[ContextTargetPair]:
    """Pair each sentence with its direct predecessor inside the same document."""
    by_key = {(s.doc_id, s.sent_id): s for s in sentences}
    pairs = []
    for s in sentences:
        if s.sent_id >= 1:
            ctx = by_key.get((s.doc_id, s.sent_id - 1))
            if ctx is not None:
                pairs.append(ContextTargetPair(ctx, s))
    return pairs


def corrupt(ids: list[int], cfg: CorruptionConfig, vocab: Vocab,
            rng_seed: int) -> tuple[list[int], float, float]:
    """Apply seeded drop + random-replace noise to a token-id sequence.

    RNG protocol (a single ``np.random.default_rng(rng_seed)`` stream, drawn
    in this exact order):

    1. drop_rate    = rng.uniform(*drop_rate_range)
    2. replace_rate = rng.uniform(*replace_rate_range)
    3. drop_draws   = rng.random(len(ids)); token i dropped iff draw < drop_rate
    4. if everything was dropped: keep position rng.integers(len(ids))
    5. replace_draws = rng.random(n_survivors); survivor j replaced iff
       draw < replace_rate
    6. replacement ids = rng.integers(vocab.num_reserved, vocab.size,
       size=n_replaced), consumed in survivor order

    At least one token always survives. Returns the corrupted ids together
    with the sampled (drop_rate, replace_rate).
    """
    if not ids:
        raise CorpusError("cannot corrupt an empty sequence")
    rng = np.random.default_rng(rng_seed)
    drop_rate = float(rng.uniform(*cfg.drop_rate_range))
    replace_rate = float(rng.uniform(*cfg.replace_rate_range))

    drop_draws = rng.random(len(ids))
    survivors = [tok for tok, d in zip(ids, drop_draws) if d >= drop_rate]
    if not survivors:
        survivors = [ids[int(rng.integers(len(ids)))]]

    replace_draws = rng.random(len(survivors))
    flagged = replace_draws < replace_rate
    n_replaced = int(flagged.sum())
    if n_replaced:
        repl = rng.integers(vocab.num_reserved, vocab.size, size=n_replaced)
        it = iter(int(r) for r in repl)
        survivors = [next(it) if f else tok for tok, f in zip(survivors, flagged)]
    return survivors, drop_rate, replace_rate


@dataclass(frozen=True)
class StyleSpec:
    label: str
    markers: tuple[str, ...]
    templates: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.markers:
            raise CorpusError(f"style {self.label!r} has no marker tokens")
        for t in self.templates:
            if "{marker}" not in t:
                raise CorpusError(f"style {self.label!r}: template {t!r} has no {{marker}} slot")


# Shared content words used to fill {content} slots in every style.
DEFAULT_CONTENT_WORDS = (
    "river", "stone", "lamp", "garden", "cloud", "window", "bread", "forest",
    "music", "paper", "candle", "mountain", "door", "ocean", "meadow", "lantern",
    "valley", "harbor", "engine", "market", "copper", "violin", "orchard", "bridge",
)

DEFAULT_TEMPLATES = (
    "the {content} looks {marker} near the {content}",
    "{marker} light falls on the {content} again",
    "we saw a {marker} {content} by the {content}",
    "her {content} seemed {marker} all day",
    "a {content} and a {content} feel {marker} tonight",
    "{marker} winds cross the {content} slowly",
    "that {content} turned {marker} before dusk",
    "every {content} grows {marker} in time",
)

_DEFAULT_MARKERS = {
    "alpha": ("zork", "blick", "frop", "quil", "snib", "drax", "plish", "vond"),
    "beta": ("klam", "trew", "yipp", "gorm", "fexx", "nuvi", "brop", "stil"),
}

SYNTH_DOC_LEN = 8
SYNTH_TOPIC_SIZE = 5


def default_style_specs() -> list[StyleSpec]:
    """Two built-in styles with disjoint nonce-word markers."""
    return [StyleSpec(label, markers, DEFAULT_TEMPLATES)
            for label, markers in _DEFAULT_MARKERS.items()]


def load_style_specs(path: str | Path) -> list[StyleSpec]:
    """Read style specs from JSON: {"styles": [{label, markers, templates}]}."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    styles = obj.get("styles")
    if not isinstance(styles, list) or not styles:
        raise CorpusError("style spec file must contain a non-empty 'styles' list")
    specs = []
    for entry in styles:
        templates = tuple(entry.get("templates") or DEFAULT_TEMPLATES)
        specs.append(StyleSpec(entry["label"], tuple(entry["markers"]), templates))
    return specs


def synth_corpus(style_specs: list[StyleSpec], n_per_style: int, seed: int) -> list[Sentence]:
    """Generate a labeled synthetic corpus with disjoint per-style markers.

    Documents hold SYNTH_DOC_LEN consecutive sentences of one style, so
    context/target pairs never mix styles. Each document is internally
    coherent: one marker from its style's lexicon recurs in every sentence
    (a verbal tic) and {content} slots draw from a per-document topic of
    SYNTH_TOPIC_SIZE shared content words. Every sentence carries at least
    one marker from its own style and none from any other.
    """
    if len(style_specs) < 2:
        raise CorpusError("need at least two styles")
    seen: dict[str, str] = {}
    for spec in style_specs:
        for m in spec.markers:
            if m in seen:
                raise CorpusError(f"marker {m!r} appears in styles {seen[m]!r} and {spec.label!r}")
            seen[m] = spec.label
    if n_per_style < 1:
        raise CorpusError("n_per_style must be positive")

    rng = np.random.default_rng(seed)
    sentences: list[Sentence] = []
    for spec in style_specs:
        marker = ""
        topic: list[str] = []
        for i in range(n_per_style):
            if i % SYNTH_DOC_LEN == 0:
                marker = spec.markers[int(rng.integers(len(spec.markers)))]
                picks = rng.choice(len(DEFAULT_CONTENT_WORDS), size=SYNTH_TOPIC_SIZE,
                                   replace=False)
                topic = [DEFAULT_CONTENT_WORDS[j] for j in picks]
            doc_id = f"{spec.label}-{i // SYNTH_DOC_LEN}"
            template = spec.templates[int(rng.integers(len(spec.templates)))]
            text = _fill_template(template, marker, topic, rng)
            sentences.append(Sentence(doc_id, i % SYNTH_DOC_LEN, text, spec.label))
    return sentences


def _fill_template(template: str, marker: str, topic: list[str],
                   rng: np.random.Generator) -> str:
    parts = []
    for chunk in template.replace("{marker}", "\x00marker\x00").replace(
            "{content}", "\x00content\x00").split("\x00"):
        if chunk == "marker":
            parts.append(marker)
        elif chunk == "content":
            parts.append(topic[int(rng.integers(len(topic)))])
        else:
            parts.append(chunk)
    return "".join(parts)
