"""Automatic evaluation: transfer accuracy, BLEU content preservation,
G-score aggregation, offline classifiers, and style-embedding export.

The BLEU here is a fixed, self-contained corpus BLEU-4: punctuation
characters are isolated as their own tokens, text is split on whitespace
(no lowercasing), clipped n-gram precisions for n=1..4 are floored at 1e-16
before the log, and the brevity penalty is exp(1 - r/c) when c < r. Content
preservation scores the output against the *input* sentence, so no parallel
references are needed.
"""

from __future__ import annotations

import json
import math
import string
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import Sentence, StyleSpec, Vocab, encode
from .model import StyleTransferModel

_PUNCT = set(string.punctuation)
_BLEU_FLOOR = 1e-16


class EvalError(ValueError):
    """Raised for invalid evaluation inputs."""


@dataclass(frozen=True)
class EvalExample:
    input_text: str
    output_text: str
    target_style: str
    reference: str | None = None


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    bleu: float
    g: float
    n: int
    per_example: list[tuple[str, bool]]

    def to_json(self) -> str:
        return json.dumps({
            "accuracy": self.accuracy,
            "bleu": self.bleu,
            "g": self.g,
            "n": self.n,
            "per_example": [{"predicted": p, "correct": c} for p, c in self.per_example],
        }, ensure_ascii=False, indent=2)


def bleu_tokenize(text: str) -> list[str]:
    """Whitespace split after isolating every punctuation character."""
    out = []
    for ch in text:
        out.append(f" {ch} " if ch in _PUNCT else ch)
    return "".join(out).split()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: list[str], references: list[str]) -> float:
    """Corpus-level BLEU-4 on a 0..100 scale (see module docstring)."""
    if len(hypotheses) != len(references):
        raise EvalError(f"got {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise EvalError("empty corpus")
    hyp_toks = [bleu_tokenize(h) for h in hypotheses]
    ref_toks = [bleu_tokenize(r) for r in references]
    log_sum = 0.0
    for n in range(1, 5):
        matched = 0
        total = 0
        for h, r in zip(hyp_toks, ref_toks):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            matched += sum(min(cnt, rc[g]) for g, cnt in hc.items())
            total += max(len(h) - n + 1, 0)
        precision = matched / total if total > 0 else 0.0
        log_sum += math.log(max(precision, _BLEU_FLOOR)) / 4.0
    c = sum(len(h) for h in hyp_toks)
    r = sum(len(r) for r in ref_toks)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c) if c > 0 else 0.0
    return 100.0 * bp * math.exp(log_sum)


def accuracy(examples: list[EvalExample], classifier) -> float:
    """Percent of outputs the classifier assigns to their target style.

    Unparseable classifier results (anything that is not a known label,
    including "unknown") simply count as incorrect.
    """
    if not examples:
        raise EvalError("need at least one example")
    correct = sum(1 for ex in examples if classifier(ex.output_text) == ex.target_style)
    return 100.0 * correct / len(examples)


def g_score(accuracy_pct: float, bleu_pct: float) -> float:
    """Geometric mean of accuracy and content preservation."""
    if not (0.0 <= accuracy_pct <= 100.0 and 0.0 <= bleu_pct <= 100.0):
        raise EvalError("g_score inputs must lie in [0, 100]")
    return math.sqrt(accuracy_pct * bleu_pct)


def build_report(examples: list[EvalExample], classifier) -> EvalReport:
    """Score a batch of transfers: judge/classifier accuracy, BLEU of output
    against input, and their geometric mean."""
    if not examples:
        raise EvalError("need at least one example")
    per_example = []
    for ex in examples:
        predicted = classifier(ex.output_text)
        per_example.append((predicted, predicted == ex.target_style))
    acc = 100.0 * sum(c for _, c in per_example) / len(examples)
    content = bleu([ex.output_text for ex in examples],
                   [ex.reference if ex.reference is not None else ex.input_text
                    for ex in examples])
    return EvalReport(acc, content, g_score(acc, content), len(examples), per_example)


def rule_classifier(style_specs: list[StyleSpec]):
    """Closed-world classifier for synthetic corpora: pick the style whose
    marker lexicon overlaps the text's tokens most; ties give "unknown"."""
    lexicons = {spec.label: set(spec.markers) for spec in style_specs}
    seen: set[str] = set()
    for label, markers in lexicons.items():
        if seen & markers:
            raise EvalError("marker lexicons must be disjoint")
        seen |= markers

    def classify(text: str) -> str:
        tokens = text.split()
        counts = {label: sum(1 for t in tokens if t in markers)
                  for label, markers in lexicons.items()}
        best = max(counts.values())
        winners = [label for label, c in counts.items() if c == best]
        if best == 0 or len(winners) != 1:
            return "unknown"
        return winners[0]

    return classify


def probe_classifier(model: StyleTransferModel, vocab: Vocab,
                     labeled: list[Sentence], seed: int = 0):
    """Classifier backed by a logistic-regression probe over style vectors
    of a labeled corpus."""
    if any(s.style is None for s in labeled):
        raise EvalError("probe classifier needs style labels on every sentence")
    embeddings = [(model.extract_style(encode(vocab, s.text)).numpy(), s.style)
                  for s in labeled]
    weights, bias, labels, mu, sd = _fit_probe(embeddings, seed)

    def classify(text: str) -> str:
        v = model.extract_style(encode(vocab, text)).numpy()
        scores = ((v - mu) / sd) @ weights + bias
        return labels[int(np.argmax(scores))]

    return classify


def _fit_probe(embeddings: list[tuple[np.ndarray, str]], seed: int,
               iters: int = 300, lr: float = 0.5):
    labels = sorted({lab for _, lab in embeddings})
    if len(labels) < 2:
        raise EvalError("need at least 2 distinct labels")
    lab_idx = {lab: i for i, lab in enumerate(labels)}
    x = np.stack([np.asarray(v, dtype=np.float64) for v, _ in embeddings])
    y = np.array([lab_idx[lab] for _, lab in embeddings])
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-8] = 1.0
    xs = (x - mu) / sd
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=0.01, size=(xs.shape[1], len(labels)))
    b = np.zeros(len(labels))
    onehot = np.eye(len(labels))[y]
    for _ in range(iters):
        logits = xs @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = (p - onehot) / xs.shape[0]
        w -= lr * (xs.T @ grad)
        b -= lr * grad.sum(axis=0)
    return w, b, labels, mu, sd


def linear_probe(embeddings: list[tuple[np.ndarray, str]], train_frac: float = 0.8,
                 seed: int = 0) -> float:
    """Held-out accuracy (percent) of a multinomial logistic regression
    trained by gradient descent on a seeded split of the embeddings."""
    labels = sorted({lab for _, lab in embeddings})
    if len(labels) < 2:
        raise EvalError("need at least 2 distinct labels")
    counts = Counter(lab for _, lab in embeddings)
    if min(counts.values()) < 4:
        raise EvalError("need at least 4 examples per label")
    if not (0.0 < train_frac < 1.0):
        raise EvalError("train_frac must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(embeddings))
    n_train = int(round(train_frac * len(embeddings)))
    if n_train < 2 or n_train >= len(embeddings):
        raise EvalError("split leaves an empty train or test side")
    train = [embeddings[i] for i in order[:n_train]]
    test = [embeddings[i] for i in order[n_train:]]
    if len({lab for _, lab in train}) < 2:
        raise EvalError("train split lost a label; use more data")
    w, b, fit_labels, mu, sd = _fit_probe(train, seed)
    lab_idx = {lab: i for i, lab in enumerate(fit_labels)}
    correct = 0
    for v, lab in test:
        scores = ((np.asarray(v, dtype=np.float64) - mu) / sd) @ w + b
        # Labels absent from the train split can never be predicted.
        if lab in lab_idx and int(np.argmax(scores)) == lab_idx[lab]:
            correct += 1
    return 100.0 * correct / len(test)


def export_embeddings(model: StyleTransferModel, vocab: Vocab,
                      sentences: list[Sentence]) -> str:
    """CSV of style vectors: id,style,dim_0..dim_{D-1}, 9 significant digits."""
    width = model.cfg.style_dim
    lines = ["id,style," + ",".join(f"dim_{i}" for i in range(width))]
    for s in sentences:
        v = model.extract_style(encode(vocab, s.text))
        values = ",".join(f"{float(x):.9g}" for x in v)
        lines.append(f"{s.doc_id}:{s.sent_id},{s.style or ''},{values}")
    return "\n".join(lines) + "\n"
