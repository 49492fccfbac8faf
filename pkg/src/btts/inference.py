"""Few-shot targeted restyling via arithmetic in the latent style space.

The transfer direction is the difference between the mean style vectors of
two exemplar sets: restyled = base + beta * (target - source). The input is
never corrupted at inference time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import Vocab, decode, encode
from .model import DecodeConfig, StyleTransferModel, condition


class InferenceError(ValueError):
    """Raised for invalid inference inputs."""


@dataclass(frozen=True)
class ExemplarSet:
    label: str
    sentences: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.sentences:
            raise InferenceError(f"exemplar set {self.label!r} is empty")
        if any(not s.strip() for s in self.sentences):
            raise InferenceError(f"exemplar set {self.label!r} contains a blank sentence")


@dataclass(frozen=True)
class TransferConfig:
    beta: float = 4.0  # working range is roughly 1..20
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self) -> None:
        if not np.isfinite(self.beta):
            raise InferenceError("beta must be finite")


@dataclass(frozen=True)
class TransferResult:
    input_text: str
    output_text: str
    beta: float
    a_i: torch.Tensor
    a_diff: torch.Tensor

    def to_json(self) -> str:
        return json.dumps({
            "input": self.input_text,
            "output": self.output_text,
            "beta": self.beta,
            "a_i": [float(x) for x in self.a_i],
            "a_diff": [float(x) for x in self.a_diff],
        }, ensure_ascii=False)


def load_exemplars(path: str | Path, label: str | None = None) -> ExemplarSet:
    """Read an exemplar file: plain text, one sentence per line."""
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise InferenceError(f"exemplar file {path} has no sentences")
    return ExemplarSet(label or path.stem, tuple(lines))


def mean_style(model: StyleTransferModel, vocab: Vocab, ex: ExemplarSet) -> torch.Tensor:
    """Elementwise mean of the per-sentence style vectors of an exemplar set."""
    vectors = [model.extract_style(encode(vocab, s)) for s in ex.sentences]
    return torch.stack(vectors).mean(dim=0)


def targeted_restyle_vector(a_i: torch.Tensor, a_src: torch.Tensor,
                            a_tgt: torch.Tensor, beta: float) -> torch.Tensor:
    """a_i + beta * (a_tgt - a_src), elementwise."""
    a_i = torch.as_tensor(a_i)
    a_src = torch.as_tensor(a_src)
    a_tgt = torch.as_tensor(a_tgt)
    if not (a_i.shape == a_src.shape == a_tgt.shape):
        raise InferenceError(
            f"style vector lengths differ: {a_i.shape}, {a_src.shape}, {a_tgt.shape}")
    return a_i + beta * (a_tgt - a_src)


def transfer_with_vectors(model: StyleTransferModel, vocab: Vocab, input_text: str,
                          a_src: torch.Tensor, a_tgt: torch.Tensor,
                          cfg: TransferConfig) -> TransferResult:
    """Core transfer path given precomputed source/target style attributes."""
    ids = encode(vocab, input_text)
    if not ids:
        raise InferenceError("input text tokenizes to nothing")
    a_i = model.extract_style(ids)
    a_diff = targeted_restyle_vector(a_i, a_src, a_tgt, cfg.beta)
    memory = condition(model.encode_seq(ids), a_diff)
    out_ids = model.generate(memory, cfg.decode)
    return TransferResult(input_text, decode(vocab, out_ids), cfg.beta, a_i, a_diff)


def transfer(model: StyleTransferModel, vocab: Vocab, input_text: str,
             src: ExemplarSet, tgt: ExemplarSet, cfg: TransferConfig) -> TransferResult:
    """Restyle one sentence from the source exemplars' style toward the
    target exemplars' style."""
    a_src = mean_style(model, vocab, src)
    a_tgt = mean_style(model, vocab, tgt)
    return transfer_with_vectors(model, vocab, input_text, a_src, a_tgt, cfg)


@dataclass(frozen=True)
class ShotRow:
    size: int
    accuracy: float
    content: float
    g: float


SHOTS_HEADER = "size,accuracy,content,g"


def shots_to_csv(rows: list[ShotRow]) -> str:
    lines = [SHOTS_HEADER]
    for r in rows:
        lines.append(f"{r.size},{r.accuracy:.4f},{r.content:.4f},{r.g:.4f}")
    return "\n".join(lines) + "\n"


def shot_size_sweep(model: StyleTransferModel, vocab: Vocab, eval_texts: list[str],
                    src_pool: list[str], tgt_pool: list[str], sizes: list[int],
                    seed: int, cfg: TransferConfig, target_label: str,
                    classifier, bleu_fn
                    ) -> tuple[list[ShotRow], dict[int, list[TransferResult]]]:
    """Re-run transfer over the eval set at each exemplar count.

    For each size k, k exemplars per side are sampled without replacement
    with a seed derived from (seed, k). k=0 uses zero vectors for both style
    attributes, which collapses the restyle vector to the input's own style.
    Returns the score table plus the per-size transfer results.
    """
    if not eval_texts:
        raise InferenceError("empty evaluation set")
    rows: list[ShotRow] = []
    details: dict[int, list[TransferResult]] = {}
    width = model.cfg.style_dim
    for k in sizes:
        if k < 0 or k > len(src_pool) or k > len(tgt_pool):
            raise InferenceError(
                f"shot size {k} exceeds pool sizes ({len(src_pool)}, {len(tgt_pool)})")
        if k == 0:
            a_src = torch.zeros(width)
            a_tgt = torch.zeros(width)
        else:
            rng = np.random.default_rng([seed, k])
            src_pick = [src_pool[i] for i in rng.choice(len(src_pool), size=k, replace=False)]
            tgt_pick = [tgt_pool[i] for i in rng.choice(len(tgt_pool), size=k, replace=False)]
            a_src = mean_style(model, vocab, ExemplarSet("src", tuple(src_pick)))
            a_tgt = mean_style(model, vocab, ExemplarSet("tgt", tuple(tgt_pick)))
        results = [transfer_with_vectors(model, vocab, text, a_src, a_tgt, cfg)
                   for text in eval_texts]
        details[k] = results
        correct = sum(1 for r in results if classifier(r.output_text) == target_label)
        accuracy = 100.0 * correct / len(results)
        content = bleu_fn([r.output_text for r in results], eval_texts)
        rows.append(ShotRow(k, accuracy, content, float(np.sqrt(accuracy * content))))
    return rows, details
