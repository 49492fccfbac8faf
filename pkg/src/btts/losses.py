"""Contrastive redundancy-reduction loss, reconstruction loss, and their sum.

The contrastive term drives the cross-correlation matrix of two embedding
batches toward the identity: a diagonal term (1 - C_ii)^2 plus a
delta-weighted off-diagonal term C_ij^2. Features are batch-normalized per
column and C is scaled by 1/N so identical normalized inputs give C = I.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import torch


class LossError(ValueError):
    """Raised for invalid loss inputs."""


@dataclass(frozen=True)
class BTConfig:
    delta: float = 1e-4
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise LossError("delta must be non-negative")
        if self.eps <= 0:
            raise LossError("eps must be positive")


BT_LEVELS = ("sentence", "paragraph", "both")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-2
    bt_level: str = "sentence"

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise LossError("lambda must be non-negative")
        if self.bt_level not in BT_LEVELS:
            raise LossError(f"bt_level must be one of {BT_LEVELS}")


def _as_float_matrix(z) -> torch.Tensor:
    t = torch.as_tensor(z)
    if not t.is_floating_point():
        t = t.float()
    if t.dim() != 2:
        raise LossError(f"expected an N x D matrix, got shape {tuple(t.shape)}")
    return t


def normalize_features(z, eps: float = 1e-8) -> torch.Tensor:
    """Center each column and divide by its population std (variance
    floored at eps, so constant columns map to zero)."""
    t = _as_float_matrix(z)
    if t.shape[0] < 2:
        raise LossError("feature normalization needs at least 2 rows")
    mean = t.mean(dim=0)
    var = t.var(dim=0, unbiased=False)
    return (t - mean) / torch.sqrt(torch.clamp(var, min=eps))


def cross_correlation(z_a, z_b) -> torch.Tensor:
    """Batch-averaged cross-correlation C = (1/N) Z_A^T Z_B of two
    already-normalized N x D batches."""
    a = _as_float_matrix(z_a)
    b = _as_float_matrix(z_b)
    if a.shape != b.shape:
        raise LossError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a.transpose(0, 1) @ b / a.shape[0]


def bt_from_correlation(c, delta: float) -> torch.Tensor:
    """sum_i (1 - C_ii)^2 + delta * sum_{i != j} C_ij^2."""
    t = _as_float_matrix(c)
    if t.shape[0] != t.shape[1]:
        raise LossError("correlation matrix must be square")
    diag = torch.diagonal(t)
    on = ((1.0 - diag) ** 2).sum()
    off = (t ** 2).sum() - (diag ** 2).sum()
    return on + delta * off


def barlow_twins(z_a, z_b, cfg: BTConfig) -> torch.Tensor:
    """Redundancy-reduction loss between two raw N x D embedding batches."""
    a = _as_float_matrix(z_a)
    b = _as_float_matrix(z_b)
    if a.shape != b.shape:
        raise LossError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    c = cross_correlation(normalize_features(a, cfg.eps), normalize_features(b, cfg.eps))
    return bt_from_correlation(c, cfg.delta)


def paragraph_bt(styles: list[tuple[str, torch.Tensor]], cfg: BTConfig) -> torch.Tensor:
    """Same-document pairwise loss, averaged over documents.

    For every document with >= 2 embeddings in the batch, each unordered
    pair contributes both orderings as rows of the two batch matrices (so a
    two-member document yields the legal N=2 arrangement [e1,e2] / [e2,e1]);
    the loss is computed per document and averaged. Documents with fewer
    than 2 members contribute nothing.
    """
    groups: dict[str, list[torch.Tensor]] = {}
    for doc_id, emb in styles:
        groups.setdefault(doc_id, []).append(torch.as_tensor(emb))
    values = []
    for members in groups.values():
        if len(members) < 2:
            continue
        left, right = [], []
        for i, j in combinations(range(len(members)), 2):
            left.extend([members[i], members[j]])
            right.extend([members[j], members[i]])
        values.append(barlow_twins(torch.stack(left), torch.stack(right), cfg))
    if not values:
        raise LossError("no document contributes at least 2 embeddings")
    return torch.stack(values).mean()


def cross_entropy(logits, target_ids, pad_id: int | None = 0) -> torch.Tensor:
    """Mean negative log-likelihood over non-PAD target positions.

    logits: (len, V); target_ids: (len,). Positions whose target equals
    pad_id are excluded from the mean; pad_id=None disables masking.
    """
    t = torch.as_tensor(logits)
    if not t.is_floating_point():
        t = t.float()
    if t.dim() != 2:
        raise LossError("logits must be a (len, V) matrix")
    targets = torch.as_tensor(target_ids, dtype=torch.long)
    if targets.dim() != 1 or targets.shape[0] != t.shape[0]:
        raise LossError("targets must align with logits rows")
    if targets.numel() and (targets.min() < 0 or targets.max() >= t.shape[1]):
        raise LossError("target id out of range")
    if pad_id is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    else:
        mask = targets != pad_id
    if not bool(mask.any()):
        raise LossError("all target positions are PAD")
    logprobs = torch.log_softmax(t, dim=-1)
    picked = logprobs.gather(1, targets.unsqueeze(1)).squeeze(1)
    return -(picked[mask]).mean()


def total_loss(ce, bt_sentence, bt_paragraph, cfg: LossConfig):
    """ce + lambda * bt_active, with bt_active selected by bt_level."""
    if cfg.bt_level == "sentence":
        bt_active = bt_sentence
    elif cfg.bt_level == "paragraph":
        bt_active = bt_paragraph
    else:
        bt_active = (bt_sentence + bt_paragraph) / 2
    return ce + cfg.lam * bt_active
