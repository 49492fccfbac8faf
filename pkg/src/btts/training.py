"""Reconstruction + contrastive training loop, gradient checking, sweeps.

One training step: corrupt the target, encode it, add the style vector
extracted from the (uncorrupted) context sentence to every encoder position,
teacher-force the decoder over the uncorrupted target, and take one Adam
step on CE + lambda * BT. Everything is derived from explicit seeds and is
bit-reproducible for a fixed (seed, config, corpus).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .corpus import (BOS_ID, EOS_ID, PAD_ID, ContextTargetPair, CorruptionConfig,
                     Vocab, corrupt, encode, rate_bucket_token)
from .losses import BTConfig, LossConfig, LossError, barlow_twins, cross_entropy, paragraph_bt, total_loss
from .model import DecodeConfig, ModelConfig, StyleTransferModel, condition, init_model, save_checkpoint


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (bad batch, non-finite loss)."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    bt: BTConfig = field(default_factory=BTConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    checkpoint_every: int = 1000

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise TrainingError("lr must be positive")
        if self.batch_size < 2:
            raise TrainingError("batch_size must be >= 2 (feature normalization)")
        if self.steps < 0:
            raise TrainingError("steps must be non-negative")
        if self.checkpoint_every < 1:
            raise TrainingError("checkpoint_every must be positive")


@dataclass(frozen=True)
class TrainMetrics:
    step: int
    ce: float
    bt_sentence: float
    bt_paragraph: float
    total: float
    grad_norm: float


METRICS_HEADER = "step,ce,bt_sentence,bt_paragraph,total,grad_norm"


def metrics_to_csv(rows: list[TrainMetrics]) -> str:
    lines = [METRICS_HEADER]
    for m in rows:
        lines.append(f"{m.step},{m.ce:.6f},{m.bt_sentence:.6f},"
                     f"{m.bt_paragraph:.6f},{m.total:.6f},{m.grad_norm:.6f}")
    return "\n".join(lines) + "\n"


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _pad_batch(seqs: list[list[int]], dtype=torch.long) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), PAD_ID, dtype=dtype)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=dtype)
        mask[i, : len(s)] = True
    return ids, mask


@dataclass
class _PreparedBatch:
    corrupted: list[list[int]]
    contexts: list[list[int]]
    targets: list[list[int]]
    dec_inputs: list[list[int]]
    dec_targets: list[list[int]]
    doc_ids: list[str]


def prepare_batch(batch: list[ContextTargetPair], vocab: Vocab,
                  corruption: CorruptionConfig, seed: int, step: int) -> _PreparedBatch:
    """Encode and corrupt one batch; corruption seeds derive from
    (seed, step, example index)."""
    corrupted, contexts, targets, dec_inputs, dec_targets, doc_ids = [], [], [], [], [], []
    for i, pair in enumerate(batch):
        tgt = encode(vocab, pair.target.text)
        ctx = encode(vocab, pair.context.text)
        if not tgt or not ctx:
            raise TrainingError("empty tokenization in training pair")
        noisy, drop_rate, replace_rate = corrupt(tgt, corruption, vocab,
                                                 _derived_seed(seed, step, i))
        prefix: list[int] = []
        ignore: list[int] = []
        if corruption.emit_rate_tokens:
            prefix = [vocab.token_to_id[rate_bucket_token("drop", drop_rate)],
                      vocab.token_to_id[rate_bucket_token("rep", replace_rate)]]
            ignore = [PAD_ID] * len(prefix)
        corrupted.append(noisy)
        contexts.append(ctx)
        targets.append(tgt)
        dec_inputs.append([BOS_ID] + prefix + tgt)
        dec_targets.append(ignore + tgt + [EOS_ID])
        doc_ids.append(pair.target.doc_id)
    return _PreparedBatch(corrupted, contexts, targets, dec_inputs, dec_targets, doc_ids)


def _forward_losses(model: StyleTransferModel, prep: _PreparedBatch,
                    loss_cfg: LossConfig, bt_cfg: BTConfig,
                    gen: torch.Generator | None = None):
    """Full objective over a prepared batch. Returns (total, ce, bt_s, bt_p)."""
    enc_ids, enc_mask = _pad_batch(prep.corrupted)
    ctx_ids, ctx_mask = _pad_batch(prep.contexts)
    tgt_ids, tgt_mask = _pad_batch(prep.targets)
    dec_in, _ = _pad_batch(prep.dec_inputs)
    dec_tgt, _ = _pad_batch(prep.dec_targets)

    memory = model.encode_batch(enc_ids, enc_mask, gen)
    ctx_style = model.extract_batch(ctx_ids, ctx_mask, gen)
    tgt_style = model.extract_batch(tgt_ids, tgt_mask, gen)
    memory = condition(memory, ctx_style.unsqueeze(1))
    logits = model.decode_batch(dec_in, memory, enc_mask, gen)

    ce = cross_entropy(logits.reshape(-1, logits.shape[-1]), dec_tgt.reshape(-1), PAD_ID)
    bt_sent = barlow_twins(ctx_style, tgt_style, bt_cfg)
    try:
        bt_para = paragraph_bt(list(zip(prep.doc_ids, tgt_style)), bt_cfg)
    except LossError:
        # No same-document pair landed in this batch; the paragraph term
        # contributes nothing this step.
        bt_para = torch.zeros((), dtype=ce.dtype)
    total = total_loss(ce, bt_sent, bt_para, loss_cfg)
    return total, ce, bt_sent, bt_para


class Trainer:
    """Owns the model, Adam state, and the step counter."""

    def __init__(self, model: StyleTransferModel, vocab: Vocab, cfg: TrainConfig):
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        self.step_idx = 0
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                    betas=(cfg.adam_beta1, cfg.adam_beta2),
                                    eps=cfg.adam_eps)

    def train_step(self, batch: list[ContextTargetPair]) -> TrainMetrics:
        """One forward/backward/Adam update; deterministic per
        (params, batch, seed, step)."""
        if len(batch) < 2:
            raise TrainingError("training batch must hold at least 2 pairs")
        cfg = self.cfg
        prep = prepare_batch(batch, self.vocab, cfg.corruption, cfg.seed, self.step_idx)
        gen = None
        if self.model.cfg.dropout > 0:
            gen = torch.Generator().manual_seed(_derived_seed(cfg.seed, self.step_idx, 777))
        total, ce, bt_sent, bt_para = _forward_losses(self.model, prep, cfg.loss, cfg.bt, gen)
        if not bool(torch.isfinite(total)):
            raise TrainingError(
                f"non-finite loss at step {self.step_idx}: ce={float(ce)}, "
                f"bt_sentence={float(bt_sent)}, bt_paragraph={float(bt_para)}")
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        sq = 0.0
        for p in self.model.parameters():
            if p.grad is not None:
                sq += float((p.grad.detach() ** 2).sum())
        self.opt.step()
        metrics = TrainMetrics(self.step_idx, float(ce.detach()), float(bt_sent.detach()),
                               float(bt_para.detach()), float(total.detach()), math.sqrt(sq))
        self.step_idx += 1
        return metrics


def train(model: StyleTransferModel, vocab: Vocab, pairs: list[ContextTargetPair],
          cfg: TrainConfig, checkpoint_dir: str | Path | None = None
          ) -> list[TrainMetrics]:
    """Run cfg.steps training steps over seeded epoch shuffles of the pairs.

    Checkpoints (when a directory is given) are written every
    cfg.checkpoint_every steps plus once at the end.
    """
    if cfg.steps == 0:
        return []
    if len(pairs) < cfg.batch_size:
        raise TrainingError(
            f"corpus yields {len(pairs)} pairs; need at least batch_size={cfg.batch_size}")
    trainer = Trainer(model, vocab, cfg)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    metrics: list[TrainMetrics] = []
    while trainer.step_idx < cfg.steps:
        if len(order) < cfg.batch_size:
            order = list(rng.permutation(len(pairs)))
        take, order = order[: cfg.batch_size], order[cfg.batch_size:]
        metrics.append(trainer.train_step([pairs[i] for i in take]))
        done = trainer.step_idx
        if checkpoint_dir is not None and (done % cfg.checkpoint_every == 0
                                           or done == cfg.steps):
            path = Path(checkpoint_dir) / f"step{done:06d}.ckpt"
            save_checkpoint(path, model, vocab, {"seed": cfg.seed, "step": done})
    return metrics


# ---------------------------------------------------------------------- #
# gradient verification                                                   #
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    n_checked: int


TOWER_PREFIXES = ("encoder", "decoder", "extractor")


def make_loss_fn(model: StyleTransferModel, vocab: Vocab,
                 batch: list[ContextTargetPair], loss_cfg: LossConfig,
                 bt_cfg: BTConfig, corruption: CorruptionConfig, seed: int = 0):
    """Freeze one corrupted batch and return a closure computing the full
    training objective from the model's current parameters (eval mode)."""
    prep = prepare_batch(batch, vocab, corruption, seed, step=0)

    def loss_fn() -> torch.Tensor:
        return _forward_losses(model, prep, loss_cfg, bt_cfg, None)[0]

    return loss_fn


def grad_check(loss_fn, named_params: list[tuple[str, torch.Tensor]],
               epsilon: float = 1e-4, n_samples: int = 200,
               seed: int = 0, min_per_group: int = 4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Samples n_samples coordinates across the given parameters (forcing a few
    from each tower prefix when present) and reports the maximum relative
    error |a - f| / max(|a|, |f|, 1e-6). Accumulation should be 64-bit:
    pass a model converted to float64 for meaningful results.
    """
    params = [p for _, p in named_params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [g if g is not None else torch.zeros_like(p)
                for g, p in zip(grads, params)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    chosen = {int(c) for c in rng.choice(total, size=min(n_samples, total), replace=False)}

    offsets = np.cumsum([0] + sizes)
    for prefix in TOWER_PREFIXES:
        group = [k for k, (name, _) in enumerate(named_params) if name.startswith(prefix)]
        if not group:
            continue
        have = sum(1 for c in chosen
                   if any(offsets[k] <= c < offsets[k + 1] for k in group))
        need = min_per_group - have
        while need > 0:
            k = group[int(rng.integers(len(group)))]
            c = int(offsets[k] + rng.integers(sizes[k]))
            if c not in chosen:
                chosen.add(c)
                need -= 1

    max_rel = 0.0
    with torch.no_grad():
        for c in sorted(chosen):
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            idx = c - int(offsets[k])
            flat = params[k].view(-1)
            orig = float(flat[idx])
            flat[idx] = orig + epsilon
            up = float(loss_fn())
            flat[idx] = orig - epsilon
            down = float(loss_fn())
            flat[idx] = orig
            fd = (up - down) / (2 * epsilon)
            a = float(analytic[k].view(-1)[idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            max_rel = max(max_rel, rel)
    return GradCheckReport(max_rel_err=max_rel, n_checked=len(chosen))


# ---------------------------------------------------------------------- #
# hyperparameter sweep                                                    #
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class SweepCell:
    lam: float
    delta: float
    final_ce: float
    final_bt: float
    probe_acc: float


SWEEP_HEADER = "lambda,delta,final_ce,final_bt,probe_acc"


def sweep_to_csv(cells: list[SweepCell]) -> str:
    lines = [SWEEP_HEADER]
    for c in cells:
        lines.append(f"{c.lam:g},{c.delta:g},{c.final_ce:.6f},"
                     f"{c.final_bt:.6f},{c.probe_acc:.4f}")
    return "\n".join(lines) + "\n"


def _final_bt(last: TrainMetrics, level: str) -> float:
    if level == "sentence":
        return last.bt_sentence
    if level == "paragraph":
        return last.bt_paragraph
    return (last.bt_sentence + last.bt_paragraph) / 2


def sweep(sentences, model_cfg: ModelConfig, base_cfg: TrainConfig,
          lambda_grid: list[float], delta_grid: list[float],
          probe_train_frac: float = 0.8, probe_seed: int = 0) -> list[SweepCell]:
    """Train one model per (lambda, delta) cell with a shared seed and probe
    the style space of each. Cell results are independent of grid order."""
    from .corpus import build_vocab, pair_context_target
    from .evaluation import linear_probe

    if not lambda_grid or not delta_grid:
        raise TrainingError("lambda and delta grids must be non-empty")
    if any(s.style is None for s in sentences):
        raise TrainingError("sweep needs style-labeled sentences for the probe")
    vocab = build_vocab(sentences,
                        control_tokens=_control_tokens_for(base_cfg.corruption))
    pairs = pair_context_target(sentences)
    cells = []
    for lam in lambda_grid:
        for delta in delta_grid:
            cfg = replace(base_cfg, loss=replace(base_cfg.loss, lam=lam),
                          bt=replace(base_cfg.bt, delta=delta))
            model = init_model(replace(model_cfg, vocab_size=vocab.size), cfg.seed)
            metrics = train(model, vocab, pairs, cfg)
            embeddings = [(model.extract_style(encode(vocab, s.text)).numpy(), s.style)
                          for s in sentences]
            acc = linear_probe(embeddings, train_frac=probe_train_frac, seed=probe_seed)
            last = metrics[-1]
            cells.append(SweepCell(lam, delta, last.ce,
                                   _final_bt(last, cfg.loss.bt_level), acc))
    return cells


def _control_tokens_for(corruption: CorruptionConfig) -> tuple[str, ...]:
    from .corpus import RATE_CONTROL_TOKENS
    return RATE_CONTROL_TOKENS if corruption.emit_rate_tokens else ()


# ---------------------------------------------------------------------- #
# monitoring                                                              #
# ---------------------------------------------------------------------- #


def reconstruction_bt(model: StyleTransferModel, vocab: Vocab,
                      pairs: list[ContextTargetPair], bt_cfg: BTConfig,
                      corruption: CorruptionConfig, decode_cfg: DecodeConfig,
                      seed: int = 0) -> float:
    """Non-differentiable monitor: BT between context embeddings and the
    embeddings of greedy reconstructions of the corrupted targets.

    Pairs whose reconstruction comes out empty are skipped; at least two
    usable pairs are required.
    """
    ctx_embs, rec_embs = [], []
    for i, pair in enumerate(pairs):
        tgt = encode(vocab, pair.target.text)
        ctx = encode(vocab, pair.context.text)
        noisy, _, _ = corrupt(tgt, corruption, vocab, _derived_seed(seed, 0, i))
        style = model.extract_style(ctx)
        memory = condition(model.encode_seq(noisy), style)
        recon = model.generate(memory, decode_cfg)
        if not recon:
            continue
        ctx_embs.append(style)
        rec_embs.append(model.extract_style(recon))
    if len(ctx_embs) < 2:
        raise TrainingError("need at least 2 non-empty reconstructions")
    return float(barlow_twins(torch.stack(ctx_embs), torch.stack(rec_embs), bt_cfg))
