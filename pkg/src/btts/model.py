"""Three-tower transformer: encoder, decoder, and style extractor.

The extractor mirrors the encoder and produces a fixed-width style vector by
mean-pooling its outputs; conditioning adds that vector to every encoder
position before cross-attention. The embedding table is shared by all three
towers and (transposed) by the output projection.

All single-sequence entry points run in eval mode and are deterministic;
dropout is only active on the batched training path, driven by an explicit
torch.Generator.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import BOS_ID, EOS_ID, Vocab

CHECKPOINT_MAGIC = b"BTTS"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Raised for invalid model configuration or malformed inputs."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file cannot be read back."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_layers_ext: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 0  # 0 means "not bound to a vocabulary yet"
    max_len: int = 64
    dropout: float = 0.0
    style_dim: int = 0  # 0 means "same as d_model"

    def __post_init__(self) -> None:
        if min(self.d_model, self.n_layers_enc, self.n_layers_dec, self.n_layers_ext,
               self.n_heads, self.d_ff, self.max_len) < 1:
            raise ModelError("all size fields must be positive")
        if self.vocab_size != 0 and self.vocab_size < 5:
            raise ModelError("vocab_size must be at least 5 (4 specials + 1 token)")
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not (0.0 <= self.dropout < 1.0):
            raise ModelError("dropout must lie in [0, 1)")
        if self.style_dim == 0:
            object.__setattr__(self, "style_dim", self.d_model)
        if self.style_dim != self.d_model:
            raise ModelError("style_dim must equal d_model (additive conditioning)")


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"  # greedy | beam
    beam_width: int = 1
    max_new_tokens: int = 32

    def __post_init__(self) -> None:
        if self.mode not in ("greedy", "beam"):
            raise ModelError(f"unknown decode mode {self.mode!r}")
        if self.beam_width < 1 or self.max_new_tokens < 1:
            raise ModelError("beam_width and max_new_tokens must be >= 1")


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    # Generator-driven so training stays reproducible; gen=None means eval.
    if gen is None or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, device=x.device) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)

    def forward(self, q: torch.Tensor, kv: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """q: (B, Lq, d); kv: (B, Lk, d); mask: (B, Lq, Lk) True = attend."""
        b, lq, d = q.shape
        lk = kv.shape[1]
        qh = self.q_proj(q).view(b, lq, self.n_heads, self.d_head).transpose(1, 2)
        kh = self.k_proj(kv).view(b, lk, self.n_heads, self.d_head).transpose(1, 2)
        vh = self.v_proj(kv).view(b, lk, self.n_heads, self.d_head).transpose(1, 2)
        scores = qh @ kh.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, lq, d)
        return self.o_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_ff)
        self.w2 = nn.Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
        return self.w2(_dropout(F.relu(self.w1(x)), p, gen))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block (used by encoder and extractor)."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, d_ff)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None,
                p: float, gen: torch.Generator | None) -> torch.Tensor:
        h = self.ln1(x)
        x = x + _dropout(self.attn(h, h, mask), p, gen)
        x = x + _dropout(self.ff(self.ln2(x), p, gen), p, gen)
        return x


class DecoderLayer(nn.Module):
    """Pre-norm causal self-attention, cross-attention, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, d_ff)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.ln3 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, memory: torch.Tensor,
                self_mask: torch.Tensor, cross_mask: torch.Tensor | None,
                p: float, gen: torch.Generator | None) -> torch.Tensor:
        h = self.ln1(x)
        x = x + _dropout(self.self_attn(h, h, self_mask), p, gen)
        x = x + _dropout(self.cross_attn(self.ln2(x), memory, cross_mask), p, gen)
        x = x + _dropout(self.ff(self.ln3(x), p, gen), p, gen)
        return x


class StyleTransferModel(nn.Module):
    """Encoder/decoder/extractor with a shared, output-tied embedding table."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.vocab_size < 5:
            raise ModelError("model needs a config bound to a vocabulary (vocab_size >= 5)")
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Parameter(torch.empty(cfg.vocab_size, d))
        self.encoder = nn.ModuleList(
            EncoderLayer(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers_enc))
        self.extractor = nn.ModuleList(
            EncoderLayer(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers_ext))
        self.decoder = nn.ModuleList(
            DecoderLayer(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers_dec))
        self.enc_norm = nn.LayerNorm(d)
        self.ext_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.register_buffer("pos", _sinusoidal_positions(cfg.max_len, d), persistent=False)

    # ------------------------------------------------------------------ #
    # batched forward paths (training)                                    #
    # ------------------------------------------------------------------ #

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        x = F.embedding(ids, self.embed) * math.sqrt(self.cfg.d_model)
        return x + self.pos[: ids.shape[1]].to(x.dtype)

    def encode_batch(self, ids: torch.Tensor, pad_mask: torch.Tensor,
                     gen: torch.Generator | None = None) -> torch.Tensor:
        """ids: (B, L) padded; pad_mask: (B, L) True on real tokens."""
        self._check_len(ids.shape[1])
        x = _dropout(self._embed(ids), self.cfg.dropout, gen)
        attn_mask = pad_mask.unsqueeze(1).expand(-1, ids.shape[1], -1)
        for layer in self.encoder:
            x = layer(x, attn_mask, self.cfg.dropout, gen)
        return self.enc_norm(x)

    def extract_batch(self, ids: torch.Tensor, pad_mask: torch.Tensor,
                      gen: torch.Generator | None = None) -> torch.Tensor:
        """Mean-pooled extractor outputs over real positions: (B, D)."""
        rows = self.extract_rows_batch(ids, pad_mask, gen)
        counts = pad_mask.sum(dim=1, keepdim=True).to(rows.dtype)
        return (rows * pad_mask.unsqueeze(-1).to(rows.dtype)).sum(dim=1) / counts

    def extract_rows_batch(self, ids: torch.Tensor, pad_mask: torch.Tensor,
                           gen: torch.Generator | None = None) -> torch.Tensor:
        """Pre-pooling extractor states, (B, L, D)."""
        self._check_len(ids.shape[1])
        x = _dropout(self._embed(ids), self.cfg.dropout, gen)
        attn_mask = pad_mask.unsqueeze(1).expand(-1, ids.shape[1], -1)
        for layer in self.extractor:
            x = layer(x, attn_mask, self.cfg.dropout, gen)
        return self.ext_norm(x)

    def decode_batch(self, dec_ids: torch.Tensor, memory: torch.Tensor,
                     memory_mask: torch.Tensor | None,
                     gen: torch.Generator | None = None) -> torch.Tensor:
        """Teacher-forced decoder logits. dec_ids: (B, L) starting with BOS."""
        b, l = dec_ids.shape
        self._check_len(l)
        if (dec_ids[:, 0] != BOS_ID).any():
            raise ModelError("decoder input must begin with BOS")
        x = _dropout(self._embed(dec_ids), self.cfg.dropout, gen)
        causal = torch.tril(torch.ones(l, l, dtype=torch.bool, device=x.device))
        self_mask = causal.unsqueeze(0).expand(b, -1, -1)
        cross = None
        if memory_mask is not None:
            cross = memory_mask.unsqueeze(1).expand(-1, l, -1)
        for layer in self.decoder:
            x = layer(x, memory, self_mask, cross, self.cfg.dropout, gen)
        x = self.dec_norm(x)
        return x @ self.embed.transpose(0, 1)

    # ------------------------------------------------------------------ #
    # single-sequence API (always eval mode)                              #
    # ------------------------------------------------------------------ #

    def encode_seq(self, ids: Sequence[int]) -> torch.Tensor:
        """Encoder output for one sequence, (len, d_model)."""
        t = self._as_ids(ids)
        with torch.no_grad():
            return self.encode_batch(t, torch.ones_like(t, dtype=torch.bool))[0]

    def extract_style(self, ids: Sequence[int]) -> torch.Tensor:
        """Fixed-width style vector: mean of the extractor rows, (D,)."""
        t = self._as_ids(ids)
        with torch.no_grad():
            return self.extract_batch(t, torch.ones_like(t, dtype=torch.bool))[0]

    def extract_style_rows(self, ids: Sequence[int]) -> torch.Tensor:
        """Pre-pooling extractor states for one sequence, (len, D)."""
        t = self._as_ids(ids)
        with torch.no_grad():
            return self.extract_rows_batch(t, torch.ones_like(t, dtype=torch.bool))[0]

    def decode_logits(self, memory: torch.Tensor, dec_input_ids: Sequence[int]) -> torch.Tensor:
        """Logits (len_dec, V) for one decoder input over one memory (len_enc, d)."""
        if memory.dim() != 2 or memory.shape[1] != self.cfg.d_model:
            raise ModelError("memory must be a (len, d_model) matrix")
        t = self._as_ids(dec_input_ids)
        with torch.no_grad():
            return self.decode_batch(t, memory.unsqueeze(0), None)[0]

    def generate(self, memory: torch.Tensor, decode_cfg: DecodeConfig) -> list[int]:
        """Decode content token ids from a (possibly conditioned) memory."""

        def logits_fn(prefix: list[int]) -> torch.Tensor:
            return self.decode_logits(memory, [BOS_ID] + prefix)[-1]

        if decode_cfg.mode == "greedy":
            return greedy_decode(logits_fn, decode_cfg.max_new_tokens)
        return beam_decode(logits_fn, decode_cfg.max_new_tokens, decode_cfg.beam_width)

    def _as_ids(self, ids: Sequence[int]) -> torch.Tensor:
        ids = list(ids)
        if not ids:
            raise ModelError("empty token sequence")
        self._check_len(len(ids))
        if any(not (0 <= i < self.cfg.vocab_size) for i in ids):
            raise ModelError("token id outside vocabulary")
        return torch.tensor([ids], dtype=torch.long)

    def _check_len(self, length: int) -> None:
        if length > self.cfg.max_len:
            raise ModelError(f"sequence length {length} exceeds max_len {self.cfg.max_len}")


def condition(memory: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    """Add a style vector to every memory position (broadcast over rows)."""
    if memory.shape[-1] != style.shape[-1]:
        raise ModelError(
            f"style width {style.shape[-1]} does not match memory width {memory.shape[-1]}")
    return memory + style


def _sinusoidal_positions(max_len: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32)
                    * (-math.log(10000.0) / d_model))
    pe = torch.zeros(max_len, d_model)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: d_model // 2])
    return pe


def init_model(cfg: ModelConfig, seed: int) -> StyleTransferModel:
    """Build a model with N(0, 1/d_model) weights, deterministic per seed.

    Parameters are drawn in named-parameter order from one generator, so the
    same (cfg, seed) always yields identical weights.
    """
    model = StyleTransferModel(cfg)
    gen = torch.Generator().manual_seed(seed)
    std = 1.0 / math.sqrt(cfg.d_model)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() >= 2:
                p.copy_(torch.randn(p.shape, generator=gen) * std)
            elif name.endswith(".weight"):  # LayerNorm scales
                p.fill_(1.0)
            else:
                p.zero_()
    return model


# ---------------------------------------------------------------------- #
# decoding                                                                #
# ---------------------------------------------------------------------- #


def _argmax_lowest(logits: torch.Tensor) -> int:
    v = logits.detach()
    return int((v == v.max()).nonzero()[0])


def greedy_decode(logits_fn: Callable[[list[int]], torch.Tensor],
                  max_new_tokens: int) -> list[int]:
    """Argmax decoding, ties to the lowest token id; stops at EOS."""
    out: list[int] = []
    for _ in range(max_new_tokens):
        nxt = _argmax_lowest(logits_fn(out))
        if nxt == EOS_ID:
            break
        out.append(nxt)
    return out


def beam_decode(logits_fn: Callable[[list[int]], torch.Tensor],
                max_new_tokens: int, beam_width: int) -> list[int]:
    """Length-normalized beam search with token-id tie-breaking.

    A hypothesis's score is the sum of log-probabilities of every emitted
    token (EOS included when emitted) divided by the emission count. Ties
    resolve to the lexicographically smallest token sequence.
    """
    # (emitted ids incl. trailing EOS if finished, sum logprob, finished)
    beams: list[tuple[tuple[int, ...], float, bool]] = [((), 0.0, False)]
    for _ in range(max_new_tokens):
        if all(b[2] for b in beams):
            break
        pool: list[tuple[tuple[int, ...], float, bool]] = []
        for seq, score, done in beams:
            if done:
                pool.append((seq, score, done))
                continue
            logprobs = F.log_softmax(logits_fn(list(seq)).detach().double(), dim=-1)
            for tok in range(logprobs.shape[0]):
                pool.append((seq + (tok,), score + float(logprobs[tok]), tok == EOS_ID))
        pool.sort(key=lambda b: (-(b[1] / len(b[0])), b[0]))
        beams = pool[:beam_width]
    best = min(beams, key=lambda b: (-(b[1] / max(len(b[0]), 1)), b[0]))
    seq = list(best[0])
    if seq and seq[-1] == EOS_ID:
        seq.pop()
    return seq


# ---------------------------------------------------------------------- #
# checkpoint container                                                    #
# ---------------------------------------------------------------------- #


def save_checkpoint(path: str | Path, model: StyleTransferModel, vocab: Vocab,
                    rng_state: dict | None = None) -> None:
    """Write a self-describing binary checkpoint.

    Layout: magic, u32 version, u64 header length, JSON header (config,
    vocab, rng_state, named tensor shapes), then raw little-endian float32
    tensor data in header order.
    """
    names = [n for n, _ in model.named_parameters()]
    tensors = dict(model.named_parameters())
    header = {
        "config": asdict(model.cfg),
        "vocab": vocab.to_dict(),
        "rng_state": rng_state or {},
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(header_bytes)))
    buf.write(header_bytes)
    for n in names:
        arr = tensors[n].detach().to(torch.float32).numpy()
        buf.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    data = buf.getvalue()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[StyleTransferModel, Vocab, dict]:
    """Read a checkpoint back; rejects wrong magic or version."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} not supported "
            f"(expected {CHECKPOINT_VERSION})")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    vocab = Vocab.from_dict(header["vocab"])
    model = StyleTransferModel(cfg)
    offset = 16 + hlen
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']}")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    model.load_state_dict(state)
    return model, vocab, header.get("rng_state", {})
