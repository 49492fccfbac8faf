import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from btts.corpus import BOS_ID, EOS_ID
from btts.model import (CheckpointError, DecodeConfig, ModelConfig, ModelError,
                        StyleTransferModel, beam_decode, condition, greedy_decode,
                        init_model, load_checkpoint, save_checkpoint)


def expected_param_count(cfg: ModelConfig) -> int:
    """Independent shape inventory: shared embedding, per-layer attention
    (4 square projections with bias), feed-forward, and layer norms."""
    d, ff = cfg.d_model, cfg.d_ff
    attn = 4 * (d * d + d)
    ffn = d * ff + ff + ff * d + d
    ln = 2 * d
    enc_layer = attn + ffn + 2 * ln
    dec_layer = 2 * attn + ffn + 3 * ln
    total = cfg.vocab_size * d
    total += cfg.n_layers_enc * enc_layer + ln
    total += cfg.n_layers_ext * enc_layer + ln
    total += cfg.n_layers_dec * dec_layer + ln
    return total


class TestInit:
    def test_deterministic_per_seed(self, small_vocab):
        cfg = ModelConfig(d_model=16, n_heads=2, d_ff=24, vocab_size=small_vocab.size)
        a, b = init_model(cfg, seed=5), init_model(cfg, seed=5)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_different_seeds_differ(self, small_vocab):
        cfg = ModelConfig(d_model=16, n_heads=2, d_ff=24, vocab_size=small_vocab.size)
        a, b = init_model(cfg, seed=5), init_model(cfg, seed=6)
        assert not torch.equal(a.embed, b.embed)

    def test_head_divisibility_enforced(self):
        with pytest.raises(ModelError, match="divisible"):
            ModelConfig(d_model=16, n_heads=3, vocab_size=10)

    def test_param_count_matches_shape_inventory(self):
        cfg = ModelConfig(d_model=16, n_layers_enc=2, n_layers_dec=2, n_layers_ext=2,
                          n_heads=4, d_ff=32, vocab_size=100, max_len=32)
        model = init_model(cfg, seed=0)
        assert sum(p.numel() for p in model.parameters()) == expected_param_count(cfg)

    def test_style_dim_must_match_d_model(self):
        with pytest.raises(ModelError, match="style_dim"):
            ModelConfig(d_model=16, n_heads=2, vocab_size=10, style_dim=8)

    def test_unbound_vocab_rejected_at_build(self):
        with pytest.raises(ModelError, match="vocabulary"):
            StyleTransferModel(ModelConfig())


class TestEncode:
    def test_output_shape(self, small_model):
        h = small_model.encode_seq([4, 5, 6])
        assert h.shape == (3, small_model.cfg.d_model)

    def test_eval_mode_bitwise_deterministic(self, small_model):
        a = small_model.encode_seq([4, 5, 6, 7])
        b = small_model.encode_seq([4, 5, 6, 7])
        assert torch.equal(a, b)

    def test_positions_matter(self, small_model):
        assert not torch.allclose(small_model.encode_seq([4, 5]),
                                  small_model.encode_seq([5, 4]))

    def test_length_limit(self, small_model):
        with pytest.raises(ModelError, match="max_len"):
            small_model.encode_seq([4] * (small_model.cfg.max_len + 1))

    def test_empty_rejected(self, small_model):
        with pytest.raises(ModelError, match="empty"):
            small_model.encode_seq([])

    def test_out_of_vocab_id_rejected(self, small_model):
        with pytest.raises(ModelError, match="outside vocabulary"):
            small_model.encode_seq([small_model.cfg.vocab_size])


class TestExtractStyle:
    def test_width(self, small_model):
        assert small_model.extract_style([4, 5]).shape == (small_model.cfg.style_dim,)

    def test_single_token_pooling_is_identity(self, small_model):
        rows = small_model.extract_style_rows([7])
        assert torch.equal(small_model.extract_style([7]), rows[0])

    def test_mean_pooling_matches_rows(self, small_model):
        ids = [4, 9]
        rows = small_model.extract_style_rows(ids)
        assert torch.allclose(small_model.extract_style(ids), rows.mean(dim=0), atol=1e-6)


class TestCondition:
    def test_zero_vector_identity(self, small_model):
        h = small_model.encode_seq([4, 5, 6])
        assert torch.equal(condition(h, torch.zeros(h.shape[1])), h)

    def test_broadcast_over_rows(self):
        v = torch.arange(4.0)
        out = condition(torch.zeros(3, 4), v)
        assert torch.equal(out, v.expand(3, 4))

    def test_additivity(self, small_model):
        h = small_model.encode_seq([4, 5])
        g = torch.Generator().manual_seed(0)
        s1 = torch.randn(h.shape[1], generator=g)
        s2 = torch.randn(h.shape[1], generator=g)
        assert torch.allclose(condition(condition(h, s1), s2), condition(h, s1 + s2))

    def test_width_mismatch(self):
        with pytest.raises(ModelError, match="width"):
            condition(torch.zeros(2, 4), torch.zeros(3))


class TestDecode:
    def test_logits_shape(self, small_model):
        h = small_model.encode_seq([4, 5, 6])
        logits = small_model.decode_logits(h, [BOS_ID, 4, 5])
        assert logits.shape == (3, small_model.cfg.vocab_size)

    def test_requires_bos(self, small_model):
        h = small_model.encode_seq([4, 5])
        with pytest.raises(ModelError, match="BOS"):
            small_model.decode_logits(h, [4, 5])

    def test_causal_prefix_invariance_at_every_position(self, small_model):
        h = small_model.encode_seq([4, 5, 6, 7])
        base_ids = [BOS_ID, 4, 5, 6, 7]
        base = small_model.decode_logits(h, base_ids)
        for t in range(len(base_ids)):
            edited = list(base_ids)
            for j in range(t + 1, len(edited)):
                edited[j] = 9  # arbitrary different token
            out = small_model.decode_logits(h, edited)
            assert torch.allclose(out[t], base[t], atol=1e-6), f"position {t} leaked"

    def test_cross_attention_is_live(self, small_model):
        h = small_model.encode_seq([4, 5, 6])
        base = small_model.decode_logits(h, [BOS_ID, 4])
        perturbed = h.clone()
        perturbed[1] += 1.0
        assert not torch.allclose(small_model.decode_logits(perturbed, [BOS_ID, 4]), base)

    def test_zero_style_equals_unconditioned_path(self, small_model):
        h = small_model.encode_seq([4, 5, 6])
        conditioned = condition(h, torch.zeros(h.shape[1]))
        a = small_model.decode_logits(h, [BOS_ID, 4])
        b = small_model.decode_logits(conditioned, [BOS_ID, 4])
        assert torch.equal(a, b)


V = 6


def make_table(seed):
    """Synthetic per-prefix logit table, deterministic across runs."""
    def logits_fn(prefix):
        rng = np.random.default_rng([seed] + [p + 1 for p in prefix])
        return torch.tensor(rng.normal(scale=2.0, size=V))
    return logits_fn


def exhaustive_best(logits_fn, max_steps):
    """Enumerate every emission sequence (stop at first EOS or at max_steps),
    score by mean log-probability, tie-break lexicographically."""
    best = None

    def rec(prefix, score):
        nonlocal best
        lp = torch.log_softmax(logits_fn(list(prefix)).double(), dim=-1)
        for tok in range(V):
            seq = prefix + (tok,)
            s = score + float(lp[tok])
            if tok == EOS_ID or len(seq) == max_steps:
                cand = (-(s / len(seq)), seq)
                if best is None or cand < best:
                    best = cand
            else:
                rec(seq, s)

    rec((), 0.0)
    seq = list(best[1])
    if seq and seq[-1] == EOS_ID:
        seq.pop()
    return seq


class TestGenerate:
    def test_forced_eos_gives_empty_sequence(self):
        def eos_first(prefix):
            v = torch.full((V,), -10.0)
            v[EOS_ID] = 10.0
            return v
        assert greedy_decode(eos_first, 8) == []
        assert beam_decode(eos_first, 8, beam_width=3) == []

    def test_greedy_tie_breaks_to_lowest_id(self):
        def tied(prefix):
            v = torch.zeros(V)
            v[4] = 1.0
            v[5] = 1.0
            return v
        out = greedy_decode(tied, 1)
        assert out == [4]

    def test_greedy_equals_beam_width_one(self):
        for seed in range(8):
            fn = make_table(seed)
            assert greedy_decode(fn, 4) == beam_decode(fn, 4, beam_width=1)

    def test_wide_beam_matches_exhaustive_search(self):
        for seed in range(8):
            fn = make_table(seed)
            assert beam_decode(fn, 3, beam_width=500) == exhaustive_best(fn, 3)

    def test_beam3_matches_exhaustive_on_pinned_tables(self):
        for seed in (0, 1, 2, 3, 4, 5, 6, 7):
            fn = make_table(seed)
            assert beam_decode(fn, 3, beam_width=3) == exhaustive_best(fn, 3)

    def test_model_generate_stops_at_eos(self, small_model):
        h = small_model.encode_seq([4, 5, 6])
        out = small_model.generate(h, DecodeConfig(max_new_tokens=10))
        assert len(out) <= 10
        assert EOS_ID not in out

    def test_model_generate_modes_agree_at_width_one(self, small_model):
        h = small_model.encode_seq([4, 5, 6, 7])
        greedy = small_model.generate(h, DecodeConfig(mode="greedy", max_new_tokens=6))
        beam1 = small_model.generate(h, DecodeConfig(mode="beam", beam_width=1,
                                                     max_new_tokens=6))
        assert greedy == beam1

    def test_invalid_decode_config(self):
        with pytest.raises(ModelError):
            DecodeConfig(mode="sampling")
        with pytest.raises(ModelError):
            DecodeConfig(max_new_tokens=0)


@st.composite
def small_model_configs(draw):
    d_model = draw(st.sampled_from([8, 16]))
    n_heads = draw(st.sampled_from([1, 2, 4]))
    return ModelConfig(
        d_model=d_model, n_heads=n_heads,
        n_layers_enc=draw(st.integers(1, 2)),
        n_layers_dec=draw(st.integers(1, 2)),
        n_layers_ext=draw(st.integers(1, 2)),
        d_ff=draw(st.sampled_from([8, 24])),
        vocab_size=draw(st.integers(6, 40)),
        max_len=16,
    )


class TestShapeAndFinitenessProperties:
    @given(cfg=small_model_configs(), seed=st.integers(0, 50),
           length=st.integers(1, 12))
    @settings(max_examples=25, deadline=None)
    def test_contracts_hold_for_random_configs(self, cfg, seed, length):
        model = init_model(cfg, seed=seed)
        rng = np.random.default_rng(seed)
        ids = [int(i) for i in rng.integers(0, cfg.vocab_size, size=length)]
        h = model.encode_seq(ids)
        assert h.shape == (length, cfg.d_model)
        assert bool(torch.isfinite(h).all())
        s = model.extract_style(ids)
        assert s.shape == (cfg.d_model,)
        assert bool(torch.isfinite(s).all())
        logits = model.decode_logits(condition(h, s), [BOS_ID] + ids)
        assert logits.shape == (length + 1, cfg.vocab_size)
        assert bool(torch.isfinite(logits).all())


class TestCheckpoint:
    def test_round_trip_bit_identical(self, small_model, small_vocab, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, small_model, small_vocab, {"seed": 1, "step": 7})
        loaded, vocab, rng_state = load_checkpoint(path)
        assert rng_state == {"seed": 1, "step": 7}
        assert vocab.id_to_token == small_vocab.id_to_token
        assert loaded.cfg == small_model.cfg
        for (na, pa), (nb, pb) in zip(small_model.named_parameters(),
                                      loaded.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_reload_reproduces_outputs(self, small_model, small_vocab, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, small_model, small_vocab)
        loaded, _, _ = load_checkpoint(path)
        assert torch.equal(loaded.encode_seq([4, 5, 6]), small_model.encode_seq([4, 5, 6]))

    def test_version_mismatch_rejected(self, small_model, small_vocab, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, small_model, small_vocab)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(CheckpointError, match="not a model checkpoint"):
            load_checkpoint(path)

    def test_truncated_rejected(self, small_model, small_vocab, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, small_model, small_vocab)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 100])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)
