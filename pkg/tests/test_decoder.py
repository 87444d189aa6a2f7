import math

import numpy as np
import pytest
import torch

from stgkd.decoder import (
    BOS,
    EOS,
    PAD,
    UNK,
    CaptionTransformer,
    MultiHeadAttention,
    Vocabulary,
    language_loss,
    pad_sequences,
    sinusoidal_positions,
)
from stgkd.errors import StructuralError

from helpers import finite_difference_errors


def tiny_model(vocab=12, d=16, dropout=0.0, seed=0):
    torch.manual_seed(seed)
    return CaptionTransformer(vocab, d_model=d, n_heads=4, n_layers=2, d_ff=32, dropout=dropout).eval()


# ---------------------------------------------------------------- vocabulary


def test_vocab_reserved_ids_and_round_trip():
    v = Vocabulary.build(["A disc pushes a box", "a ring"])
    assert v.id_to_token[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    ids = v.encode("a disc pushes a box")
    assert ids[0] == BOS and ids[-1] == EOS
    assert v.decode(ids) == "a disc pushes a box"
    assert v.encode("a zebra")[2] == UNK
    assert Vocabulary.from_json(v.to_json()) == v
    assert Vocabulary.from_json(v.to_json()).hash() == v.hash()


def test_vocab_min_freq_filters():
    v = Vocabulary.build(["a b", "a c"], min_freq=2)
    assert "a" in v.token_to_id and "b" not in v.token_to_id


def test_vocab_from_json_rejects_gaps():
    with pytest.raises(StructuralError):
        Vocabulary.from_json('{"<pad>": 0, "<bos>": 1, "<eos>": 2, "<unk>": 3, "a": 5}')


# ---------------------------------------------------------------- positions and attention


def test_sinusoidal_positions_formula():
    pe = sinusoidal_positions(5, 6)
    for pos in range(5):
        for i in range(3):
            angle = pos / 10000 ** (2 * i / 6)
            assert pe[pos, 2 * i].item() == pytest.approx(math.sin(angle), abs=1e-12)
            assert pe[pos, 2 * i + 1].item() == pytest.approx(math.cos(angle), abs=1e-12)


def test_attention_masked_keys_get_zero_weight():
    torch.manual_seed(0)
    attn = MultiHeadAttention(8, 2, 0.0)
    q = torch.randn(1, 3, 8)
    kv = torch.randn(1, 4, 8)
    allowed = torch.tensor([True, True, False, False])[None, None, None, :]
    base = attn(q, kv, kv, allowed)
    kv2 = kv.clone()
    kv2[:, 2:] = 1e3 * torch.randn(1, 2, 8)
    torch.testing.assert_close(attn(q, kv2, kv2, allowed), base)


def test_head_split_divisibility():
    with pytest.raises(StructuralError):
        MultiHeadAttention(10, 3, 0.0)


# ---------------------------------------------------------------- transformer


def test_causality_prefix_logits_unchanged():
    m = tiny_model()
    feats = torch.randn(1, 5, 16)
    mem = m.encode_sequence(feats)
    tgt = torch.tensor([[BOS, 5, 6, 7, 8]])
    base = m.teacher_forced_logits(mem, None, tgt)
    for s in range(1, 5):
        changed = tgt.clone()
        changed[0, s] = 9
        out = m.teacher_forced_logits(mem, None, changed)
        # rows before s only see tokens < s
        torch.testing.assert_close(out[:, :s], base[:, :s], atol=1e-6, rtol=0)


def test_memory_mask_hides_padded_steps():
    m = tiny_model()
    feats = torch.randn(1, 6, 16)
    mask = torch.tensor([[True, True, True, False, False, False]])
    tgt = torch.tensor([[BOS, 4, 5]])
    base = m(feats, mask, tgt)
    feats2 = feats.clone()
    feats2[:, 3:] = torch.randn(1, 3, 16) * 50
    torch.testing.assert_close(m(feats2, mask, tgt), base, atol=1e-5, rtol=0)


def test_fully_masked_memory_raises():
    m = tiny_model()
    with pytest.raises(StructuralError):
        m.encode_sequence(torch.randn(1, 3, 16), torch.zeros(1, 3, dtype=torch.bool))


def test_out_of_vocab_target_raises():
    m = tiny_model()
    mem = m.encode_sequence(torch.randn(1, 3, 16))
    with pytest.raises(StructuralError):
        m.teacher_forced_logits(mem, None, torch.tensor([[BOS, 12]]))


def test_too_long_sequence_raises():
    m = tiny_model()
    with pytest.raises(StructuralError):
        m.encode_sequence(torch.randn(1, 65, 16))


def test_greedy_matches_stepwise_argmax():
    m = tiny_model(seed=3)
    mem = m.encode_sequence(torch.randn(2, 4, 16))
    out = m.generate_greedy(mem, None, max_len=6)
    for b in range(2):
        seq = [BOS]
        expected = []
        for _ in range(6):
            logits = m.teacher_forced_logits(mem[b:b + 1], None, torch.tensor([seq]))[0, -1]
            nxt = int(logits.argmax())
            if nxt == EOS:
                break
            expected.append(nxt)
            seq.append(nxt)
        assert out[b] == expected


def test_greedy_stops_at_eos_and_is_deterministic():
    m = tiny_model(seed=1)
    with torch.no_grad():
        m.proj.weight.zero_()
        m.proj.bias.zero_()
        m.proj.bias[EOS] = 5.0
    mem = m.encode_sequence(torch.randn(1, 3, 16))
    assert m.generate_greedy(mem) == [[]]
    m2 = tiny_model(seed=4)
    mem2 = m2.encode_sequence(torch.randn(3, 3, 16))
    assert m2.generate_greedy(mem2) == m2.generate_greedy(mem2)


def test_greedy_ties_go_to_lowest_id():
    m = tiny_model(seed=1)
    with torch.no_grad():
        m.proj.weight.zero_()
        m.proj.bias.zero_()
        m.proj.bias[[7, 5]] = 1.0
    mem = m.encode_sequence(torch.randn(1, 3, 16))
    assert m.generate_greedy(mem, max_len=3) == [[5, 5, 5]]


# ---------------------------------------------------------------- loss


def test_language_loss_matches_manual_cross_entropy():
    torch.manual_seed(0)
    logits = torch.randn(2, 3, 5, dtype=torch.float64)
    ref = torch.tensor([[4, 2, PAD], [1, 3, 2]])
    logp = torch.log_softmax(logits, -1)
    picks = [-logp[0, 0, 4], -logp[0, 1, 2], -logp[1, 0, 1], -logp[1, 1, 3], -logp[1, 2, 2]]
    assert language_loss(logits, ref).item() == pytest.approx(float(sum(picks) / 5), abs=1e-12)


def test_language_loss_empty_reference_raises():
    with pytest.raises(StructuralError):
        language_loss(torch.randn(1, 2, 4), torch.full((1, 2), PAD))


def test_pad_sequences():
    out = pad_sequences([[1, 2, 3], [4]])
    np.testing.assert_array_equal(out.numpy(), [[1, 2, 3], [4, PAD, PAD]])


# ---------------------------------------------------------------- invariants


def test_softmax_rows_sum_to_one():
    m = tiny_model(seed=2).double()
    mem = m.encode_sequence(torch.randn(3, 4, 16, dtype=torch.float64))
    logits = m.teacher_forced_logits(mem, None, torch.randint(0, 12, (3, 6)))
    assert torch.softmax(logits, -1).sum(-1).sub(1).abs().max().item() <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_greedy_invariant_under_positive_affine_logit_maps(seed):
    m = tiny_model(seed=seed)
    mem = m.encode_sequence(torch.randn(2, 4, 16))
    base = m.generate_greedy(mem, max_len=6)
    g = torch.Generator().manual_seed(seed)
    scale, shift = torch.rand(1, generator=g).item() * 5 + 0.1, torch.randn(1, generator=g).item() * 10
    with torch.no_grad():
        m.proj.weight.mul_(scale)
        m.proj.bias.mul_(scale).add_(shift)
    assert m.generate_greedy(mem, max_len=6) == base


@pytest.mark.parametrize("seed", range(3))
def test_tiny_decoder_gradients_match_finite_differences(seed):
    torch.manual_seed(seed)
    m = CaptionTransformer(11, d_model=8, n_heads=2, n_layers=1, d_ff=16, dropout=0.0).double().eval()
    feats = torch.randn(2, 3, 8, dtype=torch.float64)
    mask = torch.tensor([[True, True, True], [True, True, False]])
    tgt = torch.tensor([[BOS, 5, 6, 7], [BOS, 8, 9, PAD]])
    ref = torch.tensor([[5, 6, 7, EOS], [8, 9, EOS, PAD]])
    loss = lambda: language_loss(m(feats, mask, tgt), ref)  # noqa: E731
    assert max(finite_difference_errors(loss, list(m.parameters()))) < 1e-3
