import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stgkd.decoder import Vocabulary
from stgkd.errors import StructuralError
from stgkd.model import VARIANTS, TwoBranchCaptioner, make_batch
from stgkd.trainer import (
    TrainConfig,
    _select_best,
    build_model,
    compute_losses,
    corpus_dims,
    distill_loss,
    format_table,
    l2_feature_loss,
    load_checkpoint,
    run_ablation_suite,
    total_loss,
    train,
)

from helpers import tiny_config, tiny_dataset


@pytest.fixture(scope="module")
def data():
    return tiny_dataset(20)


@pytest.fixture(scope="module")
def vocab(data):
    return Vocabulary.build(r for split in data.values() for s in split for r in s.refs)


# ---------------------------------------------------------------- losses


def test_distill_identical_is_zero():
    x = torch.randn(2, 5, 7)
    assert distill_loss(x, x).item() == pytest.approx(0.0, abs=1e-7)


def test_distill_one_hot_vs_uniform_is_ln2():
    ls = torch.tensor([[[0.0, -torch.inf]]], dtype=torch.float64)
    lo = torch.zeros(1, 1, 2, dtype=torch.float64)
    assert distill_loss(ls, lo).item() == pytest.approx(math.log(2), abs=1e-9)


def test_distill_direction_is_student_first():
    ps = torch.tensor([0.7, 0.2, 0.1], dtype=torch.float64)
    po = torch.tensor([0.3, 0.3, 0.4], dtype=torch.float64)
    expected = float((ps * (ps / po).log()).sum())
    got = distill_loss(ps.log()[None, None], po.log()[None, None]).item()
    assert got == pytest.approx(expected, abs=1e-12)
    assert got != pytest.approx(float((po * (po / ps).log()).sum()), abs=1e-6)


def test_distill_skips_pad_positions():
    torch.manual_seed(0)
    ls, lo = torch.randn(1, 3, 4), torch.randn(1, 3, 4)
    masked = distill_loss(ls, lo, torch.tensor([[5, 6, 0]]))
    torch.testing.assert_close(masked, distill_loss(ls[:, :2], lo[:, :2]))


def test_distill_gradient_reaches_both_branches():
    ls = torch.randn(1, 2, 3, requires_grad=True)
    lo = torch.randn(1, 2, 3, requires_grad=True)
    distill_loss(ls, lo).backward()
    assert ls.grad.abs().sum() > 0 and lo.grad.abs().sum() > 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 3.0))
def test_distill_nonnegative_and_positive_when_perturbed(seed, scale):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 5, generator=g, dtype=torch.float64)
    y = x + scale * torch.randn(2, 3, 5, generator=g, dtype=torch.float64)
    assert distill_loss(x, y).item() > 0
    assert distill_loss(x, x).item() >= -1e-12


def test_total_loss_weighted_sum():
    b = total_loss(1.0, 2.0, 0.5)
    assert b.total == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 1.0, lambda_d=-1.0)


@settings(max_examples=60)
@given(*(st.floats(0, 10) for _ in range(5)), st.floats(-5, 5))
def test_total_loss_linear_in_each_component(lo, ls, ld, wsl, wd, delta):
    base = total_loss(lo, ls, ld, wsl, wd).total
    assert total_loss(lo + delta, ls, ld, wsl, wd).total == pytest.approx(base + delta, abs=1e-9)
    assert total_loss(lo, ls + delta, ld, wsl, wd).total == pytest.approx(base + wsl * delta, abs=1e-8)
    assert total_loss(lo, ls, ld + delta, wsl, wd).total == pytest.approx(base + wd * delta, abs=1e-8)


def test_l2_feature_loss():
    assert l2_feature_loss(torch.ones(2, 3), torch.zeros(2, 3)).item() == 1.0
    with pytest.raises(StructuralError):
        l2_feature_loss(torch.ones(2, 3), torch.zeros(3, 2))


# ---------------------------------------------------------------- variants


def test_variant_wiring(data, vocab):
    dims = corpus_dims(data["train"])
    for name, (mode, coupling) in VARIANTS.items():
        m = TwoBranchCaptioner(name, len(vocab), **dims, d_model=8, n_heads=2, n_layers=1, d_ff=16)
        assert (m.object_encoder is None) == (mode is None)
        assert (m.object_decoder is not None) == (coupling in ("distill", "l2"))
    concat = TwoBranchCaptioner("concat", len(vocab), **dims, d_model=8, n_heads=2, n_layers=1, d_ff=16)
    assert tuple(concat.concat_proj.weight.shape) == (8, 16)
    with pytest.raises(ValueError):
        TwoBranchCaptioner("gated", len(vocab), **dims)


def test_scene_only_has_no_object_parameters(data, vocab):
    m = TwoBranchCaptioner("scene_only", len(vocab), **corpus_dims(data["train"]), d_model=8, n_heads=2, n_layers=1, d_ff=16)
    assert not any(name.startswith("object") for name, _ in m.named_parameters())
    with pytest.raises(ValueError):
        m.memory_inputs(make_batch(data["val"], vocab, None), "object")


def test_scene_init_shared_across_variants(data, vocab):
    dims = corpus_dims(data["train"])
    states = []
    for v in ("full", "scene_only", "l2"):
        torch.manual_seed(5)
        m = TwoBranchCaptioner(v, len(vocab), **dims, d_model=8, n_heads=2, n_layers=1, d_ff=16)
        states.append({k: t for k, t in m.state_dict().items() if k.startswith("scene")})
    for s in states[1:]:
        for k in states[0]:
            torch.testing.assert_close(s[k], states[0][k], atol=0, rtol=0)


def test_compute_losses_slots(data, vocab):
    cfg = tiny_config()
    dims = corpus_dims(data["train"])
    for v in ("scene_only", "full", "l2", "concat"):
        torch.manual_seed(0)
        m = build_model(TrainConfig(**{**cfg.__dict__, "variant": v}), len(vocab), dims)
        b = compute_losses(m, make_batch(data["train"][:4], vocab, VARIANTS[v][0]), 1.0, 4.0).as_floats()
        if v in ("scene_only", "concat"):
            assert b["l_o_lang"] == 0.0 and b["l_distill"] == 0.0
        else:
            assert b["l_o_lang"] > 0 and b["l_distill"] > 0
        assert b["total"] == pytest.approx(b["l_o_lang"] + b["l_s_lang"] + 4 * b["l_distill"], rel=1e-6)


# ---------------------------------------------------------------- gradient check


def _fd_check(model, batch, rng, entries_per_param=3, eps=1e-6):
    def loss():
        return compute_losses(model, batch, 1.0, 4.0).total

    model.zero_grad()
    loss().backward()
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            for idx in rng.choice(flat.numel(), size=min(entries_per_param, flat.numel()), replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss().item()
                flat[idx] = orig - eps
                down = loss().item()
                flat[idx] = orig
                num = (up - down) / (2 * eps)
                ana = p.grad.view(-1)[idx].item()
                # floor: exact-zero gradients (e.g. key biases) leave only FD roundoff
                rel = abs(num - ana) / max(abs(num), abs(ana), 1e-5)
                worst = max(worst, rel)
                assert rel < 1e-3, f"{name}[{idx}] analytic {ana} numeric {num}"
    return worst


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(data, vocab, seed):
    torch.manual_seed(seed)
    cfg = tiny_config(variant="full", seed=seed)
    model = build_model(cfg, len(vocab), corpus_dims(data["train"])).double().eval()
    batch = make_batch(data["train"][:3], vocab, "full", torch.float64)
    _fd_check(model, batch, np.random.default_rng(seed))


# ---------------------------------------------------------------- training loop


def test_lambda_zero_scene_branch_matches_scene_only(data, vocab):
    common = dict(epochs=1, seed=3, dropout=0.0, lambda_d=0.0)
    full = train(tiny_config(variant="full", freeze_object_branch=True, **common), data, vocab=vocab, max_batches=3)
    solo = train(tiny_config(variant="scene_only", **common), data, vocab=vocab, max_batches=3)
    scene_keys = [k for k in solo.state_dict if k.startswith("scene")]
    assert scene_keys
    for k in scene_keys:
        torch.testing.assert_close(full.state_dict[k], solo.state_dict[k], atol=0, rtol=0)


def test_training_is_deterministic(data, vocab):
    a = train(tiny_config(dropout=0.3), data, vocab=vocab)
    b = train(tiny_config(dropout=0.3), data, vocab=vocab)
    strip = lambda h: [{k: v for k, v in r.items() if k != "seconds"} for r in h]  # noqa: E731
    assert strip(a.history) == strip(b.history)


def test_resume_continues_history(tmp_path, data, vocab):
    strip = lambda h: [{k: v for k, v in r.items() if k != "seconds"} for r in h]  # noqa: E731
    straight = train(tiny_config(epochs=4, dropout=0.3), data, vocab=vocab)
    train(tiny_config(epochs=2, dropout=0.3), data, out_dir=tmp_path, vocab=vocab)
    resumed = train(tiny_config(epochs=4, dropout=0.3), data, out_dir=tmp_path, vocab=vocab, resume=True)
    assert [h["epoch"] for h in resumed.history] == [1, 2, 3, 4]
    assert strip(resumed.history) == strip(straight.history)


def test_checkpoint_round_trip(tmp_path, data, vocab):
    run = train(tiny_config(), data, out_dir=tmp_path, vocab=vocab)
    model, meta, v2, _ = load_checkpoint(tmp_path / "best")
    assert v2 == vocab and meta["vocab_hash"] == vocab.hash()
    assert meta["epoch"] == run.best_epoch and meta["seed"] == run.config.seed
    assert set(meta) >= {"config", "epoch", "val_metric", "vocab_hash", "seed"}
    for k, t in run.state_dict.items():
        torch.testing.assert_close(model.state_dict()[k], t, atol=0, rtol=0)
    last = json.loads((tmp_path / "last" / "meta.json").read_text())
    assert last["epoch"] == 2
    assert not any(p.name.endswith((".tmp", ".old")) for p in tmp_path.iterdir())


def test_tiny_corpus_loss_decreases():
    data = tiny_dataset(20)
    run = train(tiny_config(epochs=50, learning_rate=1e-3), data)
    assert run.history[-1]["total"] < run.history[0]["total"]


def test_patience_stops_early(data, vocab):
    run = train(tiny_config(epochs=30, patience=1), data, vocab=vocab)
    assert len(run.history) < 30


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"variant": "full", "lr": 0.1})
    with pytest.raises(ValueError):
        TrainConfig(variant="nope")
    d = TrainConfig.desk_scale()
    assert (d.batch_size, d.d_model, d.learning_rate, d.lambda_d) == (16, 64, 1e-4, 4.0)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=20))
def test_best_epoch_is_never_beaten_later(scores):
    history = [{"epoch": i + 1, "val_bleu4": b, "val_token_accuracy": a} for i, (b, a) in enumerate(scores)]
    best = _select_best(history)
    chosen = history[best - 1]["val_bleu4"]
    assert all(h["val_bleu4"] <= chosen for h in history if h["epoch"] > best)
    assert all(h["val_bleu4"] <= chosen for h in history)


def test_ablation_table(data):
    table = run_ablation_suite(data, ["scene_only"], tiny_config(epochs=1), seeds=[0])
    assert len(table["rows"]) == 1 and table["rows"][0]["method"] == "Scene Branch Only"
    assert "Scene Branch Only" in format_table(table)
    with pytest.raises(ValueError):
        run_ablation_suite(data, ["mystery"], tiny_config(epochs=1))
