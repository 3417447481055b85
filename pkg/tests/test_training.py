import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from scriptalign.corpus import CleanSentence
from scriptalign.model import ModelConfig, ScriptAlignModel, fuse_embeddings, state_hash
from scriptalign.synthetic import make_twin_corpus
from scriptalign.tokenizer import IGNORE_INDEX, train_bpe
from scriptalign.training import (ConfigError, MultitaskLossState, TrainConfig, _prepare, ablation_grid,
                                  batch_losses, build_model, combine_kl, consistency_loss, directional_kl,
                                  mask_tokens, masked_lm_loss, multitask_loss, train)


def multitask_loss_d(*a):
    return multitask_loss(*a).detach()


# -- masking -----------------------------------------------------------------

def _ids(tok, n_rows=100, n_cols=100, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(tok.n_reserved, tok.vocab_size, size=(n_rows, n_cols))
    ids[:, 0] = tok.cls_id
    ids[:, 1] = tok.tag_id("demotic")
    ids[:, -1] = tok.sep_id
    ids[:, n_cols // 2] = tok.gap_id
    return ids


def test_mask_fraction(mini_tok):
    ids = _ids(mini_tok)
    mb = mask_tokens(ids, 0.15, 3, mini_tok)
    maskable = ids >= mini_tok.n_reserved
    frac = (mb.labels != IGNORE_INDEX).sum() / maskable.sum()
    assert abs(frac - 0.15) <= 0.01


def test_mask_replacement_split(mini_tok):
    ids = _ids(mini_tok, 200, 100)
    mb = mask_tokens(ids, 0.5, 1, mini_tok)
    sel = mb.labels != IGNORE_INDEX
    n = sel.sum()
    to_mask = (mb.input_ids[sel] == mini_tok.mask_id).sum() / n
    kept = (mb.input_ids[sel] == ids[sel]).sum() / n
    assert abs(to_mask - 0.8) < 0.02
    assert abs(kept - 0.1) < 0.02 + 1.0 / mini_tok.vocab_size


def test_reserved_never_masked(mini_tok):
    ids = _ids(mini_tok)
    reserved = ids < mini_tok.n_reserved
    for seed in range(10):
        mb = mask_tokens(ids, 0.9, seed, mini_tok)
        assert (mb.labels[reserved] == IGNORE_INDEX).all()
        assert (mb.input_ids[reserved] == ids[reserved]).all()


def test_labels_exactly_at_positions(mini_tok):
    ids = _ids(mini_tok, 5, 20)
    mb = mask_tokens(ids, 0.3, 0, mini_tok)
    sel = np.zeros(ids.shape, dtype=bool)
    sel[tuple(mb.positions.T)] = True
    assert ((mb.labels != IGNORE_INDEX) == sel).all()
    assert (mb.labels[sel] == ids[sel]).all()


def test_mask_deterministic_and_tiny_rate(mini_tok):
    ids = _ids(mini_tok, 2, 10)
    a, b = mask_tokens(ids, 0.15, 42, mini_tok), mask_tokens(ids, 0.15, 42, mini_tok)
    assert (a.input_ids == b.input_ids).all() and (a.labels == b.labels).all()
    tiny = mask_tokens(ids, 1e-12, 0, mini_tok)
    assert (tiny.labels == IGNORE_INDEX).all()
    with pytest.raises(ValueError):
        mask_tokens(ids, 0.0, 0, mini_tok)


# -- multitask loss ------------------------------------------------------------

def test_loss_trivial_cases():
    st1 = MultitaskLossState({"mlm": 1.0})
    assert float(multitask_loss_d({"mlm": torch.tensor(1.0)}, st1)) == 1.0
    st2 = MultitaskLossState({"mlm": 1.0, "trans": 1.0})
    assert float(multitask_loss_d({"mlm": torch.tensor(2.0), "trans": torch.tensor(2.0)}, st2)) == 4.0


def test_loss_default_weights_and_ablation():
    st_ = MultitaskLossState({"mlm": 1.0, "tlm": 0.0, "trans": 1.0, "pos": 0.5})
    assert set(st_.log_var) == {"mlm", "trans", "pos"}
    losses = {"mlm": torch.tensor(1.0), "trans": torch.tensor(2.0), "pos": torch.tensor(4.0)}
    assert float(multitask_loss_d(losses, st_)) == pytest.approx(1.0 + 2.0 + 0.5 * 4.0)
    with pytest.raises(KeyError):
        multitask_loss({"mlm": torch.tensor(1.0)}, st_)


def test_loss_with_nonzero_log_var():
    st_ = MultitaskLossState({"mlm": 1.0})
    with torch.no_grad():
        st_.log_var["mlm"].fill_(math.log(2.0))
    assert float(multitask_loss_d({"mlm": torch.tensor(3.0)}, st_)) == pytest.approx(1.5 + math.log(2.0), rel=1e-6)


def test_log_var_converges_to_loss():
    st_ = MultitaskLossState({"mlm": 1.0})
    opt = torch.optim.Adam(st_.parameters(), lr=0.05)
    for _ in range(3000):
        opt.zero_grad()
        multitask_loss({"mlm": torch.tensor(3.0)}, st_).backward()
        opt.step()
    assert abs(st_.sigma2("mlm") - 3.0) < 1e-3
    assert float(multitask_loss_d({"mlm": torch.tensor(3.0)}, st_)) == pytest.approx(1 + math.log(3), abs=1e-6)


@pytest.mark.parametrize("w,loss,s", [(1.0, 3.0, 0.2), (0.5, 0.7, -0.4), (1.0, 2.0, 1.1)])
def test_log_var_derivative(w, loss, s):
    st_ = MultitaskLossState({"pos": w}).double()
    with torch.no_grad():
        st_.log_var["pos"].fill_(s)
    total = multitask_loss({"pos": torch.tensor(loss, dtype=torch.float64)}, st_)
    (g,) = torch.autograd.grad(total, [st_.log_var["pos"]])
    analytic = w * (1 - loss / math.exp(s))

    def f(v):
        with torch.no_grad():
            st_.log_var["pos"].fill_(v)
            return float(multitask_loss_d({"pos": torch.tensor(loss, dtype=torch.float64)}, st_))

    h = 1e-6
    fd = (f(s + h) - f(s - h)) / (2 * h)
    assert float(g) == pytest.approx(analytic, rel=1e-9)
    assert fd == pytest.approx(analytic, rel=1e-3)


def test_combine_kl():
    assert float(combine_kl(torch.tensor(1.0), torch.tensor(0.4), 0.5)) == pytest.approx(1.2)
    assert float(combine_kl(torch.tensor(1.0), torch.tensor(0.4), 0.0)) == 1.0
    assert TrainConfig().consistency_lambda == 0.5
    with pytest.raises(ValueError):
        combine_kl(1.0, 0.4, -1.0)


# -- KL consistency -------------------------------------------------------------

def _kl_oracle(p, q):
    return 0.5 * (sum(a * math.log(a / b) for a, b in zip(p, q)) + sum(b * math.log(b / a) for a, b in zip(p, q)))


def test_kl_closed_form():
    p, q = (0.9, 0.1), (0.5, 0.5)
    lo = torch.log(torch.tensor([[p]], dtype=torch.float64))
    ln = torch.log(torch.tensor([[q]], dtype=torch.float64))
    assert float(consistency_loss(lo, ln)) == pytest.approx(_kl_oracle(p, q), abs=1e-6)


def test_kl_identical_is_zero():
    x = torch.randn(3, 5, 11, dtype=torch.float64)
    assert abs(float(consistency_loss(x, x.clone()))) <= 1e-10


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_kl_symmetric_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(2, 4, 6, generator=g, dtype=torch.float64) * 3
    b = torch.randn(2, 4, 6, generator=g, dtype=torch.float64) * 3
    ab, ba = consistency_loss(a, b), consistency_loss(b, a)
    assert float(ab) == float(ba)
    assert float(ab) >= 0


def test_teacher_detached():
    t = torch.randn(4, 9, requires_grad=True)
    s = torch.randn(4, 9, requires_grad=True)
    gt, gs = torch.autograd.grad(directional_kl(t, s).sum(), [t, s], allow_unused=True)
    assert gt is None or torch.count_nonzero(gt) == 0
    assert torch.count_nonzero(gs) > 0


def test_kl_positions_and_frame():
    lo = torch.randn(1, 5, 7)
    ln = torch.randn(1, 3, 7)
    pad_o = torch.tensor([[False, False, True, True, True]])
    pad_n = torch.tensor([[False, False, False]])
    full = consistency_loss(lo, ln, pad_o, pad_n)
    manual = consistency_loss(lo[:, :2], ln[:, :2])
    torch.testing.assert_close(full, manual)


def test_kl_no_positions_warns():
    x = torch.randn(1, 2, 4)
    with pytest.warns(RuntimeWarning):
        out = consistency_loss(x, x, torch.ones(1, 2, dtype=torch.bool), None)
    assert float(out) == 0.0


# -- fusion gate ------------------------------------------------------------------

@pytest.mark.parametrize("p", [-20.0, -3.0, 0.0, 2.5, 20.0])
def test_alpha_in_open_interval(p):
    a = torch.sigmoid(torch.tensor(p, dtype=torch.float64))
    assert 0.0 < float(a) < 1.0


def test_fusion_gradients_reach_everything():
    e_o = torch.randn(2, 4, 8, requires_grad=True)
    e_n = torch.randn(2, 4, 8, requires_grad=True)
    p = torch.tensor(0.3, requires_grad=True)
    (fuse_embeddings(e_o, e_n, p) ** 2).sum().backward()
    assert torch.count_nonzero(e_o.grad) > 0 and torch.count_nonzero(e_n.grad) > 0 and float(p.grad) != 0


# -- config / grid ---------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"tasks": ("tlm",)},
    {"tasks": ("mlm", "bleu")},
    {"representation": "raw", "integration": "kl"},
    {"representation": "raw", "integration": "fusion"},
    {"representation": "latin", "integration": "none"},
    {"representation": "greek", "integration": "kl"},
    {"consistency_lambda": -0.1},
])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_full_scale_accepted():
    cfg = TrainConfig.full_scale()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.warmup_steps, cfg.grad_accum) == (10, 16, 5e-5, 500, 2)


def test_grid_cells():
    names = [c.name for c in ablation_grid()]
    assert names == ["mlm", "mlm+tlm", "mlm+trans", "mlm+tlm+trans", "mlm+tlm+trans+pos",
                     "mlm_latin-kl", "mlm_latin-fusion", "mlm_ipa-kl", "mlm_ipa-fusion"]


def test_config_dict_roundtrip():
    cfg = TrainConfig(tasks=("mlm", "pos"), seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})


# -- training loop --------------------------------------------------------------------------

FAST = dict(epochs=2, batch_size=16, model={"hidden": 32, "heads": 2, "encoder_layers": 1, "decoder_layers": 1,
                                            "dropout": 0.1})


def test_mlm_smoke_loss_halves():
    # 50 records (25 concept sequences in two languages); loss on the training
    # set with fixed masks and dropout off, before and after 30 epochs
    sents = make_twin_corpus(25, 20, seed=0).sentences
    assert len(sents) == 50
    tok = train_bpe([s.text for s in sents] + [" ".join(s.translation) for s in sents], 300)
    cfg = TrainConfig(epochs=30, batch_size=8, lr=3e-3, warmup_steps=10, seed=0)
    before = masked_lm_loss(build_model(cfg, tok), sents, tok, cfg)
    res = train(cfg, sents, tok)
    after = masked_lm_loss(res.model, sents, tok, cfg)
    assert after <= 0.5 * before


def test_build_model_matches_training_start(mini_corpus, mini_tok):
    cfg = TrainConfig(epochs=1, batch_size=8, seed=3, lr=0.0, warmup_steps=0)
    a, b = build_model(cfg, mini_tok), build_model(cfg, mini_tok)
    assert state_hash(a) == state_hash(b)


def test_training_deterministic(mini_corpus, mini_tok):
    cfg = TrainConfig(tasks=("mlm", "tlm", "trans", "pos"), **FAST)
    a, b = train(cfg, mini_corpus, mini_tok), train(cfg, mini_corpus, mini_tok)
    assert a.history == b.history
    assert state_hash(a.model) == state_hash(b.model)


def test_ablated_fields_do_not_matter(mini_corpus, mini_tok):
    stripped = [CleanSentence(s.lang, s.tokens, ("changed",), None, s.doc_id) for s in mini_corpus]
    cfg = TrainConfig(**FAST)
    a, b = train(cfg, mini_corpus, mini_tok), train(cfg, stripped, mini_tok)
    assert state_hash(a.model) == state_hash(b.model)


@pytest.mark.parametrize("integration,passes", [("fusion", 1), ("kl", 2)])
def test_encoder_passes_per_batch(mini_corpus, mini_tok, integration, passes):
    cfg = TrainConfig(representation="latin", integration=integration, **FAST)
    model = ScriptAlignModel(ModelConfig(vocab_size=mini_tok.vocab_size, max_len=cfg.max_len, **cfg.model))
    calls = []
    model.encoder.register_forward_hook(lambda *a: calls.append(1))
    examples = _prepare(mini_corpus[:8], mini_tok, cfg, None)
    rngs = {k: np.random.default_rng(i) for i, k in enumerate(("mlm", "tlm", "norm", "order"))}
    total, losses, extra = batch_losses(model, MultitaskLossState(cfg.task_weights), examples, cfg, mini_tok, rngs)
    assert len(calls) == passes
    assert ("consistency" in extra) == (integration == "kl")
    total.backward()
    if integration == "fusion":
        assert model.fusion_param.grad is not None and float(model.fusion_param.grad) != 0


@pytest.mark.parametrize("cell", ablation_grid(TrainConfig(**FAST)), ids=lambda c: c.name)
def test_every_grid_cell_trains(mini_corpus, mini_tok, cell, tmp_path):
    res = train(replace(cell, epochs=1), mini_corpus, mini_tok, log_path=tmp_path / "loss.tsv",
                checkpoint_path=tmp_path / "m.pt")
    row = res.history[-1]
    assert math.isfinite(row["total"])
    assert set(res.loss_state.log_var) == set(cell.tasks)
    lines = (tmp_path / "loss.tsv").read_text().splitlines()
    assert lines[0] == "epoch\tkey\tvalue" and any("\tmlm\t" in ln for ln in lines)
    assert (tmp_path / "m.pt").is_file()
