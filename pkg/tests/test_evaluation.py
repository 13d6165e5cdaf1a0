import csv
import math

import numpy as np
import pytest
import sympy
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from a2xp.data import DomainDataset, synthetic_shapes_domains
from a2xp.errors import ConfigurationError
from a2xp.evaluation import (SourceMatrix, attention_report, baseline_accuracy, count_parameters, evaluate_accuracy,
                             export_features, memory_report, normalize_weights, prompt_size, random_expert_accuracy,
                             single_expert_accuracies, source_eval_matrix)
from a2xp.generalization import build_heads
from a2xp.mixer import AttentionRecord, MixerConfig
from a2xp.objective import ObjectiveNetwork
from a2xp.prompts import ExpertBank, PaddingPrompt, border_mask
from a2xp.stats import rm_anova

from conftest import ToyClassifier, ToyEmbedder

SHAPE = (3, 16, 16)
B = 3


class ChannelMeanClassifier(nn.Module):
    """Predicts the channel with the largest interior mean."""

    def __init__(self):
        super().__init__()
        self.head = nn.Linear(3, 3, bias=False)
        with torch.no_grad():
            self.head.weight.copy_(torch.eye(3) * 10)

    def features(self, x):
        return x[:, :, B:-B, B:-B].mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.features(x))


def _separable(name="sep", n=30, seed=0):
    g = torch.Generator().manual_seed(seed)
    y = torch.arange(n) % 3
    x = 0.1 * torch.rand(n, *SHAPE, generator=g)
    x[torch.arange(n), y] += 0.8
    return DomainDataset(name, x, y, ["r", "g", "b"], torch.arange(n // 2), torch.arange(n // 2, n))


def _bank(n=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    mask = border_mask(SHAPE, B)
    return ExpertBank.from_prompts([PaddingPrompt(torch.randn(SHAPE, generator=g) * mask, B, mask) for _ in range(n)],
                                   [f"e{i}" for i in range(n)])


def _heads(seed=0):
    torch.manual_seed(seed)
    emb = ToyEmbedder().eval()
    return build_heads(emb, emb.feature_dim, seed=seed, init_scale=0.3)


def test_perfect_toy_setup():
    net = ObjectiveNetwork(ChannelMeanClassifier())
    res = evaluate_accuracy(net, _bank(), _heads(), MixerConfig(), _separable())
    assert res.accuracy == 1.0
    assert len(res.records) == 15 and all(r.correct for r in res.records)
    assert [r.sample_id for r in res.records] == list(range(15, 30))


def test_random_labels_binomial_bound():
    k, n = 3, 3000
    g = torch.Generator().manual_seed(7)
    x = torch.rand(n, *SHAPE, generator=g)
    y = torch.randint(0, k, (n,), generator=g)
    ds = DomainDataset("rand", x, y, ["a", "b", "c"], torch.arange(0), torch.arange(n))
    torch.manual_seed(3)
    net = ObjectiveNetwork(ToyClassifier())
    acc = evaluate_accuracy(net, _bank(), _heads(), MixerConfig(), ds).accuracy
    sigma = math.sqrt((1 / k) * (1 - 1 / k) / n)
    assert abs(acc - 1 / k) <= 3 * sigma


def test_deterministic_and_shuffle_invariant():
    torch.manual_seed(3)
    net = ObjectiveNetwork(ToyClassifier())
    ds = synthetic_shapes_domains(4, size=16, seed=1)[0]
    bank, heads = _bank(), _heads()
    a = evaluate_accuracy(net, bank, heads, MixerConfig(), ds, batch_size=7)
    b = evaluate_accuracy(net, bank, heads, MixerConfig(), ds, batch_size=100)
    assert a.accuracy == b.accuracy
    perm = torch.randperm(len(ds), generator=torch.Generator().manual_seed(0))
    inv = torch.argsort(perm)
    shuffled = DomainDataset(ds.name, ds.images[perm], ds.labels[perm], ds.class_names, inv[ds.train_idx],
                             inv[ds.val_idx])
    assert evaluate_accuracy(net, bank, heads, MixerConfig(), shuffled).accuracy == pytest.approx(a.accuracy)


def test_empty_split_rejected():
    ds = _separable()
    ds.val_idx = torch.arange(0)
    with pytest.raises(ConfigurationError):
        evaluate_accuracy(ObjectiveNetwork(ChannelMeanClassifier()), _bank(), _heads(), MixerConfig(), ds)


def test_baselines():
    net = ObjectiveNetwork(ChannelMeanClassifier())
    ds = _separable()
    bank = _bank()
    assert baseline_accuracy(net, ds) == 1.0
    # border-only prompts never reach the interior this classifier looks at
    assert single_expert_accuracies(net, bank, ds) == [1.0, 1.0, 1.0]
    assert random_expert_accuracy(net, bank, ds) == 1.0
    interior = torch.zeros(SHAPE)
    interior[0] = 5.0
    assert baseline_accuracy(net, ds, prompt=interior) == pytest.approx(1 / 3, abs=0.07)


def test_source_matrix_two_domains(tmp_path):
    net = ObjectiveNetwork(ChannelMeanClassifier())
    doms = [_separable("a"), _separable("b", seed=1)]
    arts = {"a": (_bank(1), _heads(), MixerConfig()), "b": (_bank(1, seed=2), _heads(1), MixerConfig())}
    m = source_eval_matrix(net, arts, doms)
    assert m.as_rows() == [[None, 1.0], [1.0, None]]
    path = tmp_path / "m.csv"
    m.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows == [["target", "a", "b", "Avg."], ["a", "-", "1", "1"], ["b", "1", "-", "1"]]
    with pytest.raises(ConfigurationError):
        source_eval_matrix(net, {"zzz": arts["a"]}, doms)


def test_source_matrix_row_average():
    m = SourceMatrix(["p", "a", "c"], {("p", "a"): 0.5, ("p", "c"): 0.7, ("a", "p"): 0.9, ("a", "c"): 0.2})
    assert m.row_average("p") == pytest.approx(0.6)
    assert m.row_average("a") == pytest.approx(0.55)
    assert m.row_average("c") is None and m.value("p", "p") is None


@settings(max_examples=60, deadline=None)
@given(w=st.lists(st.lists(st.floats(-1, 1), min_size=3, max_size=3), min_size=1, max_size=8))
def test_normalize_weights_l1(w):
    out = normalize_weights(np.array(w))
    for row, orig in zip(out, w):
        if np.abs(orig).sum() > 0:
            assert np.abs(row).sum() == pytest.approx(1.0)
            assert np.all(np.sign(row) == np.sign(orig))
        else:
            assert not row.any()


def _records(weights, target="t", domain="d", correct=True):
    return [AttentionRecord(list(w), list(w), i, domain, 0, 0 if correct else 1, target) for i, w in enumerate(weights)]


def test_attention_report_single_expert_null_p():
    rep = attention_report(_records([[0.5], [0.2], [0.9]]))
    cell = rep.cells[("t", "d")]
    assert cell.n_samples == 3 and cell.p_value is None


def test_attention_report_grid_shape_and_filtering(tmp_path):
    doms = ["photo", "art", "cartoon", "sketch"]
    rng = np.random.default_rng(0)
    recs = []
    for t in doms:
        for d in doms:
            recs += _records(rng.uniform(-1, 1, (6, 3)), t, d)
            recs += _records(rng.uniform(-1, 1, (4, 3)), t, d, correct=False)
    rep = attention_report(recs, doms, doms)
    grid = rep.p_grid()
    assert len(grid) == 4 and all(len(r) == 4 for r in grid)
    assert all(c.n_samples == 6 for c in rep.cells.values())
    rep.write_pvalue_csv(tmp_path / "p.csv")
    rep.write_summary_csv(tmp_path / "s.csv")
    lines = open(tmp_path / "p.csv").read().splitlines()
    assert lines[0].startswith("#") and lines[1] == "target,photo,art,cartoon,sketch" and len(lines) == 6
    assert len(open(tmp_path / "s.csv").read().splitlines()) == 2 + 16 * 3


def test_attention_report_cell_with_one_sample():
    rep = attention_report(_records([[0.1, 0.2]]))
    assert rep.cells[("t", "d")].p_value is None


def test_attention_report_planted_dominant_expert():
    rng = np.random.default_rng(1)
    w = rng.uniform(0.0, 0.2, (25, 3))
    w[:, 1] += 0.8
    rep = attention_report(_records(w))
    p = rep.cells[("t", "d")].p_value
    assert p < 0.05
    assert p == pytest.approx(rm_anova(normalize_weights(w)).p_value, abs=1e-15)


def test_attention_report_requires_records():
    with pytest.raises(ConfigurationError):
        attention_report([])


# memory

SYMBOLS = dict(zip(["S_N", "S_p", "S_E", "N", "M"], sympy.symbols("S_N S_p S_E N M")))


def _expr(formula):
    return sympy.sympify(formula, locals=SYMBOLS)


def test_prompt_size_224_border_30():
    assert prompt_size(224, 224, 30) == 69_840
    mask_count = int(border_mask((3, 224, 224), 30).sum())
    assert mask_count == 69_840


def test_memory_report_examples(tmp_path):
    r = memory_report(1000, 10, 50, 0, 1)
    assert (r.a2xp_total, r.dart_total) == (1050, 1000) and r.marginal_ratio is None
    r = memory_report(86_000_000, 69_840, 1_000_000, 3, 3)
    assert r.a2xp_marginal == 3 * 69_840 and r.dart_marginal == 3 * 86_000_000
    assert r.marginal_ratio == pytest.approx(86_000_000 / 69_840)
    assert r.a2xp_total == 3 * 69_840 + 86_000_000 + 1_000_000
    r.write_csv(tmp_path / "m.csv")
    rows = dict(csv.reader(open(tmp_path / "m.csv")))
    assert rows["a2xp_total"] == str(r.a2xp_total) and rows["dart_big_o"] == "O(M*S_N)"


@settings(max_examples=100, deadline=None)
@given(sn=st.integers(0, 10 ** 12), sp=st.integers(0, 10 ** 9), se=st.integers(0, 10 ** 12),
       n=st.integers(0, 100), m=st.integers(0, 100))
def test_memory_formulas_symbolic(sn, sp, se, n, m):
    r = memory_report(sn, sp, se, n, m)
    syms = dict(zip(SYMBOLS.values(), (sn, sp, se, n, m)))
    for formula, value in ((r.a2xp_total_formula, r.a2xp_total), (r.dart_total_formula, r.dart_total),
                           (r.a2xp_big_o, r.a2xp_marginal), (r.dart_big_o, r.dart_marginal)):
        assert _expr(formula).subs(syms) == value


def test_memory_formulas_match_definitions():
    sn, sp, se, n, m = SYMBOLS.values()
    r = memory_report(1, 1, 1, 1, 1)
    assert sympy.simplify(_expr(r.a2xp_total_formula) - (n * sp + sn + se)) == 0
    assert sympy.simplify(_expr(r.dart_total_formula) - m * sn) == 0
    # marginal cost of one more expert vs one more preset
    assert sympy.diff(_expr(r.a2xp_total_formula), n) == sp
    assert sympy.diff(_expr(r.dart_total_formula), m) == sn


def test_memory_report_rejects_bad_counts():
    for bad in ((-1, 1, 1, 1, 1), (1, 1.5, 1, 1, 1)):
        with pytest.raises(ConfigurationError):
            memory_report(*bad)


def test_count_parameters():
    assert count_parameters(nn.Linear(4, 3)) == 15


# features

def test_export_features(tmp_path):
    torch.manual_seed(3)
    net = ObjectiveNetwork(ToyClassifier())
    ds = _separable()
    ds.images[20] = ds.images[16]
    fx = export_features(net, ds)
    assert fx.features.shape == (15, 16) and len(fx.labels) == 15
    assert np.array_equal(fx.features[5], fx.features[1])
    fx2 = export_features(net, ds, artifacts=(_bank(), _heads(), MixerConfig()))
    assert fx2.features.shape == (15, 16)
    fx.write_csv(tmp_path / "f.csv")
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert len(rows) == 16 and len({len(r) for r in rows}) == 1
    assert rows[0][:4] == ["sample_id", "domain", "label", "correct"]
