import copy

import pytest
import torch

from a2xp.adaptation import (adapt_expert, batch_indices, build_expert_bank, domain_seed, pretrain_meta_prompt,
                             smoothed_is_nonincreasing, train_prompt)
from a2xp.config import ExperimentConfig
from a2xp.data import DomainDataset
from a2xp.errors import ConfigurationError, NumericalFailure
from a2xp.evaluation import baseline_accuracy
from a2xp.objective import ObjectiveNetwork, network_digest
from a2xp.prompts import InitStrategy, PaddingPrompt

from conftest import ToyClassifier

SHAPE = (3, 16, 16)


def _domain(name, seed, n=40, shift=0.0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, *SHAPE, generator=g) + shift
    y = torch.arange(n) % 3
    return DomainDataset(name, x, y, ["a", "b", "c"], torch.arange(n - 8), torch.arange(n - 8, n))


def _net(seed=0):
    torch.manual_seed(seed)
    return ObjectiveNetwork(ToyClassifier())


def test_batches_cover_epochs():
    g = torch.Generator().manual_seed(0)
    it = batch_indices(10, 4, g)
    first = torch.cat([next(it), next(it)])
    assert len(set(first.tolist())) == 8
    assert all(len(next(it)) == 4 for _ in range(20))
    with pytest.raises(ConfigurationError):
        next(batch_indices(0, 4, g))


def test_budget_zero_returns_init():
    net = _net()
    res = adapt_expert(net, _domain("a", 0), InitStrategy("zero"), budget=0, border_width=2)
    assert res.steps == 0 and torch.count_nonzero(res.prompt.values) == 0
    meta = pretrain_meta_prompt(net, [_domain("a", 0), _domain("b", 1)], budget=0, border_width=2)
    assert torch.count_nonzero(meta.prompt.values) == 0


def test_exact_budget_and_interior_after_1000_steps():
    net = _net()
    before = network_digest(net)
    res = adapt_expert(net, _domain("a", 0), InitStrategy("uniform", 0.03), budget=1000, lr=0.05, border_width=2,
                       batch_size=8)
    assert res.steps == 1000 and len(res.losses) == 1000
    assert torch.all(res.prompt.values[~res.prompt.mask] == 0)
    assert res.prompt.norm() > 0
    assert network_digest(net) == before


def test_adaptation_requires_frozen_network():
    net = ObjectiveNetwork(ToyClassifier(), "linear_probe")
    with pytest.raises(ConfigurationError):
        adapt_expert(net, _domain("a", 0), InitStrategy("zero"), budget=1, border_width=2)


def test_empty_dataset_rejected():
    empty = DomainDataset("e", torch.zeros(0, *SHAPE), torch.zeros(0, dtype=torch.long), ["a", "b", "c"],
                          torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long))
    with pytest.raises(ConfigurationError):
        adapt_expert(_net(), empty, InitStrategy("zero"), budget=1, border_width=2)


def test_missing_class_allowed():
    dom = _domain("a", 0)
    dom.labels[:] = dom.labels.clamp(max=1)
    res = adapt_expert(_net(), dom, InitStrategy("zero"), budget=5, lr=0.1, border_width=2, batch_size=8)
    assert res.steps == 5


def test_nan_guard():
    dom = _domain("a", 0)
    dom.images[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalFailure):
        adapt_expert(_net(), dom, InitStrategy("zero"), budget=50, border_width=2, batch_size=40)


def test_deterministic_given_seed():
    doms = [_domain("a", 0), _domain("b", 1)]
    a = pretrain_meta_prompt(_net(), doms, budget=20, lr=0.1, seed=3, border_width=2, batch_size=8)
    b = pretrain_meta_prompt(_net(), doms, budget=20, lr=0.1, seed=3, border_width=2, batch_size=8)
    assert torch.equal(a.prompt.values, b.prompt.values)


def test_bank_unit_norm_and_order_independence():
    net = _net()
    doms = [_domain("a", 0), _domain("b", 1, shift=0.2), _domain("c", 2, shift=-0.2)]
    seeds = [domain_seed(0, d.name) for d in doms]
    bank, results = build_expert_bank(net, doms, InitStrategy("zero"), budget=15, lr=0.2, seeds=seeds,
                                      border_width=2, batch_size=8)
    assert len(bank) == 3 and bank.domain_names == ["a", "b", "c"]
    assert torch.allclose(bank.norms(), torch.ones(3, dtype=torch.float64), atol=1e-5)
    order = [2, 0, 1]
    pbank, _ = build_expert_bank(net, [doms[i] for i in order], InitStrategy("zero"), budget=15, lr=0.2,
                                 seeds=[seeds[i] for i in order], border_width=2, batch_size=8)
    assert torch.equal(pbank.values, bank.values[order])
    again, _ = build_expert_bank(net, doms, InitStrategy("zero"), budget=15, lr=0.2, seeds=seeds,
                                 border_width=2, batch_size=8)
    assert again.digest() == bank.digest()


def test_expert_independent_of_other_domains():
    net = _net()
    doms = [_domain("a", 0), _domain("b", 1)]
    seeds = [11, 12]
    bank, _ = build_expert_bank(net, doms, InitStrategy("zero"), budget=10, lr=0.2, seeds=seeds, border_width=2,
                                batch_size=8)
    swapped = [doms[0], _domain("b", 99, shift=0.5)]
    bank2, _ = build_expert_bank(net, swapped, InitStrategy("zero"), budget=10, lr=0.2, seeds=seeds,
                                 border_width=2, batch_size=8)
    assert torch.equal(bank.values[0], bank2.values[0])
    assert not torch.equal(bank.values[1], bank2.values[1])


def test_cache_reuses_results():
    net = _net()
    cache = {}
    doms = [_domain("a", 0), _domain("b", 1)]
    build_expert_bank(net, doms, InitStrategy("zero"), budget=5, lr=0.2, seeds=[1, 2], border_width=2, cache=cache)
    assert set(cache) == {("a", 1), ("b", 2)}
    sentinel = cache[("a", 1)]
    _, results = build_expert_bank(net, doms, InitStrategy("zero"), budget=5, lr=0.2, seeds=[1, 2], border_width=2,
                                   cache=cache)
    assert results[0] is sentinel


def test_domain_seed_stable():
    assert domain_seed(0, "art") == domain_seed(0, "art")
    assert domain_seed(0, "art") != domain_seed(1, "art") != domain_seed(0, "photo")


def test_smoothed_monotonicity_helper():
    assert smoothed_is_nonincreasing([3, 2, 2.5, 1, 1.5, 1], blocks=3)
    assert not smoothed_is_nonincreasing([1, 1, 3, 3], blocks=2)
    assert not smoothed_is_nonincreasing([3, 1, 1, 1, 4, 4], blocks=3)
    assert not smoothed_is_nonincreasing([1.0, float("nan")], blocks=2)


@pytest.mark.slow
def test_synthetic_adaptation_improves_same_domain(pretext_net, shapes_seed100):
    net = ObjectiveNetwork(copy.deepcopy(pretext_net))
    art = shapes_seed100[1]
    res = adapt_expert(net, art, InitStrategy("zero"), budget=1000, lr=1e-4)
    assert baseline_accuracy(net, art, prompt=res.prompt.values) >= baseline_accuracy(net, art)


@pytest.mark.slow
def test_meta_prompt_loss_decreases(pretext_net, shapes_seed100):
    net = ObjectiveNetwork(copy.deepcopy(pretext_net))
    res = pretrain_meta_prompt(net, shapes_seed100[1:], budget=1000, lr=ExperimentConfig().lr_adapt, seed=0)
    assert smoothed_is_nonincreasing(res.losses)
