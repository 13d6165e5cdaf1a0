"""Expert adaptation: one border prompt per source domain against a frozen network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import torch

from .data import DomainDataset
from .errors import ConfigurationError, NumericalFailure
from .objective import LossConfig, ObjectiveNetwork, loss
from .prompts import ExpertBank, InitStrategy, PaddingPrompt, init_prompt, project_


@dataclass
class AdaptationResult:
    prompt: PaddingPrompt
    losses: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.losses)

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None


def batch_indices(n: int, batch_size: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
    """Endless mini-batches drawn from shuffled epochs over ``range(n)``.

    A batch never straddles two epochs; when fewer than ``batch_size``
    samples remain a new permutation is started.
    """
    if n == 0:
        raise ConfigurationError("cannot draw batches from an empty dataset")
    bs = min(batch_size, n)
    while True:
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n - bs + 1, bs):
            yield perm[start:start + bs]


def _check_frozen(net: ObjectiveNetwork) -> None:
    if any(p.requires_grad for p in net.parameters()):
        raise ConfigurationError("adaptation requires the objective network in frozen mode")


def train_prompt(net: ObjectiveNetwork, images: torch.Tensor, labels: torch.Tensor,
                 prompt: PaddingPrompt, budget: int, lr: float, momentum: float = 0.9,
                 seed: int = 0, batch_size: int = 32,
                 loss_cfg: LossConfig = LossConfig()) -> AdaptationResult:
    """SGD with momentum on the border entries of ``prompt``; exactly ``budget`` steps."""
    if budget < 0:
        raise ConfigurationError(f"budget must be >= 0, got {budget}")
    if len(labels) == 0:
        raise ConfigurationError("cannot adapt a prompt on an empty dataset")
    _check_frozen(net)
    net.eval()
    mask = prompt.mask.to(images.dtype)
    values = prompt.values.detach().clone().to(images.dtype).requires_grad_(True)
    opt = torch.optim.SGD([values], lr=lr, momentum=momentum)
    batches = batch_indices(len(labels), batch_size, torch.Generator().manual_seed(int(seed)))
    losses = []
    for _ in range(budget):
        idx = next(batches)
        opt.zero_grad(set_to_none=True)
        out = loss(net(images[idx] + values), labels[idx], loss_cfg)
        if not torch.isfinite(out):
            raise NumericalFailure(f"non-finite adaptation loss at step {len(losses)}")
        out.backward()
        values.grad.mul_(mask)
        opt.step()
        project_(values, mask)
        if not torch.all(torch.isfinite(values)):
            raise NumericalFailure(f"non-finite prompt values after step {len(losses)}")
        losses.append(out.item())
    result = PaddingPrompt(values.detach(), prompt.border_width, prompt.mask.clone())
    return AdaptationResult(result, losses)


def adapt_expert(net: ObjectiveNetwork, domain: DomainDataset, init: InitStrategy,
                 budget: int = 1000, lr: float = 1e-4, momentum: float = 0.9, seed: int = 0,
                 border_width: int = 4, batch_size: int = 32,
                 loss_cfg: LossConfig = LossConfig()) -> AdaptationResult:
    """Adapt one expert on ``domain``'s training split; returns the raw expert."""
    x, y = domain.subset("train")
    start = init_prompt(domain.image_shape, border_width, init, rng_seed=seed)
    return train_prompt(net, x, y, start, budget, lr, momentum, seed, batch_size, loss_cfg)


def pretrain_meta_prompt(net: ObjectiveNetwork, domains: Sequence[DomainDataset], budget: int = 1000,
                         lr: float = 1e-4, momentum: float = 0.9, seed: int = 0,
                         border_width: int = 4, batch_size: int = 32,
                         loss_cfg: LossConfig = LossConfig()) -> AdaptationResult:
    """Train a single prompt from zero on the pooled training splits of ``domains``."""
    if not domains:
        raise ConfigurationError("meta prompt needs at least one source domain")
    parts = [d.subset("train") for d in domains]
    x = torch.cat([p[0] for p in parts])
    y = torch.cat([p[1] for p in parts])
    start = PaddingPrompt.zeros(domains[0].image_shape, border_width)
    return train_prompt(net, x, y, start, budget, lr, momentum, seed, batch_size, loss_cfg)


def domain_seed(seed: int, domain_name: str) -> int:
    """Per-domain seed that depends only on the run seed and the domain's name."""
    return (int(seed) * 1_000_003 + sum(ord(c) * 31 ** i for i, c in enumerate(domain_name))) % (2 ** 31)


def build_expert_bank(net: ObjectiveNetwork, source_domains: Sequence[DomainDataset],
                      init: InitStrategy, budget: int = 1000, lr: float = 1e-4,
                      momentum: float = 0.9, seeds: Optional[Sequence[int]] = None,
                      border_width: int = 4, batch_size: int = 32,
                      loss_cfg: LossConfig = LossConfig(), normalize: bool = True,
                      cache: Optional[dict] = None) -> tuple[ExpertBank, list[AdaptationResult]]:
    """Adapt one expert per source domain, then normalize each.

    ``seeds`` gives one seed per domain (default: :func:`domain_seed` of 0).
    ``cache`` may map ``(domain name, seed)`` to a previous
    :class:`AdaptationResult` for the same network/init/budget; because each
    expert depends only on its own domain, results are reusable across
    leave-one-domain-out splits.
    """
    if not source_domains:
        raise ConfigurationError("no source domains given")
    if seeds is None:
        seeds = [domain_seed(0, d.name) for d in source_domains]
    if len(seeds) != len(source_domains):
        raise ConfigurationError("one seed per source domain is required")
    results = []
    for dom, s in zip(source_domains, seeds):
        key = (dom.name, int(s))
        if cache is not None and key in cache:
            results.append(cache[key])
            continue
        res = adapt_expert(net, dom, init, budget, lr, momentum, s, border_width, batch_size, loss_cfg)
        if cache is not None:
            cache[key] = res
        results.append(res)
    bank = ExpertBank.from_prompts([r.prompt for r in results], [d.name for d in source_domains],
                                   normalize=normalize)
    return bank, results


def smoothed_is_nonincreasing(losses: Sequence[float], blocks: int = 10, tol: float = 0.0) -> bool:
    """Noise-robust loss trend check.

    The curve is averaged over ``blocks`` equal windows. The trend holds when the
    last window is no higher than the first and the least-squares slope through
    the window means is not positive (both up to ``tol``).
    """
    window = len(losses) // blocks
    if window < 1:
        raise ValueError("need at least one loss per block")
    means = [sum(losses[i * window:(i + 1) * window]) / window for i in range(blocks)]
    if not all(math.isfinite(m) for m in means):
        return False
    xbar = (blocks - 1) / 2
    ybar = sum(means) / blocks
    slope = sum((i - xbar) * (m - ybar) for i, m in enumerate(means)) / sum((i - xbar) ** 2 for i in range(blocks))
    return means[-1] <= means[0] + tol and slope <= tol