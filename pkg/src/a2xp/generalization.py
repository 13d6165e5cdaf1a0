"""Attention-based generalization: train the mixer heads on pooled source domains."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .adaptation import batch_indices
from .data import DomainDataset
from .errors import ConfigurationError, NumericalFailure
from .mixer import MixerConfig, MixerHeads, attention_weights, embed_experts, mix_experts
from .objective import LossConfig, ObjectiveNetwork, loss
from .prompts import ExpertBank, project_


@dataclass(frozen=True)
class ScheduleConfig:
    """Cosine annealing with warm restarts under a linearly decaying envelope.

    ``n_cycles`` equal-length cycles; the peak of cycle ``c`` interpolates
    linearly from ``1`` (first cycle) to ``final_fraction`` (last cycle).
    """

    n_cycles: int = 3
    final_fraction: float = 0.1

    def __post_init__(self):
        if self.n_cycles < 1:
            raise ConfigurationError("schedule needs at least one cycle")
        if not 0 < self.final_fraction <= 1:
            raise ConfigurationError("final_fraction must be in (0, 1]")


def make_optimizer(params, lr: float, weight_decay: float = 0.01) -> torch.optim.Optimizer:
    """Adaptive-moment optimizer with decoupled weight decay."""
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def make_lr_schedule(base_lr: float, total_updates: int,
                     restarts: ScheduleConfig = ScheduleConfig()) -> list[float]:
    """Per-step learning rates; every value lies in ``(0, base_lr]``."""
    if total_updates < 1:
        raise ConfigurationError("schedule needs total_updates >= 1")
    n = min(restarts.n_cycles, total_updates)
    base_len, extra = divmod(total_updates, n)
    lrs = []
    for c in range(n):
        length = base_len + (1 if c < extra else 0)
        peak = 1.0 if n == 1 else 1.0 - (1.0 - restarts.final_fraction) * c / (n - 1)
        for t in range(length):
            lrs.append(base_lr * peak * 0.5 * (1.0 + math.cos(math.pi * t / length)))
    return lrs


@dataclass
class GeneralizationResult:
    heads: MixerHeads
    bank: ExpertBank
    curve: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.curve)


def _pooled(domains: Sequence[DomainDataset]) -> tuple[torch.Tensor, torch.Tensor]:
    parts = [d.subset("train") for d in domains]
    return torch.cat([p[0] for p in parts]), torch.cat([p[1] for p in parts])


def train_generalization(net: ObjectiveNetwork, bank: ExpertBank, heads: MixerHeads, cfg: MixerConfig,
                         source_domains: Sequence[DomainDataset], budget: int = 1000, lr: float = 1e-4,
                         schedule: ScheduleConfig = ScheduleConfig(), tune_experts: bool = False,
                         seed: int = 0, batch_size: int = 32, weight_decay: float = 0.01,
                         loss_cfg: LossConfig = LossConfig()) -> GeneralizationResult:
    """AdamW on the mixer heads for exactly ``budget`` steps.

    Mini-batches are drawn from the union of the sources' training splits,
    so domains mix at random.  The objective network's own trainable
    parameters (per its tuning mode) are optimized alongside the heads.  With
    ``tune_experts`` the expert border values are trained too; when the bank
    is normalized they are re-normalized inside every forward and once more
    at the end.  Expert keys are re-cached before returning.
    """
    if not source_domains:
        raise ConfigurationError("generalization needs at least one source domain")
    if budget < 0:
        raise ConfigurationError(f"budget must be >= 0, got {budget}")
    if bank.normalized != cfg.use_expert_norm:
        raise ConfigurationError("bank normalization does not match mixer config")
    bank.invalidate_cache()
    x_all, y_all = _pooled(source_domains)
    curve: list[tuple[int, float, float]] = []
    if budget == 0:
        embed_experts(heads, bank)
        return GeneralizationResult(heads, bank, curve)

    mask = bank.mask.to(bank.values.dtype)
    experts = bank.values.detach().clone().requires_grad_(tune_experts)
    params = heads.head_parameters()
    if heads.train_embedder:
        params += list(heads.shared_embedder.parameters())
    params += net.trainable_parameters()
    if tune_experts:
        params.append(experts)
    opt = make_optimizer(params, lr, weight_decay)
    lrs = make_lr_schedule(lr, budget, schedule)

    frozen_embedder = not heads.train_embedder
    if frozen_embedder:
        with torch.no_grad():
            feats_all = heads.shared_embedder(x_all)
            expert_feats = None if tune_experts else heads.shared_embedder(experts)
    if net.tuning_mode == "full_tune":
        net.train()
    else:
        net.eval()
    heads.train()

    batches = batch_indices(len(y_all), batch_size, torch.Generator().manual_seed(int(seed)))
    for step in range(budget):
        idx = next(batches)
        x, y = x_all[idx], y_all[idx]
        values = experts
        if tune_experts and cfg.use_expert_norm:
            values = experts / torch.linalg.vector_norm(experts.flatten(1), dim=1).view(-1, 1, 1, 1)
        if frozen_embedder:
            q = heads.head_T(feats_all[idx])
            ef = expert_feats if expert_feats is not None else heads.shared_embedder(values)
            keys = heads.head_E(ef)
        else:
            q = heads.head_T(heads.shared_embedder(x))
            keys = heads.head_E(heads.shared_embedder(values))
        _, w = attention_weights(q, keys, cfg)
        logits = net(x + mix_experts(values, w))
        out = loss(logits, y, loss_cfg)
        if not torch.isfinite(out):
            raise NumericalFailure(f"non-finite generalization loss at step {step}")
        for g in opt.param_groups:
            g["lr"] = lrs[step]
        opt.zero_grad(set_to_none=True)
        out.backward()
        if tune_experts:
            experts.grad.mul_(mask)
        opt.step()
        if tune_experts:
            project_(experts, mask)
        curve.append((step, out.item(), lrs[step]))

    net.eval()
    heads.eval()
    for p in params:
        if not torch.all(torch.isfinite(p)):
            raise NumericalFailure("non-finite parameter after generalization training")
    if tune_experts:
        with torch.no_grad():
            new_values = experts.detach().clone()
            if cfg.use_expert_norm:
                new_values = new_values / torch.linalg.vector_norm(new_values.flatten(1), dim=1).view(-1, 1, 1, 1)
            bank.values = new_values
    embed_experts(heads, bank)
    return GeneralizationResult(heads, bank, curve)


def write_curve_csv(curve: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, value, lr in curve:
            w.writerow([step, f"{value:.9g}", f"{lr:.9g}"])


def build_heads(embedder: torch.nn.Module, feature_dim: int, seed: int = 0, embed_dim: int = 512,
                train_embedder: bool = False, init_scale: float = 1.0,
                dtype: Optional[torch.dtype] = None) -> MixerHeads:
    """Freshly initialized heads on top of ``embedder`` (seeded)."""
    with torch.random.fork_rng():
        torch.manual_seed(int(seed))
        heads = MixerHeads(embedder, feature_dim, embed_dim, train_embedder, init_scale)
    if dtype is not None:
        heads = heads.to(dtype)
    return heads.eval()


def train_baseline(net: ObjectiveNetwork, source_domains: Sequence[DomainDataset], budget: int = 1000,
                   lr: float = 1e-4, schedule: ScheduleConfig = ScheduleConfig(), seed: int = 0,
                   batch_size: int = 32, weight_decay: float = 0.01,
                   loss_cfg: LossConfig = LossConfig()) -> list[tuple[int, float, float]]:
    """Tune the network's trainable parameters on pooled sources without prompts.

    Linear probing or full tuning, with the same optimizer, schedule and
    sampling as :func:`train_generalization`.
    """
    params = net.trainable_parameters()
    if not params:
        raise ConfigurationError("baseline tuning needs linear_probe or full_tune mode")
    if budget < 0:
        raise ConfigurationError(f"budget must be >= 0, got {budget}")
    x_all, y_all = _pooled(source_domains)
    curve: list[tuple[int, float, float]] = []
    if budget == 0:
        return curve
    opt = make_optimizer(params, lr, weight_decay)
    lrs = make_lr_schedule(lr, budget, schedule)
    if net.tuning_mode == "full_tune":
        net.train()
    else:
        net.eval()
    batches = batch_indices(len(y_all), batch_size, torch.Generator().manual_seed(int(seed)))
    for step in range(budget):
        idx = next(batches)
        out = loss(net(x_all[idx]), y_all[idx], loss_cfg)
        if not torch.isfinite(out):
            raise NumericalFailure(f"non-finite baseline loss at step {step}")
        for g in opt.param_groups:
            g["lr"] = lrs[step]
        opt.zero_grad(set_to_none=True)
        out.backward()
        opt.step()
        curve.append((step, out.item(), lrs[step]))
    net.eval()
    return curve
