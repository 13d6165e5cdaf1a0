"""End-to-end runs: data, objective network, experts, heads and evaluation.

:class:`Pipeline` holds everything for one seed and memoizes the
expensive pieces (pretext backbones, adapted experts) so that several mixer
or tuning configurations can share them.
"""

from __future__ import annotations

import copy
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .adaptation import AdaptationResult, adapt_expert, domain_seed, pretrain_meta_prompt
from .config import ExperimentConfig
from .data import (DomainDataset, LodoSplit, color_jitter, load_folder_dataset, lodo_splits, make_shapes,
                   synthetic_shapes_domains)
from .errors import ConfigurationError
from .evaluation import baseline_accuracy, evaluate_accuracy, random_expert_accuracy
from .generalization import GeneralizationResult, ScheduleConfig, build_heads, train_baseline, train_generalization
from .mixer import MixerConfig, MixerHeads
from .objective import LossConfig, ObjectiveNetwork, build_backbone, pretrain_backbone
from .prompts import ExpertBank, InitStrategy, PaddingPrompt

Log = Callable[[str], None]


def _quiet(msg: str) -> None:
    pass


def load_domains(cfg: ExperimentConfig, seed: int) -> list[DomainDataset]:
    """Datasets for one seed; synthetic data is regenerated from the seed."""
    d = cfg.dataset
    if d.kind == "synthetic":
        return synthetic_shapes_domains(d.n_per_class, d.size, seed=seed, strength=d.strength,
                                        val_fraction=d.val_fraction)
    return load_folder_dataset(d.path, d.image_size, d.val_fraction, seed=seed)


def loss_config(cfg: ExperimentConfig) -> LossConfig:
    return LossConfig(smoothing=cfg.smoothing, direction=cfg.kl_direction)


def mixer_config(cfg: ExperimentConfig) -> MixerConfig:
    return MixerConfig(cfg.use_expert_norm, cfg.use_tanh, cfg.use_softmax)


def _digest_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


_BACKBONE_MEMO: dict[str, dict] = {}


def class_profile(x: torch.Tensor, y: torch.Tensor, n_per_class: int, decay: float,
                  minimum: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Keep the first ``int(n_per_class * decay**k) + minimum`` images of class ``k``."""
    keep = [torch.nonzero(y == k).flatten()[:int(n_per_class * decay ** k) + minimum]
            for k in range(int(y.max()) + 1)]
    idx = torch.cat(keep)
    return x[idx], y[idx]


def pretext_backbone(cfg: ExperimentConfig, num_classes: int, image_shape: Sequence[int],
                     pooled: Optional[tuple[torch.Tensor, torch.Tensor]] = None,
                     cache_dir: Optional[Path] = None) -> torch.nn.Module:
    """Build the objective backbone and pretext-train it (memoized by recipe).

    Without ``pooled`` data the pretext set is a separately seeded set of
    photo-style shapes; with it, the given images are used.  A checkpoint in
    the config short-circuits training.
    """
    c, h, w = image_shape
    with torch.random.fork_rng():
        bb = build_backbone(cfg.backbone, num_classes, c)
    if cfg.backbone_checkpoint:
        try:
            bb.load_state_dict(torch.load(cfg.backbone_checkpoint, weights_only=True))
        except Exception as exc:  # unpickling and shape mismatches raise assorted types
            raise ConfigurationError(f"cannot load backbone_checkpoint {cfg.backbone_checkpoint}: {exc}") from exc
        return bb.eval()
    p = cfg.pretext
    recipe = {"backbone": cfg.backbone, "pretext": vars(p), "k": num_classes, "shape": list(image_shape)}
    if pooled is not None:
        recipe["pooled"] = hashlib.sha256(pooled[0].numpy().tobytes() + pooled[1].numpy().tobytes()).hexdigest()
    key = _digest_json(recipe)
    if key in _BACKBONE_MEMO:
        bb.load_state_dict(_BACKBONE_MEMO[key])
        return bb.eval()
    path = cache_dir / f"backbone_{key}.pt" if cache_dir is not None else None
    if path is not None and path.is_file():
        state = torch.load(path, weights_only=True)
    else:
        if pooled is None:
            if (c, h, w) != (3, h, h):
                raise ConfigurationError("shape pretext needs square RGB images; set backbone_checkpoint")
            x, y = make_shapes(p.n_per_class + p.min_per_class, h, seed=p.seed)
            if num_classes != int(y.max()) + 1:
                raise ConfigurationError(
                    f"shape pretext has {int(y.max()) + 1} classes but the dataset has {num_classes}; "
                    "set backbone_checkpoint")
            x, y = class_profile(x, y, p.n_per_class, p.class_decay, p.min_per_class)
        else:
            x, y = pooled
        with torch.random.fork_rng():
            torch.manual_seed(p.seed)
            bb = build_backbone(cfg.backbone, num_classes, c)
            pretrain_backbone(bb, x, y, steps=p.steps, batch_size=p.batch_size, lr=p.lr, seed=p.seed,
                              augment=color_jitter if p.augment else None)
        state = {k: v.clone() for k, v in bb.state_dict().items()}
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(state, path)
    _BACKBONE_MEMO[key] = state
    bb.load_state_dict(state)
    return bb.eval()


@dataclass
class SplitRun:
    """Everything trained for one held-out target under one configuration."""

    target: str
    net: ObjectiveNetwork
    bank: ExpertBank
    heads: Optional[MixerHeads]
    mixer: Optional[MixerConfig]
    generalization: Optional[GeneralizationResult] = None
    initial_source_accuracy: Optional[dict[str, float]] = None


class Pipeline:
    """One seed's worth of data and memoized artifacts."""

    def __init__(self, cfg: ExperimentConfig, seed: int, jobs: int = 1, log: Log = _quiet,
                 cache_dir: Optional[Path] = None):
        self.cfg = cfg
        self.seed = int(seed)
        self.jobs = max(1, int(jobs))
        self.log = log
        self.cache_dir = cache_dir
        self.domains = load_domains(cfg, self.seed)
        self.splits = {s.target.name: s for s in lodo_splits(self.domains)}
        self.num_classes = self.domains[0].num_classes
        self.image_shape = self.domains[0].image_shape
        self.shared_pretext = cfg.dataset.kind == "synthetic" and not cfg.backbone_checkpoint
        self._experts: dict[tuple, AdaptationResult] = {}
        self._meta: dict[tuple, AdaptationResult] = {}

    # -- objective network ------------------------------------------------

    def backbone(self, target: str) -> torch.nn.Module:
        pooled = None
        if not self.shared_pretext and not self.cfg.backbone_checkpoint:
            # no external pretext set: pretrain on the pooled source training splits
            parts = [d.subset("train") for d in self.splits[target].sources]
            pooled = (torch.cat([p[0] for p in parts]), torch.cat([p[1] for p in parts]))
        return pretext_backbone(self.cfg, self.num_classes, self.image_shape, pooled, self.cache_dir)

    def objective(self, target: str, tuning_mode: str = "frozen") -> ObjectiveNetwork:
        """A fresh objective network for ``target`` (own copy, safe to tune)."""
        return ObjectiveNetwork(copy.deepcopy(self.backbone(target)), tuning_mode, self.cfg.backbone)

    # -- phase 1 ----------------------------------------------------------

    def meta_prompt(self, target: str) -> AdaptationResult:
        key = (target,)
        if key not in self._meta:
            cfg = self.cfg
            self.log(f"seed {self.seed} target {target}: meta prompt")
            self._meta[key] = pretrain_meta_prompt(
                self.objective(target), self.splits[target].sources, cfg.budget_meta, cfg.lr_adapt,
                cfg.momentum, domain_seed(self.seed, "meta:" + target), cfg.border_width,
                cfg.batch_size, loss_config(cfg))
        return self._meta[key]

    def _init_strategy(self, target: str, init: str) -> InitStrategy:
        if init == "meta":
            return InitStrategy("meta", self.cfg.init_scale, self.meta_prompt(target).prompt)
        return InitStrategy(init, self.cfg.init_scale)

    def _expert_key(self, target: str, domain: str, init: str) -> tuple:
        # experts only depend on the target through a meta prompt or a per-split backbone
        scope = target if (init == "meta" or not self.shared_pretext) else None
        return (init, scope, domain)

    def experts(self, target: str, init: Optional[str] = None) -> list[AdaptationResult]:
        """Raw adapted experts for the sources of ``target``, in source order."""
        init = init or self.cfg.init
        cfg = self.cfg
        split = self.splits[target]
        strategy = self._init_strategy(target, init)
        todo = [d for d in split.sources if self._expert_key(target, d.name, init) not in self._experts]
        if todo:
            net = self.objective(target)
            self.log(f"seed {self.seed} target {target}: adapting {[d.name for d in todo]} ({init} init)")

            def run(dom: DomainDataset) -> AdaptationResult:
                return adapt_expert(net, dom, strategy, cfg.budget_adapt, cfg.lr_adapt, cfg.momentum,
                                    domain_seed(self.seed, dom.name), cfg.border_width, cfg.batch_size,
                                    loss_config(cfg))

            if self.jobs > 1 and len(todo) > 1:
                with ThreadPoolExecutor(self.jobs) as pool:
                    results = list(pool.map(run, todo))
            else:
                results = [run(d) for d in todo]
            for d, r in zip(todo, results):
                self._experts[self._expert_key(target, d.name, init)] = r
        return [self._experts[self._expert_key(target, d.name, init)] for d in split.sources]

    def bank(self, target: str, normalize: bool, init: Optional[str] = None) -> ExpertBank:
        results = self.experts(target, init)
        return ExpertBank.from_prompts([r.prompt for r in results], self.splits[target].source_names,
                                       normalize=normalize)

    # -- phase 2 ----------------------------------------------------------

    def embedder(self, target: str) -> tuple[torch.nn.Module, int]:
        bb = self.backbone(target)
        if self.cfg.embedder == "random":
            with torch.random.fork_rng():
                torch.manual_seed(domain_seed(self.seed, "embedder"))
                bb = build_backbone(self.cfg.backbone, self.num_classes, self.image_shape[0])
        trunk = copy.deepcopy(bb.trunk).eval()
        return trunk, bb.feature_dim

    def generalize(self, target: str, mixer: Optional[MixerConfig] = None, init: Optional[str] = None,
                   tuning_mode: str = "frozen", tune_experts: Optional[bool] = None,
                   prompts: Optional[Sequence[PaddingPrompt]] = None, record_initial: bool = False) -> SplitRun:
        """Train heads for ``target``; ``prompts`` overrides the memoized raw experts.

        With ``record_initial`` the source accuracies of the untrained heads are
        kept on the returned run for before/after comparisons.
        """
        cfg = self.cfg
        mixer = mixer or mixer_config(cfg)
        tune_experts = cfg.tune_experts if tune_experts is None else tune_experts
        if prompts is None:
            bank = self.bank(target, mixer.use_expert_norm, init)
        else:
            bank = ExpertBank.from_prompts(list(prompts), self.splits[target].source_names,
                                           normalize=mixer.use_expert_norm)
        net = self.objective(target, tuning_mode)
        emb, fdim = self.embedder(target)
        heads = build_heads(emb, fdim, seed=domain_seed(self.seed, "heads:" + target),
                            init_scale=cfg.head_init_scale)
        initial = None
        if record_initial:
            initial = {d.name: evaluate_accuracy(net, bank, heads, mixer, d).accuracy
                       for d in self.splits[target].sources}
        self.log(f"seed {self.seed} target {target}: generalizing ({mixer.label}, {tuning_mode})")
        res = train_generalization(net, bank, heads, mixer, self.splits[target].sources, cfg.budget_generalize,
                                   cfg.lr_generalize, ScheduleConfig(cfg.schedule_cycles, cfg.schedule_final_fraction),
                                   tune_experts, domain_seed(self.seed, "gen:" + target), cfg.batch_size,
                                   cfg.weight_decay, loss_config(cfg))
        return SplitRun(target, net, res.bank, res.heads, mixer, res, initial)

    def tuned_baseline(self, target: str, tuning_mode: str) -> ObjectiveNetwork:
        """The objective network tuned on pooled sources without any prompt."""
        cfg = self.cfg
        net = self.objective(target, tuning_mode)
        self.log(f"seed {self.seed} target {target}: baseline {tuning_mode}")
        train_baseline(net, self.splits[target].sources, cfg.budget_generalize, cfg.lr_generalize,
                       ScheduleConfig(cfg.schedule_cycles, cfg.schedule_final_fraction),
                       domain_seed(self.seed, "base:" + target), cfg.batch_size, cfg.weight_decay, loss_config(cfg))
        return net

    # -- evaluation -------------------------------------------------------

    def target_row(self, run: SplitRun) -> dict:
        """Target accuracy of ``run`` alongside the two reference baselines."""
        tgt = self.splits[run.target].target
        frozen = self.objective(run.target)
        return {
            "seed": self.seed,
            "target": run.target,
            "a2xp": evaluate_accuracy(run.net, run.bank, run.heads, run.mixer, tgt).accuracy,
            "no_prompt": baseline_accuracy(frozen, tgt),
            "random_expert": random_expert_accuracy(frozen, self.bank(run.target, True), tgt),
        }

    def source_rows(self, run: SplitRun) -> list[dict]:
        frozen = self.objective(run.target)
        rows = []
        for d in self.splits[run.target].sources:
            rows.append({
                "seed": self.seed, "target": run.target, "domain": d.name,
                "a2xp": evaluate_accuracy(run.net, run.bank, run.heads, run.mixer, d).accuracy,
                "no_prompt": baseline_accuracy(frozen, d),
            })
        return rows

    def adaptation_accuracy(self, target: str, init: str) -> list[dict]:
        """Own-domain validation accuracy of each raw adapted expert."""
        frozen = self.objective(target)
        out = []
        for d, r in zip(self.splits[target].sources, self.experts(target, init)):
            out.append({"seed": self.seed, "target": target, "domain": d.name, "init": init,
                        "accuracy": baseline_accuracy(frozen, d, prompt=r.prompt.values)})
        return out


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
