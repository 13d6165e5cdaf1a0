"""Accuracy protocols, attention-weight analysis and memory accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .data import DomainDataset
from .errors import ConfigurationError
from .mixer import AttentionRecord, MixerConfig, MixerHeads, forward
from .objective import ObjectiveNetwork, predict
from .prompts import ExpertBank, trainable_count
from .stats import rm_anova

FLOAT = "{:.9g}"
WEIGHT_NORMALIZATION = "per-sample L1 (w / sum|w|), sign kept"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return FLOAT.format(v)
    return str(v)


def _split_or_raise(dataset: DomainDataset, split: str):
    x, y = dataset.subset(split)
    if len(y) == 0:
        raise ConfigurationError(f"domain {dataset.name!r} has an empty {split!r} split")
    idx = torch.arange(len(dataset)) if split == "all" else {"train": dataset.train_idx, "val": dataset.val_idx}[split]
    return x, y, idx


@dataclass
class EvalResult:
    accuracy: float
    records: list[AttentionRecord] = field(default_factory=list)
    predictions: Optional[torch.Tensor] = None


def evaluate_accuracy(net: ObjectiveNetwork, bank: ExpertBank, heads: MixerHeads, cfg: MixerConfig,
                      dataset: DomainDataset, split: str = "val", batch_size: int = 512,
                      target_domain: Optional[str] = None) -> EvalResult:
    """A2XP accuracy on one split, with an attention record per sample.

    Uses the bank's cached expert keys (computing them if absent).
    """
    x, y, idx = _split_or_raise(dataset, split)
    if bank.cached_keys is None:
        from .mixer import embed_experts

        embed_experts(heads, bank)
    heads.eval()
    preds, records = [], []
    with torch.no_grad():
        for start in range(0, len(y), batch_size):
            xb = x[start:start + batch_size]
            out = forward(heads, bank, cfg, xb, use_cache=True)
            p = predict(net, out.prompted).argmax(1)
            preds.append(p)
            records += out.records(idx[start:start + batch_size].tolist(), dataset.name, p.tolist(),
                                   y[start:start + batch_size].tolist(), target_domain)
    pred = torch.cat(preds)
    return EvalResult((pred == y).double().mean().item(), records, pred)


def baseline_accuracy(net: ObjectiveNetwork, dataset: DomainDataset, split: str = "val",
                      prompt: Optional[torch.Tensor] = None, batch_size: int = 512) -> float:
    """Accuracy of the frozen network, optionally with one fixed additive prompt."""
    x, y, _ = _split_or_raise(dataset, split)
    correct = 0
    for start in range(0, len(y), batch_size):
        xb = x[start:start + batch_size]
        if prompt is not None:
            xb = xb + prompt
        correct += int((predict(net, xb).argmax(1) == y[start:start + batch_size]).sum())
    return correct / len(y)


def single_expert_accuracies(net: ObjectiveNetwork, bank: ExpertBank, dataset: DomainDataset,
                             split: str = "val") -> list[float]:
    """Accuracy with each bank expert applied alone at weight one."""
    return [baseline_accuracy(net, dataset, split, bank.values[i]) for i in range(len(bank))]


def random_expert_accuracy(net: ObjectiveNetwork, bank: ExpertBank, dataset: DomainDataset,
                           split: str = "val") -> float:
    """Expected accuracy when one expert is drawn uniformly at random."""
    accs = single_expert_accuracies(net, bank, dataset, split)
    return float(np.mean(accs))


# --------------------------------------------------------------------------
# source-domain matrix
# --------------------------------------------------------------------------

@dataclass
class SourceMatrix:
    """Rows: held-out target of the trained model; columns: evaluated domain."""

    domains: list[str]
    cells: dict[tuple[str, str], float]

    def value(self, target: str, domain: str) -> Optional[float]:
        if target == domain:
            return None
        return self.cells.get((target, domain))

    def row_average(self, target: str) -> Optional[float]:
        vals = [self.value(target, d) for d in self.domains if d != target]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def as_rows(self) -> list[list[Optional[float]]]:
        return [[self.value(t, d) for d in self.domains] for t in self.domains]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target"] + list(self.domains) + ["Avg."])
            for t in self.domains:
                row = [self.value(t, d) for d in self.domains]
                w.writerow([t] + [_fmt(v) if v is not None else "-" for v in row] + [_fmt(self.row_average(t))])


def source_eval_matrix(net: ObjectiveNetwork, artifacts: Mapping[str, tuple[ExpertBank, MixerHeads, MixerConfig]],
                       domains: Sequence[DomainDataset], split: str = "val") -> SourceMatrix:
    """Evaluate each held-out-target model on every other domain.

    ``artifacts`` maps a target domain name to the ``(bank, heads, cfg)``
    trained with that domain held out.
    """
    names = [d.name for d in domains]
    cells = {}
    for target, (bank, heads, cfg) in artifacts.items():
        if target not in names:
            raise ConfigurationError(f"artifacts for unknown target {target!r}")
        for d in domains:
            if d.name != target:
                cells[(target, d.name)] = evaluate_accuracy(net, bank, heads, cfg, d, split).accuracy
    return SourceMatrix(names, cells)


# --------------------------------------------------------------------------
# attention analysis
# --------------------------------------------------------------------------

def normalize_weights(weights: np.ndarray) -> np.ndarray:
    """Divide each row by the sum of its absolute values; all-zero rows stay zero."""
    w = np.asarray(weights, dtype=np.float64)
    denom = np.abs(w).sum(axis=-1, keepdims=True)
    return np.divide(w, denom, out=np.zeros_like(w), where=denom > 0)


@dataclass
class AttentionCell:
    target: str
    domain: str
    n_samples: int
    mean: list[float]
    sd: list[float]
    q1: list[float]
    median: list[float]
    q3: list[float]
    p_value: Optional[float]
    degenerate: bool = False


@dataclass
class AttentionReport:
    targets: list[str]
    domains: list[str]
    cells: dict[tuple[str, str], AttentionCell]
    normalization: str = WEIGHT_NORMALIZATION

    def p_grid(self) -> list[list[Optional[float]]]:
        return [[self.cells[(t, d)].p_value if (t, d) in self.cells else None for d in self.domains]
                for t in self.targets]

    def write_summary_csv(self, path: str | Path) -> None:
        n = max((len(c.mean) for c in self.cells.values()), default=0)
        with open(path, "w", newline="") as fh:
            fh.write(f"# weights: {self.normalization}; correctly classified samples only\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target", "domain", "expert", "n", "mean", "sd", "q1", "median", "q3"])
            for t in self.targets:
                for d in self.domains:
                    c = self.cells.get((t, d))
                    if c is None:
                        continue
                    for i in range(min(n, len(c.mean))):
                        w.writerow([t, d, i + 1, c.n_samples] + [_fmt(v[i]) for v in (c.mean, c.sd, c.q1, c.median, c.q3)])

    def write_pvalue_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# RM-ANOVA p-values; weights: {self.normalization}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target"] + list(self.domains))
            for t, row in zip(self.targets, self.p_grid()):
                w.writerow([t] + [_fmt(v) for v in row])


def attention_report(records: Sequence[AttentionRecord], domains: Optional[Sequence[str]] = None,
                     targets: Optional[Sequence[str]] = None) -> AttentionReport:
    """Per-(target, evaluated domain) weight summaries and RM-ANOVA p-values.

    Only correctly classified samples are kept.  Cells with fewer than two
    samples or fewer than two experts get a null p-value.
    """
    if not records:
        raise ConfigurationError("attention_report needs at least one record")
    groups: dict[tuple[str, str], list[list[float]]] = {}
    for r in records:
        if r.correct:
            groups.setdefault((r.target_domain or "", r.domain_name), []).append(r.weights)
    if domains is None:
        domains = sorted({r.domain_name for r in records})
    if targets is None:
        targets = sorted({r.target_domain or "" for r in records})
    cells = {}
    for t in targets:
        for d in domains:
            rows = groups.get((t, d))
            if rows is None:
                n_exp = len(records[0].weights)
                nan = [float("nan")] * n_exp
                cells[(t, d)] = AttentionCell(t, d, 0, nan, nan, nan, nan, nan, None)
                continue
            w = normalize_weights(np.array(rows))
            s, n = w.shape
            p, degenerate = None, False
            if s >= 2 and n >= 2:
                res = rm_anova(w)
                p, degenerate = res.p_value, res.degenerate
            q = np.quantile(w, [0.25, 0.5, 0.75], axis=0)
            sd = w.std(axis=0, ddof=1) if s >= 2 else np.full(n, np.nan)
            cells[(t, d)] = AttentionCell(t, d, s, w.mean(0).tolist(), sd.tolist(), q[0].tolist(),
                                          q[1].tolist(), q[2].tolist(), p, degenerate)
    return AttentionReport(list(targets), list(domains), cells)


# --------------------------------------------------------------------------
# memory accounting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MemoryReport:
    """Parameter storage of A2XP versus an ensemble of ``M`` full networks."""

    s_network: int
    s_prompt: int
    s_embedder: int
    n_experts: int
    m_presets: int

    @property
    def a2xp_total(self) -> int:
        return self.n_experts * self.s_prompt + self.s_network + self.s_embedder

    @property
    def dart_total(self) -> int:
        return self.m_presets * self.s_network

    @property
    def a2xp_marginal(self) -> int:
        return self.n_experts * self.s_prompt

    @property
    def dart_marginal(self) -> int:
        return self.m_presets * self.s_network

    @property
    def total_ratio(self) -> float:
        return self.dart_total / self.a2xp_total

    @property
    def marginal_ratio(self) -> Optional[float]:
        return self.dart_marginal / self.a2xp_marginal if self.a2xp_marginal else None

    # symbolic forms, parseable by a CAS
    a2xp_total_formula = "N*S_p + S_N + S_E"
    dart_total_formula = "M*S_N"
    a2xp_big_o = "N*S_p"
    dart_big_o = "M*S_N"

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("S_N", str(self.s_network)), ("S_p", str(self.s_prompt)), ("S_E", str(self.s_embedder)),
            ("N", str(self.n_experts)), ("M", str(self.m_presets)),
            ("a2xp_total", str(self.a2xp_total)), ("a2xp_total_formula", self.a2xp_total_formula),
            ("dart_total", str(self.dart_total)), ("dart_total_formula", self.dart_total_formula),
            ("a2xp_marginal", str(self.a2xp_marginal)), ("a2xp_big_o", f"O({self.a2xp_big_o})"),
            ("dart_marginal", str(self.dart_marginal)), ("dart_big_o", f"O({self.dart_big_o})"),
            ("total_ratio", _fmt(self.total_ratio)), ("marginal_ratio", _fmt(self.marginal_ratio)),
        ]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quantity", "value"])
            w.writerows(self.rows())


def memory_report(s_network: int, s_prompt: int, s_embedder: int, n_experts: int, m_presets: int) -> MemoryReport:
    for name, v in (("S_N", s_network), ("S_p", s_prompt), ("S_E", s_embedder), ("N", n_experts), ("M", m_presets)):
        if int(v) != v or v < 0:
            raise ConfigurationError(f"{name} must be a non-negative integer, got {v}")
    return MemoryReport(int(s_network), int(s_prompt), int(s_embedder), int(n_experts), int(m_presets))


def prompt_size(height: int, width: int, border_width: int, channels: int = 3) -> int:
    """Trainable values of one padding prompt."""
    return trainable_count((channels, height, width), border_width)


def count_parameters(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# feature export
# --------------------------------------------------------------------------

@dataclass
class FeatureExport:
    features: np.ndarray
    labels: np.ndarray
    domains: list[str]
    sample_ids: list[int]
    correct: list[Optional[bool]]

    def write_csv(self, path: str | Path) -> None:
        d = self.features.shape[1] if self.features.ndim == 2 else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "domain", "label", "correct"] + [f"f{i}" for i in range(d)])
            for i in range(len(self.labels)):
                c = self.correct[i]
                w.writerow([self.sample_ids[i], self.domains[i], int(self.labels[i]), "" if c is None else int(c)]
                           + [FLOAT.format(float(v)) for v in self.features[i]])


def export_features(net: ObjectiveNetwork, dataset: DomainDataset, split: str = "val",
                    artifacts: Optional[tuple[ExpertBank, MixerHeads, MixerConfig]] = None,
                    batch_size: int = 512) -> FeatureExport:
    """Last-hidden-layer features of the objective network per sample.

    With ``artifacts`` the images are prompted by A2XP first.
    """
    x, y, idx = _split_or_raise(dataset, split)
    feats, correct = [], []
    net.eval()
    with torch.no_grad():
        for start in range(0, len(y), batch_size):
            xb = x[start:start + batch_size]
            if artifacts is not None:
                bank, heads, cfg = artifacts
                xb = forward(heads, bank, cfg, xb).prompted
            f = net.features(xb)
            pred = net.backbone.head(f).argmax(1)
            feats.append(f)
            correct += (pred == y[start:start + batch_size]).tolist()
    return FeatureExport(torch.cat(feats).double().numpy(), y.numpy(), [dataset.name] * len(y),
                         idx.tolist(), [bool(c) for c in correct])
