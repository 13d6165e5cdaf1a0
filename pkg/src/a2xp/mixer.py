"""Per-image attention over the expert bank.

Images are embedded by ``head_T(shared(x))`` (queries), experts by
``head_E(shared(p))`` (keys).  The raw score of expert ``i`` is the plain dot
product ``q . k_i``; optional ``tanh`` and ``softmax`` (in that order) turn
scores into weights, and the image receives ``x + sum_i w_i p_i``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch
import torch.nn as nn

from .errors import CacheInvalid, ConfigurationError
from .prompts import ExpertBank, PaddingPrompt, tensor_digest

EMBED_DIM = 512


@dataclass(frozen=True)
class MixerConfig:
    use_expert_norm: bool = True
    use_tanh: bool = True
    use_softmax: bool = False

    @property
    def label(self) -> str:
        parts = [n for n, on in (("norm", self.use_expert_norm), ("softmax", self.use_softmax),
                                 ("tanh", self.use_tanh)) if on]
        return "+".join(parts) or "plain"

    @classmethod
    def all_combinations(cls) -> list["MixerConfig"]:
        """The eight flag combinations, in the row order of the ablation table."""
        rows = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 0), (1, 1, 1)]
        return [cls(bool(n), bool(t), bool(s)) for n, s, t in rows]


class MixerHeads(nn.Module):
    """Shared embedder plus the query head ``head_T`` and key head ``head_E``."""

    def __init__(self, shared_embedder: nn.Module, feature_dim: int, embed_dim: int = EMBED_DIM,
                 train_embedder: bool = False, init_scale: float = 1.0):
        super().__init__()
        self.shared_embedder = shared_embedder
        self.head_T = nn.Linear(feature_dim, embed_dim)
        self.head_E = nn.Linear(feature_dim, embed_dim)
        if init_scale != 1.0:
            with torch.no_grad():
                for head in (self.head_T, self.head_E):
                    head.weight.mul_(init_scale)
                    head.bias.mul_(init_scale)
        self.train_embedder = train_embedder
        for p in self.shared_embedder.parameters():
            p.requires_grad_(train_embedder)
        self.shared_embedder.eval()

    @property
    def embed_dim(self) -> int:
        return self.head_T.out_features

    def train(self, mode: bool = True):
        super().train(mode)
        # no stochastic layers at any time: the embedder stays in eval state
        self.shared_embedder.eval()
        return self

    def head_parameters(self) -> list[nn.Parameter]:
        return list(self.head_T.parameters()) + list(self.head_E.parameters())

    def key_token(self, bank: ExpertBank) -> str:
        """Digest of everything the expert keys depend on."""
        tensors = [bank.values]
        tensors += [t for t in self.shared_embedder.state_dict().values()]
        tensors += [self.head_E.weight, self.head_E.bias]
        return tensor_digest(*tensors)


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ConfigurationError(f"expected C x H x W or B x C x H x W input, got {tuple(x.shape)}")


def embed_image(heads: MixerHeads, x: torch.Tensor) -> torch.Tensor:
    """Query vector(s) for an image or a batch of images."""
    xb, single = _as_batch(x)
    q = heads.head_T(heads.shared_embedder(xb))
    return q[0] if single else q


def _embed_expert_values(heads: MixerHeads, values: torch.Tensor) -> torch.Tensor:
    return heads.head_E(heads.shared_embedder(values))


def embed_experts(heads: MixerHeads, bank: ExpertBank) -> torch.Tensor:
    """Compute the ``N x 512`` expert keys and cache them in ``bank``."""
    with torch.no_grad():
        keys = _embed_expert_values(heads, bank.values)
    bank.cached_keys = keys
    bank.cache_token = heads.key_token(bank)
    return keys


def expert_keys(heads: MixerHeads, bank: ExpertBank, use_cache: bool = True) -> torch.Tensor:
    """Cached keys when present (verified fresh), else freshly computed with grad."""
    if use_cache and bank.cached_keys is not None:
        if bank.cache_token != heads.key_token(bank):
            raise CacheInvalid("expert keys are stale: experts or key heads changed since embed_experts")
        return bank.cached_keys
    return _embed_expert_values(heads, bank.values)


def attention_weights(q: torch.Tensor, keys: torch.Tensor,
                      cfg: MixerConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """``(raw_scores, weights)`` for query ``q`` (``d`` or ``B x d``) against ``N x d`` keys."""
    if keys.dim() != 2 or keys.shape[0] == 0:
        raise ConfigurationError("attention needs at least one key")
    if q.shape[-1] != keys.shape[-1]:
        raise ConfigurationError(f"query dim {q.shape[-1]} != key dim {keys.shape[-1]}")
    raw = q @ keys.transpose(0, 1)
    w = raw
    if cfg.use_tanh:
        w = torch.tanh(w)
    if cfg.use_softmax:
        w = torch.softmax(w, dim=-1)
    return raw, w


def mix_experts(bank: ExpertBank | torch.Tensor, weights: torch.Tensor):
    """Weighted sum of experts.

    A 1-D weight vector returns a :class:`PaddingPrompt`; a ``B x N`` weight
    matrix returns the ``B x C x H x W`` stack of per-image prompts.
    """
    values = bank.values if isinstance(bank, ExpertBank) else bank
    if weights.shape[-1] != values.shape[0]:
        raise ConfigurationError(f"{weights.shape[-1]} weights for {values.shape[0]} experts")
    mixed = torch.tensordot(weights.to(values.dtype), values, dims=([weights.dim() - 1], [0]))
    if weights.dim() == 1 and isinstance(bank, ExpertBank):
        return PaddingPrompt(mixed.detach(), bank.border_width, bank.mask.clone())
    return mixed


@dataclass
class AttentionRecord:
    weights: list[float]
    raw_scores: list[float]
    sample_id: int
    domain_name: str
    predicted_class: Optional[int] = None
    true_class: Optional[int] = None
    target_domain: Optional[str] = None

    @property
    def correct(self) -> Optional[bool]:
        if self.predicted_class is None or self.true_class is None:
            return None
        return self.predicted_class == self.true_class


@dataclass
class MixResult:
    prompted: torch.Tensor
    weights: torch.Tensor
    raw_scores: torch.Tensor
    prompts: torch.Tensor = field(repr=False, default=None)  # type: ignore[assignment]

    def records(self, sample_ids: Optional[Sequence[int]] = None, domain_name: str = "",
                predicted: Optional[Sequence[int]] = None, true: Optional[Sequence[int]] = None,
                target_domain: Optional[str] = None) -> list[AttentionRecord]:
        n = self.weights.shape[0]
        ids = list(sample_ids) if sample_ids is not None else list(range(n))
        w = self.weights.detach().double().tolist()
        r = self.raw_scores.detach().double().tolist()
        return [AttentionRecord(w[i], r[i], int(ids[i]), domain_name,
                                None if predicted is None else int(predicted[i]),
                                None if true is None else int(true[i]), target_domain)
                for i in range(n)]


def check_weight_bounds(weights: torch.Tensor, cfg: MixerConfig, tol: float = 1e-6) -> None:
    if cfg.use_softmax:
        if torch.any(weights < 0) or torch.any((weights.sum(-1) - 1).abs() > tol):
            raise AssertionError("softmax weights must be non-negative and sum to one")
    elif cfg.use_tanh:
        if torch.any(weights.abs() > 1):
            raise AssertionError("tanh weights must lie in [-1, 1]")


def forward(heads: MixerHeads, bank: ExpertBank, cfg: MixerConfig, x: torch.Tensor,
            use_cache: bool = True, check: bool = False) -> MixResult:
    """Prompt every image of ``x`` with its own mixture of the bank's experts."""
    if bank.normalized != cfg.use_expert_norm:
        raise ConfigurationError(
            f"bank normalized={bank.normalized} but mixer config use_expert_norm={cfg.use_expert_norm}"
        )
    xb, _ = _as_batch(x)
    if xb.shape[1:] != bank.values.shape[1:]:
        raise ConfigurationError(f"image shape {tuple(xb.shape[1:])} != expert shape {tuple(bank.values.shape[1:])}")
    keys = expert_keys(heads, bank, use_cache)
    q = embed_image(heads, xb)
    raw, w = attention_weights(q, keys, cfg)
    if check:
        check_weight_bounds(w, cfg)
    prompts = mix_experts(bank.values, w)
    return MixResult(xb + prompts, w, raw, prompts)


ATTENTION_CSV_FLOAT = "{:.9g}"


def write_attention_csv(records: Iterable[AttentionRecord], path: str | Path) -> int:
    """Write records as ``sample_id, domain, target_domain, expert_*, raw_*, correct``."""
    records = list(records)
    n = len(records[0].weights) if records else 0
    header = (["sample_id", "domain", "target_domain"] + [f"expert_{i + 1}" for i in range(n)]
              + [f"raw_{i + 1}" for i in range(n)] + ["correct"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            c = r.correct
            w.writerow([r.sample_id, r.domain_name, r.target_domain or ""]
                       + [ATTENTION_CSV_FLOAT.format(v) for v in r.weights]
                       + [ATTENTION_CSV_FLOAT.format(v) for v in r.raw_scores]
                       + ["" if c is None else int(c)])
    return len(records)
