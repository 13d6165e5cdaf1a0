"""Additive border ("padding") prompts and the expert bank.

A prompt is stored as a full ``C x H x W`` tensor together with a boolean
mask that is true on a frame of ``border_width`` pixels.  Values outside the
frame are kept at exactly zero; optimizers that train a prompt call
:func:`project_` after every step to enforce that.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import torch

from .errors import ConfigurationError, DegenerateExpert

NORM_EPS = 1e-8
INIT_KINDS = ("zero", "uniform", "normal", "meta")


def border_mask(shape: Sequence[int], border_width: int) -> torch.Tensor:
    """Boolean ``C x H x W`` mask, true on the frame of width ``border_width``."""
    c, h, w = (int(s) for s in shape)
    b = int(border_width)
    if b < 1 or 2 * b >= min(h, w):
        raise ConfigurationError(
            f"border_width={b} invalid for image {h}x{w}: need 1 <= b and 2b < min(H, W)"
        )
    rows = torch.arange(h)
    cols = torch.arange(w)
    row_edge = (rows < b) | (rows >= h - b)
    col_edge = (cols < b) | (cols >= w - b)
    frame = row_edge[:, None] | col_edge[None, :]
    return frame.expand(c, h, w).clone()


def trainable_count(shape: Sequence[int], border_width: int) -> int:
    """Number of trainable entries, ``C * (H*W - (H-2b)*(W-2b))``."""
    c, h, w = (int(s) for s in shape)
    b = int(border_width)
    return c * (h * w - (h - 2 * b) * (w - 2 * b))


@dataclass
class PaddingPrompt:
    values: torch.Tensor
    border_width: int
    mask: torch.Tensor = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ConfigurationError(f"prompt values must be C x H x W, got {tuple(self.values.shape)}")
        expected = border_mask(self.values.shape, self.border_width)
        if self.mask is None:
            self.mask = expected
        elif not torch.equal(self.mask.bool(), expected):
            raise ConfigurationError("mask does not match border_width")
        if torch.any(self.values[~self.mask] != 0):
            raise ConfigurationError("prompt has non-zero values outside the border")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]

    @property
    def num_trainable(self) -> int:
        return int(self.mask.sum())

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.values.double()))

    def clone(self) -> "PaddingPrompt":
        return PaddingPrompt(self.values.detach().clone(), self.border_width, self.mask.clone())

    @classmethod
    def zeros(cls, shape: Sequence[int], border_width: int, dtype=torch.float32) -> "PaddingPrompt":
        return cls(torch.zeros(tuple(shape), dtype=dtype), border_width)


@dataclass(frozen=True)
class InitStrategy:
    kind: str = "zero"
    scale: float = 0.03
    meta_source: Optional[PaddingPrompt] = None

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ConfigurationError(f"unknown init strategy {self.kind!r}; expected one of {INIT_KINDS}")
        if self.kind in ("uniform", "normal") and not self.scale > 0:
            raise ConfigurationError(f"{self.kind} init needs scale > 0, got {self.scale}")
        if self.kind == "meta" and self.meta_source is None:
            raise ConfigurationError("meta init requires a meta_source prompt")


def init_prompt(shape: Sequence[int], border_width: int, strategy: InitStrategy,
                rng_seed: int = 0) -> PaddingPrompt:
    mask = border_mask(shape, border_width)
    values = torch.zeros(tuple(shape), dtype=torch.float32)
    gen = torch.Generator().manual_seed(int(rng_seed))
    if strategy.kind == "uniform":
        values = (torch.rand(values.shape, generator=gen) * 2 - 1) * strategy.scale
    elif strategy.kind == "normal":
        values = torch.randn(values.shape, generator=gen) * strategy.scale
    elif strategy.kind == "meta":
        src = strategy.meta_source
        if tuple(src.values.shape) != tuple(shape):
            raise ConfigurationError(
                f"meta prompt shape {tuple(src.values.shape)} != requested {tuple(shape)}"
            )
        values = src.values.detach().clone().float()
    values = values * mask
    return PaddingPrompt(values, border_width, mask)


def normalize_expert(p: PaddingPrompt, eps: float = NORM_EPS) -> PaddingPrompt:
    """Scale a prompt to unit L2 norm.

    Raises :class:`DegenerateExpert` when the norm is below ``eps``: a zero
    expert means adaptation never moved it, and there is no direction to keep.
    """
    norm = torch.linalg.vector_norm(p.values)
    if not float(norm) > eps:
        raise DegenerateExpert(f"expert norm {float(norm):.3e} <= {eps:g}; adaptation did not move it")
    return PaddingPrompt((p.values / norm).detach(), p.border_width, p.mask.clone())


def apply_prompt(x: torch.Tensor, p: PaddingPrompt | torch.Tensor) -> torch.Tensor:
    values = p.values if isinstance(p, PaddingPrompt) else p
    if x.shape[-3:] != values.shape[-3:]:
        raise ConfigurationError(
            f"image shape {tuple(x.shape[-3:])} does not match prompt shape {tuple(values.shape[-3:])}"
        )
    return x + values


def project_(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero the interior of ``values`` in place (works on batched tensors too)."""
    with torch.no_grad():
        values.mul_(mask.to(values.dtype))
    return values


def tensor_digest(*tensors: torch.Tensor) -> str:
    h = hashlib.sha256()
    for t in tensors:
        t = t.detach().cpu().contiguous()
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class ExpertBank:
    """Ordered experts stacked into an ``N x C x H x W`` tensor.

    ``normalized`` records whether the experts were divided by their norms at
    construction.  ``cached_keys`` is filled by ``mixer.embed_experts`` and is
    only valid while ``cache_token`` matches the current experts and heads.
    """

    values: torch.Tensor
    domain_names: list[str]
    border_width: int
    normalized: bool = True
    cached_keys: Optional[torch.Tensor] = field(default=None, repr=False)
    cache_token: Optional[str] = field(default=None, repr=False)

    def __post_init__(self):
        if self.values.dim() != 4 or self.values.shape[0] < 1:
            raise ConfigurationError("expert bank needs an N x C x H x W tensor with N >= 1")
        if len(self.domain_names) != self.values.shape[0]:
            raise ConfigurationError("one domain name per expert is required")
        self.mask = border_mask(self.values.shape[1:], self.border_width)
        if torch.any(self.values[:, ~self.mask] != 0):
            raise ConfigurationError("expert has non-zero values outside the border")

    @classmethod
    def from_prompts(cls, prompts: Sequence[PaddingPrompt], domain_names: Sequence[str],
                     normalize: bool = True) -> "ExpertBank":
        if not prompts:
            raise ConfigurationError("expert bank needs at least one expert")
        widths = {p.border_width for p in prompts}
        if len(widths) != 1:
            raise ConfigurationError(f"experts disagree on border width: {sorted(widths)}")
        if normalize:
            prompts = [normalize_expert(p) for p in prompts]
        values = torch.stack([p.values.detach() for p in prompts])
        return cls(values, list(domain_names), widths.pop(), normalized=normalize)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def experts(self) -> list[PaddingPrompt]:
        return [PaddingPrompt(v.detach().clone(), self.border_width, self.mask.clone()) for v in self.values]

    def set_expert(self, i: int, p: PaddingPrompt) -> None:
        with torch.no_grad():
            self.values[i] = p.values

    def norms(self) -> torch.Tensor:
        return torch.linalg.vector_norm(self.values.flatten(1).double(), dim=1)

    def permuted(self, order: Sequence[int]) -> "ExpertBank":
        order = list(order)
        return ExpertBank(self.values[order].clone(), [self.domain_names[i] for i in order],
                          self.border_width, self.normalized)

    def digest(self) -> str:
        return tensor_digest(self.values)

    def invalidate_cache(self) -> None:
        self.cached_keys = None
        self.cache_token = None


def save_prompt(path: str | Path, prompt: PaddingPrompt, **metadata: Any) -> None:
    """Write a prompt checkpoint: values, mask and a JSON-able metadata record."""
    meta = {
        "border_width": prompt.border_width,
        "shape": list(prompt.shape),
        **metadata,
    }
    json.dumps(meta)  # fail early on non-serializable metadata
    payload = {"values": prompt.values.detach().cpu().contiguous(),
               "mask": prompt.mask.cpu().contiguous(),
               "metadata": meta}
    torch.save(payload, str(path))


def load_prompt(path: str | Path) -> tuple[PaddingPrompt, dict]:
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    meta = payload["metadata"]
    prompt = PaddingPrompt(payload["values"], int(meta["border_width"]), payload["mask"])
    return prompt, meta
