"""The frozen objective classifier, its tuning modes, and the KL training loss."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

TUNING_MODES = ("frozen", "linear_probe", "full_tune")
KL_DIRECTIONS = ("target_to_model", "model_to_target")


class SmallCNN(nn.Module):
    """Three strided conv layers, global average pooling and a linear classifier.

    ``features`` returns the pooled last-hidden-layer activations; the
    classifier is kept separate as ``head`` so it can be probed on its own.
    """

    def __init__(self, num_classes: int = 7, in_channels: int = 3, widths=(16, 32, 64),
                 batch_norm: bool = True):
        super().__init__()
        c1, c2, c3 = widths
        norm = nn.BatchNorm2d if batch_norm else (lambda c: nn.Identity())
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, c1, 5, stride=2, padding=2), norm(c1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), norm(c2), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), norm(c3), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.feature_dim = c3
        self.head = nn.Linear(c3, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


BACKBONES = {
    "small_cnn": SmallCNN,
    "tiny_cnn": lambda num_classes=7, in_channels=3: SmallCNN(num_classes, in_channels, (8, 16, 32), False),
}


def build_backbone(name: str, num_classes: int, in_channels: int = 3) -> nn.Module:
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise ConfigurationError(f"unknown backbone {name!r}; known: {sorted(BACKBONES)}") from None
    return factory(num_classes=num_classes, in_channels=in_channels)


class ObjectiveNetwork(nn.Module):
    """Adapter around a classifier exposing ``features``/``head``.

    ``tuning_mode`` decides which parameters may receive gradients:
    ``frozen`` none, ``linear_probe`` only the final linear layer,
    ``full_tune`` all of them.
    """

    def __init__(self, backbone: nn.Module, tuning_mode: str = "frozen", backbone_id: str = "custom"):
        super().__init__()
        self.backbone = backbone
        self.backbone_id = backbone_id
        self.num_classes = backbone.head.out_features
        self.set_tuning_mode(tuning_mode)

    def set_tuning_mode(self, mode: str) -> None:
        if mode not in TUNING_MODES:
            raise ConfigurationError(f"unknown tuning mode {mode!r}; expected one of {TUNING_MODES}")
        self.tuning_mode = mode
        for p in self.backbone.parameters():
            p.requires_grad_(mode == "full_tune")
        if mode == "linear_probe":
            for p in self.backbone.head.parameters():
                p.requires_grad_(True)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone.features(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)


def predict(net: ObjectiveNetwork, x: torch.Tensor) -> torch.Tensor:
    """Logits of ``net`` on a (prompted) batch, in evaluation state."""
    if x.dim() != 4:
        raise ConfigurationError(f"expected a B x C x H x W batch, got shape {tuple(x.shape)}")
    net.eval()
    with torch.no_grad():
        logits = net(x)
    return logits


def parameter_digest(params: Iterable[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        t = p.detach().cpu().contiguous()
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def network_digest(net: nn.Module) -> str:
    return parameter_digest(net.state_dict().values())


def non_head_digest(net: ObjectiveNetwork) -> str:
    return parameter_digest(v for k, v in net.state_dict().items() if not k.startswith("backbone.head."))


@dataclass(frozen=True)
class LossConfig:
    """KL divergence to a label-smoothed one-hot target.

    The target puts ``1 - smoothing`` on the true class and
    ``smoothing / (K - 1)`` on every other class.  ``direction`` selects
    ``KL(target || model)`` (cross-entropy up to a constant, the default) or
    ``KL(model || target)``.
    """

    kind: str = "kl_smoothed"
    smoothing: float = 0.05
    direction: str = "target_to_model"

    def __post_init__(self):
        if self.kind != "kl_smoothed":
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if not 0 <= self.smoothing < 0.5:
            raise ConfigurationError(f"smoothing must be in [0, 0.5), got {self.smoothing}")
        if self.direction not in KL_DIRECTIONS:
            raise ConfigurationError(f"unknown KL direction {self.direction!r}")


def smoothed_targets(labels: torch.Tensor, num_classes: int, smoothing: float) -> torch.Tensor:
    if num_classes < 2:
        raise ConfigurationError("label smoothing needs at least two classes")
    off = smoothing / (num_classes - 1)
    t = torch.full((len(labels), num_classes), off, dtype=torch.float64)
    t.scatter_(1, labels.view(-1, 1).long(), 1.0 - smoothing)
    return t


def loss(logits: torch.Tensor, labels: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Batch-mean KL divergence between the model distribution and the smoothed target."""
    k = logits.shape[-1]
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ConfigurationError(f"labels must lie in [0, {k})")
    log_p = F.log_softmax(logits, dim=-1)
    target = smoothed_targets(labels, k, cfg.smoothing).to(log_p.dtype)
    # xlogy treats 0 * log 0 as 0
    if cfg.direction == "target_to_model":
        per_sample = (torch.special.xlogy(target, target) - target * log_p).sum(-1)
    else:
        p = log_p.exp()
        per_sample = (p * (log_p - torch.log(target))).sum(-1)
    return per_sample.mean()


def pretrain_backbone(backbone: nn.Module, images: torch.Tensor, labels: torch.Tensor,
                      steps: int = 1500, batch_size: int = 64, lr: float = 3e-3,
                      seed: int = 0, augment=None) -> list[float]:
    """Supervised pretext training standing in for large-scale pretraining.

    ``augment(batch, generator)`` is applied to every mini-batch when given.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(backbone.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    backbone.train()
    n = len(labels)
    perm = torch.randperm(n, generator=gen)
    pos = 0
    curve = []
    for _ in range(steps):
        if pos + batch_size > n:
            perm = torch.randperm(n, generator=gen)
            pos = 0
        idx = perm[pos:pos + batch_size]
        pos += batch_size
        x = images[idx] if augment is None else augment(images[idx], gen)
        opt.zero_grad()
        out = F.cross_entropy(backbone(x), labels[idx])
        out.backward()
        opt.step()
        sched.step()
        out = out.detach()
        curve.append(out.item())
    backbone.eval()
    return curve
