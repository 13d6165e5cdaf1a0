"""Multi-domain datasets, leave-one-domain-out splits and synthetic domains."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigurationError, DatasetError, InconsistentClasses

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
SHAPE_CLASSES = ("circle", "square", "triangle", "plus", "ring", "diamond", "bar")


@dataclass
class DomainDataset:
    """Labeled images of one domain with a fixed train/val partition."""

    name: str
    images: torch.Tensor  # M x C x H x W, float32 in image units
    labels: torch.Tensor  # M, int64
    class_names: list[str]
    train_idx: torch.Tensor = field(default=None)  # type: ignore[assignment]
    val_idx: torch.Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.labels = self.labels.long()
        k = len(self.class_names)
        if len(self.images) != len(self.labels):
            raise ConfigurationError(f"domain {self.name!r}: {len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ConfigurationError(f"domain {self.name!r}: labels outside [0, {k})")
        if self.train_idx is None or self.val_idx is None:
            self.train_idx, self.val_idx = split_indices(len(self.labels), 0.1, seed=0)
        if set(self.train_idx.tolist()) & set(self.val_idx.tolist()):
            raise ConfigurationError(f"domain {self.name!r}: train and val splits overlap")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def subset(self, split: str) -> tuple[torch.Tensor, torch.Tensor]:
        """``(images, labels)`` of ``"train"``, ``"val"`` or ``"all"``."""
        if split == "all":
            return self.images, self.labels
        idx = {"train": self.train_idx, "val": self.val_idx}[split]
        return self.images[idx], self.labels[idx]

    def resplit(self, val_fraction: float, seed: int) -> "DomainDataset":
        train, val = split_indices(len(self), val_fraction, seed)
        return DomainDataset(self.name, self.images, self.labels, list(self.class_names), train, val)


@dataclass
class LodoSplit:
    target: DomainDataset
    sources: list[DomainDataset]

    def __post_init__(self):
        if not self.sources:
            raise ConfigurationError("a leave-one-domain-out split needs at least one source domain")
        if self.target.name in [s.name for s in self.sources]:
            raise ConfigurationError(f"target {self.target.name!r} also listed as a source")

    @property
    def source_names(self) -> list[str]:
        return [s.name for s in self.sources]


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    if not 0 <= val_fraction < 1:
        raise ConfigurationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(int(seed)))
    n_val = int(round(n * val_fraction))
    return perm[n_val:].sort().values, perm[:n_val].sort().values


def lodo_splits(domains: Sequence[DomainDataset]) -> list[LodoSplit]:
    """One split per domain; sources keep the input order minus the target."""
    if len(domains) < 2:
        raise ConfigurationError("leave-one-domain-out needs at least two domains")
    return [LodoSplit(d, [s for s in domains if s is not d]) for d in domains]


# --------------------------------------------------------------------------
# folder layout: root/<domain>/<class>/<image files>
# --------------------------------------------------------------------------

def _read_image(path: Path, size: Optional[int]) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a zoo of types
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def load_folder_dataset(root: str | Path, image_size: Optional[int] = None,
                        val_fraction: float = 0.1, seed: int = 0) -> list[DomainDataset]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not domain_dirs:
        raise DatasetError(f"no domain directories under {root}")
    class_sets = {d.name: sorted(c.name for c in d.iterdir() if c.is_dir()) for d in domain_dirs}
    reference = class_sets[domain_dirs[0].name]
    for name, classes in class_sets.items():
        if classes != reference:
            extra = sorted(set(classes) - set(reference))
            missing = sorted(set(reference) - set(classes))
            raise InconsistentClasses(
                f"domain {name!r} has classes differing from {domain_dirs[0].name!r}: "
                f"extra={extra} missing={missing}"
            )

    out = []
    for i, ddir in enumerate(domain_dirs):
        images, labels = [], []
        for label, cname in enumerate(reference):
            for f in sorted((ddir / cname).iterdir()):
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    images.append(_read_image(f, image_size))
                    labels.append(label)
        if images:
            shapes = {a.shape for a in images}
            if len(shapes) != 1:
                raise DatasetError(f"domain {ddir.name!r} mixes image shapes {sorted(shapes)}; pass image_size")
            x = torch.from_numpy(np.stack(images))
        else:
            x = torch.zeros((0, 3, image_size or 1, image_size or 1))
        y = torch.tensor(labels, dtype=torch.long)
        train, val = split_indices(len(y), val_fraction, seed + i)
        out.append(DomainDataset(ddir.name, x, y, list(reference), train, val))
    return out


def dataset_manifest(domains: Sequence[DomainDataset]) -> dict:
    """Counts per domain/class, image shapes and content checksums."""
    entries = []
    for d in domains:
        counts = torch.bincount(d.labels, minlength=d.num_classes).tolist()
        h = hashlib.sha256(d.images.contiguous().numpy().tobytes())
        h.update(d.labels.numpy().tobytes())
        entries.append({
            "domain": d.name,
            "num_samples": len(d),
            "num_train": len(d.train_idx),
            "num_val": len(d.val_idx),
            "class_counts": dict(zip(d.class_names, counts)),
            "image_shape": list(d.image_shape),
            "sha256": h.hexdigest(),
        })
    return {"domains": entries, "classes": list(domains[0].class_names) if domains else []}


def write_manifest(domains: Sequence[DomainDataset], path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataset_manifest(domains), indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# procedural shapes
# --------------------------------------------------------------------------

def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    d = np.hypot(u, v)
    if kind == "circle":
        return d <= r
    if kind == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8 * r
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if kind == "plus":
        arm = 0.3 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.35 * r)
    if kind == "triangle":
        # equilateral, apex up, circumradius r
        inside = v <= 0.5 * r
        for ang in (math.radians(30), math.radians(150)):
            nx, ny = math.cos(ang), -math.sin(ang)
            inside &= (u * nx + v * ny) <= 0.5 * r
        return inside
    raise ConfigurationError(f"unknown shape {kind!r}")


def make_shapes(n_per_class: int, size: int = 32, seed: int = 0,
                classes: Sequence[str] = SHAPE_CLASSES,
                radius: tuple[float, float] = (5.5, 8.5)) -> tuple[torch.Tensor, torch.Tensor]:
    """Render ``n_per_class`` photo-like images of each shape class.

    Backgrounds are low-saturation with a smooth illumination gradient and
    pixel noise; shapes get a saturated random colour, random position,
    size and a small rotation.  Output is ``(images, labels)`` with images in
    ``[0, 1]``, ordered class-major.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    images, labels = [], []
    for label, kind in enumerate(classes):
        for _ in range(n_per_class):
            gray = rng.uniform(0.35, 0.8)
            tint = rng.uniform(-0.06, 0.06, size=3)
            grad_dir = rng.uniform(0, 2 * math.pi)
            ramp = (np.cos(grad_dir) * (xx - size / 2) + np.sin(grad_dir) * (yy - size / 2)) / size
            bg = gray + tint[:, None, None] + 0.2 * ramp[None]

            hue = rng.uniform(0, 1)
            fg = _hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.5, 1.0))
            if abs(float(np.mean(fg)) - gray) < 0.15:
                fg = np.clip(fg + (0.35 if gray < 0.55 else -0.35), 0, 1)

            r = rng.uniform(*radius)
            cx, cy = rng.uniform(size * 0.38, size * 0.62, size=2)
            theta = math.radians(rng.uniform(-15, 15))
            du, dv = xx - cx, yy - cy
            u = math.cos(theta) * du + math.sin(theta) * dv
            v = -math.sin(theta) * du + math.cos(theta) * dv
            m = _shape_mask(kind, u, v, r)

            img = np.where(m[None], fg[:, None, None], bg)
            img = img + rng.normal(0, 0.03, size=img.shape)
            images.append(np.clip(img, 0, 1).astype(np.float32))
            labels.append(label)
    return torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.long)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    import colorsys

    return np.array(colorsys.hsv_to_rgb(h, s, v), dtype=np.float32)


# --------------------------------------------------------------------------
# style transforms; each maps (N x 3 x H x W in [0,1], rng) -> same shape
# --------------------------------------------------------------------------

class Style:
    name = "style"

    def __call__(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class Identity(Style):
    name = "photo"

    def __call__(self, images, rng):
        return images.copy()


def _rotate_hue(images: np.ndarray, angle: float, sat_scale: float) -> np.ndarray:
    # rotate chroma about the gray axis and rescale it
    gray = images.mean(axis=1, keepdims=True)
    chroma = images - gray
    axis = np.ones(3) / math.sqrt(3)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
    chroma = np.einsum("ij,njhw->nihw", rot, chroma) * sat_scale
    return gray + chroma


class HueSaturationShift(Style):
    """Art-like: hue rotation, saturation boost and a brush-stroke texture."""

    name = "art"

    def __init__(self, strength: float = 1.0):
        self.strength = strength

    def __call__(self, images, rng):
        s = self.strength
        out = _rotate_hue(images, angle=math.radians(100 * s), sat_scale=1.0 + 1.5 * s)
        h, w = images.shape[-2:]
        yy, xx = np.mgrid[0:h, 0:w]
        phase = rng.uniform(0, 2 * math.pi, size=(len(images), 1, 1, 1))
        stripes = np.sin(0.45 * (xx + 0.5 * yy)[None, None] + phase)
        out = out + 0.05 * s * stripes
        return np.clip(out, 0, 1).astype(np.float32)


class Quantize(Style):
    """Cartoon-like: flat colours on ``levels`` evenly spaced values."""

    name = "cartoon"

    def __init__(self, levels: int = 4, strength: float = 1.0):
        if levels < 2:
            raise ConfigurationError("quantization needs at least 2 levels")
        self.levels = levels
        self.strength = strength

    def __call__(self, images, rng):
        x = images
        if self.strength > 1:
            # harder variant: push colours towards a warm cast before quantizing
            cast = np.array([0.25, 0.05, -0.2])[None, :, None, None] * (self.strength - 1)
            x = _rotate_hue(x, math.radians(60 * (self.strength - 1)), 1.0) + cast
        q = np.round(np.clip(x, 0, 1) * (self.levels - 1)) / (self.levels - 1)
        return q.astype(np.float32)


class EdgeSketch(Style):
    """Sketch-like: binarized edge map of the smoothed gray image (1 on strokes)."""

    name = "sketch"

    def __init__(self, threshold: float = 0.4, strength: float = 1.0, sigma: float = 1.0):
        self.threshold = threshold
        self.strength = strength
        self.sigma = sigma

    def __call__(self, images, rng):
        gray = ndimage.gaussian_filter(images.mean(axis=1), sigma=(0, self.sigma, self.sigma))
        gx = ndimage.sobel(gray, axis=-1, mode="nearest")
        gy = ndimage.sobel(gray, axis=-2, mode="nearest")
        mag = np.hypot(gx, gy)
        edges = (mag > self.threshold).astype(np.float32)
        if self.strength > 1:
            flip = rng.random(edges.shape) < 0.04 * (self.strength - 1)
            edges = np.where(flip, 1.0 - edges, edges).astype(np.float32)
        return np.repeat(edges[:, None], images.shape[1], axis=1)


def default_styles(strength: float = 1.0) -> list[Style]:
    """Photo, art, cartoon and sketch styles in that order."""
    return [Identity(), HueSaturationShift(strength), Quantize(4, strength), EdgeSketch(strength=strength)]


def make_synthetic_domains(base_images: torch.Tensor, base_labels: torch.Tensor,
                           styles: Sequence[Style | Callable], seed: int = 0,
                           class_names: Optional[Sequence[str]] = None,
                           val_fraction: float = 0.1) -> list[DomainDataset]:
    """Apply every style to every base image; one domain per style.

    The result is a pure function of ``(base, styles, seed)``.
    """
    if len(styles) < 2:
        raise ConfigurationError("at least two styles are needed to build domains")
    base = base_images.detach().cpu().numpy()
    if class_names is None:
        k = int(base_labels.max()) + 1
        class_names = list(SHAPE_CLASSES[:k]) if k <= len(SHAPE_CLASSES) else [str(i) for i in range(k)]
    out = []
    names = []
    for i, style in enumerate(styles):
        rng = np.random.default_rng([seed, i])
        styled = torch.from_numpy(np.ascontiguousarray(style(base, rng), dtype=np.float32))
        name = getattr(style, "name", f"domain{i}")
        if name in names:
            name = f"{name}{i}"
        names.append(name)
        train, val = split_indices(len(base_labels), val_fraction, seed * 1000 + i)
        out.append(DomainDataset(name, styled, base_labels.clone(), list(class_names), train, val))
    return out


def synthetic_shapes_domains(n_per_class: int = 150, size: int = 32, seed: int = 0,
                             strength: float = 1.0, val_fraction: float = 0.1) -> list[DomainDataset]:
    """Shapes rendered with ``seed`` and styled into photo/art/cartoon/sketch."""
    x, y = make_shapes(n_per_class, size, seed)
    return make_synthetic_domains(x, y, default_styles(strength), seed, list(SHAPE_CLASSES), val_fraction)


def color_jitter(images: torch.Tensor, generator: torch.Generator, hue: float = 0.5,
                 saturation=(0.5, 1.6), contrast=(0.6, 1.4), brightness: float = 0.15,
                 grayscale_p: float = 0.2, noise: float = 0.03) -> torch.Tensor:
    """Random per-image colour augmentation used for pretext training.

    Hue is rotated by up to ``hue`` turns about the gray axis; saturation
    and contrast are scaled, brightness shifted, a fraction of images turned
    gray, and Gaussian noise added.  Output is clipped to ``[0, 1]``.
    """
    n = images.shape[0]

    def u(lo, hi):
        return lo + (hi - lo) * torch.rand(n, 1, 1, 1, generator=generator)

    gray = images.mean(dim=1, keepdim=True)
    chroma = images - gray
    angle = u(-hue, hue) * 2 * math.pi
    axis = torch.ones(3) / math.sqrt(3)
    k = torch.tensor([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    eye = torch.eye(3)
    rot = (eye + torch.sin(angle).view(n, 1, 1) * k
           + (1 - torch.cos(angle)).view(n, 1, 1) * (k @ k))
    chroma = torch.einsum("nij,njhw->nihw", rot, chroma) * u(*saturation)
    chroma = torch.where(torch.rand(n, 1, 1, 1, generator=generator) < grayscale_p,
                         torch.zeros_like(chroma), chroma)
    mean = gray.mean(dim=(2, 3), keepdim=True)
    gray = mean + (gray - mean) * u(*contrast) + u(-brightness, brightness)
    out = gray + chroma + noise * torch.randn(images.shape, generator=generator)
    return out.clamp(0, 1)
