"""Procedural source/target domain pairs at desk scale.

K glyph classes are rendered on 16x16 single-channel canvases with
per-sample jitter; the target domain draws from the same renderer and
is then pushed through a configurable shift (rotation, blur, noise,
dimming). Target ground-truth labels are stored but gated behind an
audited evaluation-only accessor, so adaptation code structurally
cannot consume them.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .seeding import derive_rng

__all__ = [
    "CANVAS",
    "GLYPHS",
    "ShiftConfig",
    "DomainDataset",
    "LabelAccessError",
    "DatasetFormatError",
    "DEFAULT_SHIFT",
    "generate_domain_pair",
    "apply_shift",
    "save_dataset",
    "load_dataset",
]

CANVAS = 16  # canvas height == width
DATASET_MAGIC = b"CINDSET1"
DATASET_VERSION = 1


class LabelAccessError(RuntimeError):
    """Hidden labels were accessed through the training-time API."""


class DatasetFormatError(ValueError):
    """Dataset container is malformed or incompatible."""


@dataclass
class ShiftConfig:
    """Domain-shift strength knobs; all zero means target == source
    distribution. ``intensity_scale`` multiplies pixel values, with 0
    (like the other fields) meaning the channel is disabled."""

    rotation_deg: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    intensity_scale: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"ShiftConfig.{name} must be non-negative, got {value}")

    def is_identity(self) -> bool:
        return (
            self.rotation_deg == 0
            and self.blur_sigma == 0
            and self.noise_sigma == 0
            and self.intensity_scale in (0.0, 1.0)
        )


DEFAULT_SHIFT = ShiftConfig(rotation_deg=25.0, blur_sigma=0.8, noise_sigma=0.1, intensity_scale=0.85)


class DomainDataset:
    """Image collection with class labels that may be access-gated.

    Source datasets expose ``labels`` directly. Target datasets raise
    on ``labels`` and only yield them through ``eval_labels()``, which
    counts every read so tests can audit the adaptation protocol.
    """

    def __init__(
        self,
        images: np.ndarray,
        labels: np.ndarray,
        *,
        domain: str,
        num_classes: int,
        provenance: dict,
        labels_hidden: bool = False,
    ):
        if domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
        self.images = np.asarray(images, dtype=np.float32)
        self._labels = np.asarray(labels, dtype=np.int32)
        self.domain = domain
        self.num_classes = int(num_classes)
        self.provenance = provenance
        self.labels_hidden = bool(labels_hidden)
        self.hidden_label_reads = 0

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def labels(self) -> np.ndarray:
        if self.labels_hidden:
            raise LabelAccessError(
                f"labels of the {self.domain} dataset are hidden; "
                "evaluation code must use eval_labels()"
            )
        return self._labels

    def eval_labels(self) -> np.ndarray:
        """Ground-truth labels for evaluation only; every call is counted."""
        self.hidden_label_reads += 1
        return self._labels


# -- glyph renderer -------------------------------------------------------


def _bar(u, v):
    return (np.abs(v) < 0.18) & (np.abs(u) < 0.75)


def _cross(u, v):
    return ((np.abs(v) < 0.16) & (np.abs(u) < 0.70)) | (
        (np.abs(u) < 0.16) & (np.abs(v) < 0.70)
    )


def _ring(u, v):
    r = np.sqrt(u * u + v * v)
    return (r > 0.36) & (r < 0.66)


def _corner(u, v):
    vertical = (np.abs(u + 0.40) < 0.16) & (v > -0.72) & (v < 0.72)
    horizontal = (np.abs(v + 0.40) < 0.16) & (u > -0.72) & (u < 0.72)
    return vertical | horizontal


def _dot_grid(u, v):
    mask = np.zeros_like(u, dtype=bool)
    for cu in (-0.45, 0.0, 0.45):
        for cv in (-0.45, 0.0, 0.45):
            mask |= (u - cu) ** 2 + (v - cv) ** 2 < 0.14**2
    return mask


def _diamond(u, v):
    s = np.abs(u) + np.abs(v)
    return (s > 0.42) & (s < 0.74)


def _tee(u, v):
    top = (v > 0.36) & (v < 0.68) & (np.abs(u) < 0.70)
    stem = (np.abs(u) < 0.16) & (v > -0.70) & (v < 0.50)
    return top | stem


def _stripes(u, v):
    return (np.abs(np.abs(v) - 0.42) < 0.14) & (np.abs(u) < 0.72)


GLYPHS = (_bar, _cross, _ring, _corner, _dot_grid, _diamond, _tee, _stripes)

_GRID_Y, _GRID_X = np.meshgrid(
    np.linspace(-1.0, 1.0, CANVAS), np.linspace(-1.0, 1.0, CANVAS), indexing="ij"
)


def _render_glyph(cls: int, rng: np.random.Generator) -> np.ndarray:
    """One [1,H,W] sample of glyph class ``cls`` with pose/intensity jitter."""
    theta = math.radians(rng.uniform(-12.0, 12.0))
    scale = rng.uniform(0.85, 1.15)
    dx, dy = rng.uniform(-0.12, 0.12, size=2)
    intensity = rng.uniform(0.75, 1.0)

    x = (_GRID_X - dx) / scale
    y = (_GRID_Y - dy) / scale
    u = x * math.cos(theta) + y * math.sin(theta)
    v = -x * math.sin(theta) + y * math.cos(theta)

    img = GLYPHS[cls](u, v).astype(np.float64) * intensity
    img = ndimage.gaussian_filter(img, sigma=0.4)  # soften edges
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None, :, :]


def apply_shift(image: np.ndarray, shift: ShiftConfig, rng: np.random.Generator) -> np.ndarray:
    """Push one [C,H,W] image through the configured domain shift."""
    out = np.asarray(image, dtype=np.float64)
    if shift.rotation_deg > 0:
        out = np.stack(
            [
                ndimage.rotate(ch, shift.rotation_deg, reshape=False, order=1,
                               mode="constant", cval=0.0)
                for ch in out
            ]
        )
    if shift.blur_sigma > 0:
        out = np.stack([ndimage.gaussian_filter(ch, shift.blur_sigma) for ch in out])
    if shift.intensity_scale not in (0.0, 1.0):
        out = out * shift.intensity_scale
    if shift.noise_sigma > 0:
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _balanced_labels(n: int, k: int) -> np.ndarray:
    return (np.arange(n) % k).astype(np.int32)


def generate_domain_pair(
    k: int,
    n_source: int,
    n_target: int,
    shift: ShiftConfig,
    seed: int,
) -> tuple[DomainDataset, DomainDataset]:
    """Render a labeled source set and a label-gated shifted target set.

    Every pixel is a pure function of (k, counts, shift, seed): each
    sample draws from its own derived stream, so generation could run
    per-sample in parallel without changing the output.
    """
    if k < 2:
        raise ValueError(f"need at least 2 classes, got k={k}")
    if k > len(GLYPHS):
        raise ValueError(f"k={k} exceeds the glyph library size ({len(GLYPHS)})")
    if n_source < 2 * k or n_target < 2 * k:
        raise ValueError(
            f"sample counts too small for k={k}: n_source={n_source}, n_target={n_target}"
        )

    def build(domain: str, n: int, apply: bool) -> DomainDataset:
        labels = _balanced_labels(n, k)
        images = np.empty((n, 1, CANVAS, CANVAS), dtype=np.float32)
        for i in range(n):
            rng = derive_rng(seed, domain, i)
            img = _render_glyph(int(labels[i]), rng)
            if apply:
                img = apply_shift(img, shift, rng)
            images[i] = img
        provenance = {
            "generator": "glyphs-v1",
            "k": k,
            "n": n,
            "domain": domain,
            "seed": seed,
            "shift": asdict(shift),
            "canvas": CANVAS,
        }
        return DomainDataset(
            images,
            labels,
            domain=domain,
            num_classes=k,
            provenance=provenance,
            labels_hidden=(domain == "target"),
        )

    source = build("source", n_source, apply=False)
    target = build("target", n_target, apply=True)
    return source, target


# -- container I/O --------------------------------------------------------


def save_dataset(ds: DomainDataset, path) -> None:
    """Versioned binary container; round trips are bit-exact."""
    images = np.ascontiguousarray(ds.images, dtype="<f4")
    n, c, h, w = images.shape
    labels = np.ascontiguousarray(ds._labels, dtype="<i4")
    prov = json.dumps(ds.provenance, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(struct.pack("<5I", ds.num_classes, n, c, h, w))
        fh.write(struct.pack("<BBB", 1, int(ds.labels_hidden), int(ds.domain == "target")))
        fh.write(images.tobytes())
        fh.write(labels.tobytes())
        fh.write(struct.pack("<I", len(prov)))
        fh.write(prov)


def load_dataset(path) -> DomainDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not a dataset file")
    off = len(DATASET_MAGIC)
    view = memoryview(blob)

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(blob):
            raise DatasetFormatError(f"{path}: truncated dataset file")
        chunk = view[off : off + n]
        off += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    k, n, c, h, w = struct.unpack("<5I", take(20))
    labels_present, labels_hidden, is_target = struct.unpack("<BBB", take(3))
    images = np.frombuffer(take(4 * n * c * h * w), dtype="<f4").reshape(n, c, h, w).copy()
    if labels_present:
        labels = np.frombuffer(take(4 * n), dtype="<i4").copy()
    else:
        labels = np.full(n, -1, dtype=np.int32)
    (prov_len,) = struct.unpack("<I", take(4))
    provenance = json.loads(bytes(take(prov_len)).decode("utf-8"))
    if off != len(blob):
        raise DatasetFormatError(f"{path}: trailing bytes after provenance blob")
    return DomainDataset(
        images,
        labels,
        domain="target" if is_target else "source",
        num_classes=k,
        provenance=provenance,
        labels_hidden=bool(labels_hidden),
    )
