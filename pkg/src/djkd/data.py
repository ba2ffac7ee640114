"""Dataset scanning, loading, splitting, augmentation and synthetic lesions."""
from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import ConfigurationError, DataIOError

log = logging.getLogger(__name__)

CLASSES = ("benign", "malignant", "normal")
LESION_CLASSES = ("benign", "malignant")

_BUSI_IMAGE = re.compile(r"^(?P<cls>benign|malignant|normal) \((?P<n>\d+)\)\.png$")
_BUSI_MASK = re.compile(r"^(?P<stem>.+)_mask(?:_\d+)?\.png$")


@dataclass(frozen=True)
class DatasetRecord:
    image_path: str
    mask_paths: tuple[str, ...]
    class_label: str
    split: str | None = None

    def __post_init__(self):
        if not self.mask_paths:
            raise ConfigurationError(f"{self.image_path}: record needs at least one mask")
        if self.class_label not in CLASSES:
            raise ConfigurationError(f"{self.image_path}: unknown class {self.class_label!r}")

    @property
    def ident(self) -> str:
        return self.image_path

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_paths"] = list(self.mask_paths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        return cls(d["image_path"], tuple(d["mask_paths"]), d["class_label"], d.get("split"))


class Manifest(list):
    """Records in canonical (path-sorted) order plus the files that were rejected."""

    def __init__(self, records: Iterable[DatasetRecord] = (), rejects: Iterable[tuple[str, str]] = ()):
        super().__init__(sorted(records, key=lambda r: r.image_path))
        self.rejects = list(rejects)


@dataclass
class SegSample:
    image: np.ndarray  # (3, S, S) float32 in [0, 1]
    mask: np.ndarray  # (1, S, S) float32 in {0, 1}
    class_label: str
    ident: str = ""


@dataclass
class SegBatch:
    images: torch.Tensor
    masks: torch.Tensor
    labels: list[str] = field(default_factory=list)

    @classmethod
    def from_samples(cls, samples: Sequence[SegSample]) -> "SegBatch":
        images = torch.from_numpy(np.stack([s.image for s in samples])).float()
        masks = torch.from_numpy(np.stack([s.mask for s in samples])).float()
        return cls(images, masks, [s.class_label for s in samples])

    def __len__(self) -> int:
        return self.images.shape[0]


def scan_busi(root: str | Path, include_normal: bool = False) -> Manifest:
    """Enumerate ``<class>/<class> (<n>).png`` images and their ``_mask*.png`` files."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} does not exist")
    classes = CLASSES if include_normal else LESION_CLASSES
    records, rejects = [], []
    for cls in classes:
        folder = root / cls
        if not folder.is_dir():
            continue
        masks: dict[str, list[Path]] = {}
        images = []
        for f in sorted(folder.iterdir()):
            m = _BUSI_MASK.match(f.name)
            if m:
                masks.setdefault(m["stem"], []).append(f)
            elif _BUSI_IMAGE.match(f.name) and _BUSI_IMAGE.match(f.name)["cls"] == cls:
                images.append(f)
        for img in images:
            found = sorted(masks.get(img.stem, []))
            if not found:
                rejects.append((str(img), "no mask file"))
                log.warning("no mask for %s", img)
                continue
            records.append(DatasetRecord(str(img), tuple(str(p) for p in found), cls))
    return Manifest(records, rejects)


@dataclass(frozen=True)
class LayoutDescriptor:
    """Flat layout: images and masks in two folders, classes from a CSV (``image,class``)."""

    image_dir: str = "original"
    mask_dir: str = "GT"
    labels_file: str = "labels.csv"
    mask_suffix: str = ""


def scan_layout(root: str | Path, layout: LayoutDescriptor | None = None,
                include_normal: bool = False) -> Manifest:
    """Scanner for Dataset-B-style corpora described by a :class:`LayoutDescriptor`."""
    layout = layout or LayoutDescriptor()
    root = Path(root)
    labels_path = root / layout.labels_file
    if not labels_path.is_file():
        raise ConfigurationError(f"label file {labels_path} does not exist")
    records, rejects = [], []
    with labels_path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            name, cls = row["image"].strip(), row["class"].strip().lower()
            if cls not in CLASSES:
                rejects.append((name, f"unknown class {cls!r}"))
                continue
            if cls == "normal" and not include_normal:
                continue
            img = root / layout.image_dir / name
            stem, suffix = Path(name).stem, Path(name).suffix
            mask = root / layout.mask_dir / f"{stem}{layout.mask_suffix}{suffix}"
            if not img.is_file():
                rejects.append((str(img), "image missing"))
            elif not mask.is_file():
                rejects.append((str(img), "no mask file"))
            else:
                records.append(DatasetRecord(str(img), (str(mask),), cls))
    return Manifest(records, rejects)


def write_manifest(records: Iterable[DatasetRecord], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> Manifest:
    lines = Path(path).read_text().splitlines()
    return Manifest(DatasetRecord.from_dict(json.loads(line)) for line in lines if line.strip())


def _open(path: str) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc


def load_sample(record: DatasetRecord, resolution: int = 512) -> SegSample:
    """Resize to ``resolution`` square; grayscale is replicated to three channels."""
    img = _open(record.image_path)
    if img.mode in ("RGB", "RGBA", "P", "CMYK", "YCbCr"):
        arr = np.asarray(img.convert("RGB").resize((resolution, resolution), Image.BILINEAR))
        image = arr.transpose(2, 0, 1).astype(np.float32) / 255.0
    else:
        arr = np.asarray(img.convert("L").resize((resolution, resolution), Image.BILINEAR))
        image = np.repeat(arr[None].astype(np.float32) / 255.0, 3, axis=0)
    mask = np.zeros((resolution, resolution), dtype=bool)
    for mp in record.mask_paths:
        m = _open(mp).convert("L").resize((resolution, resolution), Image.NEAREST)
        mask |= np.asarray(m).astype(np.float32) / 255.0 >= 0.5
    return SegSample(np.ascontiguousarray(image), mask[None].astype(np.float32),
                     record.class_label, record.ident)


def load_samples(records: Iterable[DatasetRecord], resolution: int = 512) -> list[SegSample]:
    return [load_sample(r, resolution) for r in records]


@dataclass(frozen=True)
class SplitPlan:
    train_classes: tuple[str, ...] = LESION_CLASSES
    test_classes: tuple[str, ...] = LESION_CLASSES
    train_fraction: float = 0.8
    seed: int = 42

    @classmethod
    def named(cls, train: str, test: str, train_fraction: float = 0.8, seed: int = 42) -> "SplitPlan":
        """``train``/``test`` are a class name or ``"all"``."""
        return cls(expand_classes(train), expand_classes(test), train_fraction, seed)


def expand_classes(name: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(name, str):
        return LESION_CLASSES if name == "all" else (name,)
    return tuple(name)


def make_splits(items: Sequence, plan: SplitPlan) -> tuple[list, list]:
    """Class-stratified shuffle split; class filters are applied after partitioning.

    ``items`` are :class:`DatasetRecord` or :class:`SegSample` objects.
    """
    if not 0 < plan.train_fraction < 1:
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {plan.train_fraction}")
    by_class: dict[str, list] = {}
    for item in sorted(items, key=lambda it: it.ident):
        by_class.setdefault(item.class_label, []).append(item)
    for cls in set(plan.train_classes) | set(plan.test_classes):
        if cls not in by_class:
            raise ConfigurationError(f"requested class {cls!r} is absent from the records")
    rng = np.random.default_rng(plan.seed)
    train, test = [], []
    for cls in sorted(by_class):
        group = by_class[cls]
        order = rng.permutation(len(group))
        n_train = int(np.floor(len(group) * plan.train_fraction + 0.5))
        if len(group) >= 2:
            n_train = min(max(n_train, 1), len(group) - 1)
        part_train = [group[i] for i in order[:n_train]]
        part_test = [group[i] for i in order[n_train:]]
        if cls in plan.train_classes:
            train += [_tag(it, "train") for it in part_train]
        if cls in plan.test_classes:
            test += [_tag(it, "test") for it in part_test]
    return train, test


def _tag(item, split: str):
    return replace(item, split=split) if isinstance(item, DatasetRecord) else item


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0  # degrees
    brightness: float = 1.0

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(
            hflip=bool(rng.random() < 0.5),
            vflip=bool(rng.random() < 0.5),
            angle=float(rng.uniform(-10.0, 10.0)),
            brightness=float(rng.uniform(0.9, 1.1)),
        )


def warp(arr: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Geometric part of the augmentation on a (C, H, W) array (bilinear rotation)."""
    out = arr
    if params.hflip:
        out = out[:, :, ::-1]
    if params.vflip:
        out = out[:, ::-1, :]
    if params.angle != 0.0:
        out = ndimage.rotate(out, params.angle, axes=(2, 1), reshape=False, order=1,
                             mode="constant", cval=0.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(sample: SegSample, seed: int | None = None, params: AugmentParams | None = None) -> SegSample:
    """Random flips, +-10 degree rotation and +-10% brightness; the mask is re-binarised."""
    if params is None:
        params = AugmentParams.draw(np.random.default_rng(seed))
    image = np.clip(warp(sample.image, params) * params.brightness, 0.0, 1.0).astype(np.float32)
    mask = (warp(sample.mask, params) >= 0.5).astype(np.float32)
    return replace(sample, image=image, mask=mask)


def _ellipse_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    a, b = rng.uniform(0.12, 0.28, size=2) * size
    theta = rng.uniform(0.0, np.pi)
    margin = max(a, b) + 2
    cy, cx = rng.uniform(margin, size - margin, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    return u * u + v * v <= 1.0


def _star_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    spikes = int(rng.integers(5, 10))
    r_out = rng.uniform(0.18, 0.27) * size
    inner = rng.uniform(0.5, 0.7)
    n = 2 * spikes
    angles = 2 * np.pi * (np.arange(n) + rng.uniform(-0.2, 0.2, size=n)) / n + rng.uniform(0, 2 * np.pi)
    radii = np.where(np.arange(n) % 2 == 0, r_out * rng.uniform(0.9, 1.1, size=n), r_out * inner)
    margin = r_out * 1.1 + 2
    cy, cx = rng.uniform(margin, size - margin, size=2)
    pts = [(cx + r * np.cos(t), cy + r * np.sin(t)) for r, t in zip(radii, angles)]
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon(pts, fill=1)
    # rasterised spike tips can leave diagonal-only pixels; keep the main body
    labels, n = ndimage.label(np.asarray(canvas))
    if n > 1:
        return labels == np.argmax(np.bincount(labels.ravel())[1:]) + 1
    return labels == 1


def synth_generate(n: int, class_kind: str, resolution: int = 128, seed: int = 0) -> list[SegSample]:
    """Ultrasound-like toy lesions with exact masks.

    Benign: one ellipse, sharp edge, mild noise. Malignant: an irregular star
    polygon with a blurred edge and heavy multiplicative speckle.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if class_kind not in LESION_CLASSES:
        raise ConfigurationError(f"class_kind must be one of {LESION_CLASSES}")
    rng = np.random.default_rng([seed, LESION_CLASSES.index(class_kind)])
    size = resolution
    out = []
    for i in range(n):
        if class_kind == "benign":
            mask = _ellipse_mask(rng, size)
            edge = mask.astype(np.float32)
        else:
            mask = _star_mask(rng, size)
            edge = ndimage.gaussian_filter(mask.astype(np.float32), sigma=size / 64)
        texture = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 32)
        background = 0.55 + 0.08 * texture / (np.abs(texture).max() + 1e-8)
        lesion = rng.uniform(0.15, 0.25)
        img = background * (1 - edge) + lesion * edge
        if class_kind == "malignant":
            img = img * rng.gamma(6.0, 1 / 6.0, size=(size, size))
            img = img + rng.normal(0, 0.04, size=(size, size))
        else:
            img = img + rng.normal(0, 0.03, size=(size, size))
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        out.append(SegSample(
            image=np.repeat(img[None], 3, axis=0),
            mask=mask[None].astype(np.float32),
            class_label=class_kind,
            ident=f"synthetic/{class_kind}/{seed}/{i:04d}",
        ))
    return out


def write_busi_layout(samples: Iterable[SegSample], root: str | Path) -> list[Path]:
    """Write samples as ``<class>/<class> (<n>).png`` plus ``_mask.png`` (8-bit grayscale)."""
    root = Path(root)
    counters: dict[str, int] = {}
    written = []
    for s in samples:
        n = counters[s.class_label] = counters.get(s.class_label, 0) + 1
        folder = root / s.class_label
        folder.mkdir(parents=True, exist_ok=True)
        stem = f"{s.class_label} ({n})"
        img = np.round(s.image[0] * 255).astype(np.uint8)
        Image.fromarray(img).save(folder / f"{stem}.png")
        Image.fromarray((s.mask[0] > 0.5).astype(np.uint8) * 255).save(folder / f"{stem}_mask.png")
        written.append(folder / f"{stem}.png")
    return written
