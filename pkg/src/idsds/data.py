"""Datasets: synthetic images with known evidence cells, idx I/O, normalization."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_IMAGES_4D_MAGIC = 0x00000804
IDX_LABELS_MAGIC = 0x00000801

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.25, 0.25, 0.25)


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int
    id: int


@dataclass
class Dataset:
    """Images ``(N, C, H, W)`` with labels and stable integer ids.

    ``mean``/``std`` record the per-channel normalization that produced
    ``images``; both are ``None`` for raw ``[0, 1]`` pixels.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (N, C, H, W), got {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ConfigError(
                f"{n} images but labels {self.labels.shape} and ids {self.ids.shape}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), int(self.ids[i]))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return replace(self, images=self.images[index], labels=self.labels[index], ids=self.ids[index])

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


def normalize(dataset: Dataset, mean: Sequence[float], std: Sequence[float]) -> Dataset:
    """Standardize raw ``[0, 1]`` pixels per channel."""
    if dataset.mean is not None:
        raise ConfigError("dataset is already normalized")
    mean_a, std_a = _channel_stats(dataset, mean, std)
    images = (dataset.images - mean_a) / std_a
    return replace(dataset, images=images, mean=tuple(map(float, mean)), std=tuple(map(float, std)))


def denormalize(dataset: Dataset) -> Dataset:
    if dataset.mean is None:
        return dataset
    mean_a, std_a = _channel_stats(dataset, dataset.mean, dataset.std)
    return replace(dataset, images=dataset.images * std_a + mean_a, mean=None, std=None)


def _channel_stats(dataset, mean, std):
    c = dataset.images.shape[1]
    mean_a = np.asarray(mean, dtype=np.float64)
    std_a = np.asarray(std, dtype=np.float64)
    if mean_a.shape != (c,) or std_a.shape != (c,):
        raise ConfigError(f"mean/std need {c} channel values, got {mean_a.shape} and {std_a.shape}")
    if np.any(std_a <= 0):
        raise ConfigError("std must be positive")
    return mean_a.reshape(1, c, 1, 1), std_a.reshape(1, c, 1, 1)


def train_eval_split(dataset: Dataset, n_eval: int) -> tuple[Dataset, Dataset]:
    if not 0 < n_eval < len(dataset):
        raise ConfigError(f"n_eval must lie in (0, {len(dataset)}), got {n_eval}")
    n_train = len(dataset) - n_eval
    return dataset.subset(np.arange(n_train)), dataset.subset(np.arange(n_train, len(dataset)))


# idx files


def write_idx(dataset: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write raw pixels as unsigned-byte idx (3-D for one channel, 4-D otherwise)."""
    raw = denormalize(dataset).images * 255.0
    quant = np.rint(raw)
    if np.max(np.abs(quant - raw), initial=0.0) > 1e-6 or quant.min(initial=0) < 0 or quant.max(initial=0) > 255:
        raise FormatError("pixels are not representable as unsigned bytes")
    quant = quant.astype(np.uint8)
    n, c, h, w = quant.shape
    if c == 1:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
    else:
        header = struct.pack(">IIIII", IDX_IMAGES_4D_MAGIC, n, c, h, w)
    Path(images_path).write_bytes(header + quant.tobytes())
    labels = dataset.labels
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise FormatError("labels do not fit in unsigned bytes")
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.astype(np.uint8).tobytes())


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Read an idx image/label pair into a raw ``[0, 1]`` dataset."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    if len(img) < 4:
        raise FormatError(f"{images_path}: truncated header at offset 0")
    (magic,) = struct.unpack_from(">I", img, 0)
    if magic == IDX_IMAGES_MAGIC:
        ndims = 3
    elif magic == IDX_IMAGES_4D_MAGIC:
        ndims = 4
    else:
        raise FormatError(f"{images_path}: bad magic 0x{magic:08x} at offset 0")
    hdr = 4 + 4 * ndims
    if len(img) < hdr:
        raise FormatError(f"{images_path}: truncated header at offset {len(img)}, need {hdr} bytes")
    dims = struct.unpack_from(f">{ndims}I", img, 4)
    if ndims == 3:
        n, h, w = dims
        c = 1
    else:
        n, c, h, w = dims
    expected = hdr + n * c * h * w
    if len(img) != expected:
        raise FormatError(f"{images_path}: payload ends at offset {len(img)}, expected {expected}")
    if len(lab) < 8:
        raise FormatError(f"{labels_path}: truncated header at offset 0")
    lmagic, ln = struct.unpack_from(">II", lab, 0)
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad magic 0x{lmagic:08x} at offset 0")
    if ln != n:
        raise FormatError(f"{labels_path}: count {ln} at offset 4 does not match {n} images")
    if len(lab) != 8 + n:
        raise FormatError(f"{labels_path}: payload ends at offset {len(lab)}, expected {8 + n}")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=hdr).reshape(n, c, h, w)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(pixels.astype(np.float64) / 255.0, labels, np.arange(n))


# synthetic generator

GLYPHS = ("square", "cross", "ring", "diagonal")
DISTRACTOR_GLYPHS = ("dot", "bar", "corner")
PALETTE = {
    "red": (0.95, 0.15, 0.15),
    "green": (0.15, 0.85, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
}
BACKGROUND = 0.5


@dataclass(frozen=True)
class Placement:
    cell: int  # 1-based, row-major, same numbering as PatchGrid
    glyph: str
    color: str


def default_placements(num_classes: int, cells_per_side: int) -> list[list[Placement]]:
    """Each class gets a unique (glyph, color) pair shown in two mirrored cells."""
    n_cells = cells_per_side**2
    combos = [(g, c) for c in PALETTE for g in GLYPHS]
    if num_classes > len(combos):
        raise ConfigError(f"default layout supports at most {len(combos)} classes")
    if 2 * num_classes > n_cells:
        raise ConfigError(f"{num_classes} classes need {2 * num_classes} cells, grid has {n_cells}")
    out = []
    for k in range(num_classes):
        glyph, color = combos[(k * 5) % len(combos)] if num_classes <= 4 else combos[k]
        first, second = k + 1, n_cells - k
        out.append([Placement(first, glyph, color), Placement(second, glyph, color)])
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    num_classes: int = 8
    cells_per_side: int = 4
    placements: tuple = ()
    distractor_density: float = 0.3
    noise_sigma: float = 0.08
    num_images: int = 7000
    seed: int = 0
    mean: tuple[float, ...] = DEFAULT_MEAN
    std: tuple[float, ...] = DEFAULT_STD

    def resolved_placements(self) -> list[list[Placement]]:
        if self.placements:
            return [[p if isinstance(p, Placement) else Placement(**p) for p in cls] for cls in self.placements]
        return default_placements(self.num_classes, self.cells_per_side)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placements"] = [[asdict(p) for p in cls] for cls in self.resolved_placements()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "placements" in d:
            d["placements"] = tuple(tuple(Placement(**p) for p in c) for c in d["placements"])
        for k in ("mean", "std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class GroundTruth:
    """Class -> 1-based indices of the cells carrying that class's evidence."""

    important_cells: dict[int, list[int]] = field(default_factory=dict)
    cells_per_side: int = 4

    def to_json(self) -> str:
        return json.dumps(
            {
                "cells_per_side": self.cells_per_side,
                "important_cells": {str(k): v for k, v in sorted(self.important_cells.items())},
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        return cls({int(k): list(v) for k, v in d["important_cells"].items()}, d["cells_per_side"])


def _glyph_mask(glyph: str, size: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    t = max(1, size // 4)
    mid = size // 2
    if glyph == "square":
        m[:, :] = True
    elif glyph == "cross":
        m[mid - t // 2 - (t % 2 == 0) : mid + (t + 1) // 2, :] = True
        m[:, mid - t // 2 - (t % 2 == 0) : mid + (t + 1) // 2] = True
    elif glyph == "ring":
        m[:, :] = True
        m[t:-t, t:-t] = False
    elif glyph == "diagonal":
        idx = np.arange(size)
        for d in range(-(t // 2), t - t // 2):
            keep = (idx + d >= 0) & (idx + d < size)
            m[idx[keep], (idx + d)[keep]] = True
            m[idx[keep], (size - 1 - idx - d)[keep]] = True
    elif glyph == "dot":
        m[mid - t : mid + t, mid - t : mid + t] = True
    elif glyph == "bar":
        m[mid - t // 2 - 1 : mid + t // 2, :] = True
    elif glyph == "corner":
        m[: t + 1, :] = True
        m[:, : t + 1] = True
    else:
        raise ConfigError(f"unknown glyph {glyph!r}")
    return m


def _validate(spec: SyntheticSpec, placements) -> None:
    if spec.image_size % spec.cells_per_side:
        raise ConfigError(f"image size {spec.image_size} not divisible by {spec.cells_per_side} cells")
    if spec.image_size // spec.cells_per_side < 4:
        raise ConfigError("cells must be at least 4 pixels wide")
    if len(placements) != spec.num_classes:
        raise ConfigError(f"{spec.num_classes} classes but {len(placements)} placement lists")
    if not 0 <= spec.distractor_density <= 1:
        raise ConfigError(f"distractor density must lie in [0, 1], got {spec.distractor_density}")
    n_cells = spec.cells_per_side**2
    for k, cls_places in enumerate(placements):
        if not cls_places:
            raise ConfigError(f"class {k} has no evidence placement")
        seen = set()
        for p in cls_places:
            if not 1 <= p.cell <= n_cells:
                raise ConfigError(f"class {k}: cell {p.cell} outside the {n_cells}-cell image")
            if p.cell in seen:
                raise ConfigError(f"class {k}: overlapping evidence placements at cell {p.cell}")
            if p.glyph not in GLYPHS:
                raise ConfigError(f"class {k}: evidence glyph must be one of {GLYPHS}, got {p.glyph!r}")
            if p.color not in PALETTE:
                raise ConfigError(f"class {k}: unknown color {p.color!r}")
            seen.add(p.cell)
    signatures = [tuple(sorted((p.cell, p.glyph, p.color) for p in c)) for c in placements]
    if len(set(signatures)) != len(signatures):
        raise ConfigError("two classes share identical evidence")


def generate(spec: SyntheticSpec, suppress_evidence: bool = False) -> tuple[Dataset, GroundTruth]:
    """Render ``spec.num_images`` labeled images and the ground-truth cell table.

    Every cell first receives label-independent background content (noise and,
    with probability ``distractor_density``, a distractor glyph in a palette
    color); then the label's evidence glyphs are drawn into their cells.
    With ``suppress_evidence`` the second step is skipped, so the pixels carry
    no information about the label at all.

    Pixels are quantized to multiples of 1/255 and normalized with
    ``spec.mean``/``spec.std``.
    """
    placements = spec.resolved_placements()
    _validate(spec, placements)
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    n, size, s = spec.num_images, spec.image_size, spec.cells_per_side
    cell = size // s
    margin = max(1, cell // 8)
    gsize = cell - 2 * margin
    colors = np.array(list(PALETTE.values()))
    ev_masks = {g: _glyph_mask(g, gsize) for g in GLYPHS}
    dis_masks = [_glyph_mask(g, gsize) for g in DISTRACTOR_GLYPHS]

    labels = rng.integers(0, spec.num_classes, size=n)
    images = BACKGROUND + spec.noise_sigma * rng.standard_normal((n, 3, size, size))
    has_dis = rng.random((n, s * s)) < spec.distractor_density
    dis_kind = rng.integers(0, len(dis_masks), size=(n, s * s))
    dis_color = rng.integers(0, len(colors), size=(n, s * s))
    jitter = rng.integers(-margin, margin + 1, size=(n, s * s, 2))
    gain = rng.uniform(0.8, 1.0, size=(n, s * s))

    def paint(img, cell_idx, mask, rgb, dy, dx, g):
        i, j = divmod(cell_idx, s)
        r0 = i * cell + margin + dy
        c0 = j * cell + margin + dx
        region = img[:, r0 : r0 + gsize, c0 : c0 + gsize]
        region[:, mask] = (g * np.asarray(rgb))[:, None] + (region[:, mask] - BACKGROUND)

    for k in range(n):
        img = images[k]
        for c in range(s * s):
            if has_dis[k, c]:
                dy, dx = jitter[k, c]
                paint(img, c, dis_masks[dis_kind[k, c]], colors[dis_color[k, c]], dy, dx, gain[k, c])
        if not suppress_evidence:
            for p in placements[labels[k]]:
                c = p.cell - 1
                i, j = divmod(c, s)
                img[:, i * cell : (i + 1) * cell, j * cell : (j + 1) * cell] = (
                    BACKGROUND
                    + spec.noise_sigma
                    * rng.standard_normal((3, cell, cell))
                )
                dy, dx = jitter[k, c]
                paint(img, c, ev_masks[p.glyph], PALETTE[p.color], dy, dx, gain[k, c])

    raw = np.clip(np.rint(np.clip(images, 0.0, 1.0) * 255.0), 0, 255) / 255.0
    dataset = Dataset(raw, labels, np.arange(n))
    dataset = normalize(dataset, spec.mean, spec.std)
    gt = GroundTruth({k: sorted(p.cell for p in placements[k]) for k in range(spec.num_classes)}, s)
    return dataset, gt


def save_dataset(dataset: Dataset, gt: GroundTruth | None, directory: str | Path, stem: str = "data") -> dict[str, str]:
    """Persist as an idx pair plus JSON metadata (normalization and ground truth)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "images": str(directory / f"{stem}-images.idx"),
        "labels": str(directory / f"{stem}-labels.idx"),
        "meta": str(directory / f"{stem}.json"),
    }
    write_idx(dataset, paths["images"], paths["labels"])
    meta = {
        "mean": list(dataset.mean) if dataset.mean else None,
        "std": list(dataset.std) if dataset.std else None,
        "ids": dataset.ids.tolist(),
        "ground_truth": json.loads(gt.to_json()) if gt else None,
    }
    Path(paths["meta"]).write_text(json.dumps(meta, sort_keys=True) + "\n")
    return paths


def load_dataset(directory: str | Path, stem: str = "data") -> tuple[Dataset, GroundTruth | None]:
    directory = Path(directory)
    ds = load_idx(directory / f"{stem}-images.idx", directory / f"{stem}-labels.idx")
    meta = json.loads((directory / f"{stem}.json").read_text())
    ds = replace(ds, ids=np.asarray(meta["ids"], dtype=np.int64))
    if meta["mean"] is not None:
        ds = normalize(ds, meta["mean"], meta["std"])
    gt = GroundTruth.from_json(json.dumps(meta["ground_truth"])) if meta["ground_truth"] else None
    return ds, gt
