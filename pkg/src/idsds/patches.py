"""Patch grids, baseline images, and single-patch deletion.

Patch indices are 1-based (``1 <= m <= P``) so that 0 can mean "no patch"
in the augmentation sampler and the leakage audit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError


@dataclass(frozen=True)
class PatchGrid:
    side: int
    height: int
    width: int

    def __post_init__(self):
        if self.side < 1:
            raise ConfigError(f"grid side must be >= 1, got {self.side}")
        if self.height % self.side or self.width % self.side:
            raise ConfigError(
                f"grid with {self.side}x{self.side} patches does not tile a {self.height}x{self.width} image"
            )

    @classmethod
    def for_image(cls, num_patches: int, height: int, width: int) -> "PatchGrid":
        side = int(round(num_patches**0.5))
        if side * side != num_patches:
            raise ConfigError(f"number of patches must be a perfect square, got {num_patches}")
        return cls(side, height, width)

    @property
    def num_patches(self) -> int:
        return self.side * self.side

    @property
    def patch_height(self) -> int:
        return self.height // self.side

    @property
    def patch_width(self) -> int:
        return self.width // self.side

    def bounds(self, m: int) -> tuple[int, int, int, int]:
        """Row/column slice bounds ``(r0, r1, c0, c1)`` of patch ``m``."""
        if not 1 <= m <= self.num_patches:
            raise ConfigError(f"patch index {m} outside 1..{self.num_patches}")
        i, j = divmod(m - 1, self.side)
        ph, pw = self.patch_height, self.patch_width
        return i * ph, (i + 1) * ph, j * pw, (j + 1) * pw

    def check_image(self, shape: Sequence[int]) -> None:
        if tuple(shape[-2:]) != (self.height, self.width):
            raise ConfigError(f"grid built for {self.height}x{self.width} but image is {tuple(shape[-2:])}")

    def patch_sums(self, amap: np.ndarray) -> np.ndarray:
        """Sum an H×W map (or a stack ``(..., H, W)``) inside every patch -> ``(..., P)``."""
        amap = np.asarray(amap, dtype=np.float64)
        self.check_image(amap.shape)
        lead = amap.shape[:-2]
        s, ph, pw = self.side, self.patch_height, self.patch_width
        blocks = amap.reshape(*lead, s, ph, s, pw)
        return blocks.sum(axis=(-3, -1)).reshape(*lead, s * s)

    def scatter(self, values: Sequence[float]) -> np.ndarray:
        """Spread per-patch values uniformly over their pixels (patch sums are preserved)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.num_patches,):
            raise ConfigError(f"expected {self.num_patches} patch values, got shape {values.shape}")
        per_pixel = values.reshape(self.side, self.side) / (self.patch_height * self.patch_width)
        return np.repeat(np.repeat(per_pixel, self.patch_height, axis=0), self.patch_width, axis=1)

    def index_map(self) -> np.ndarray:
        """H×W array holding the (1-based) patch index of every pixel."""
        idx = np.arange(1, self.num_patches + 1).reshape(self.side, self.side)
        return np.repeat(np.repeat(idx, self.patch_height, axis=0), self.patch_width, axis=1)

    def mask(self, m: int) -> np.ndarray:
        r0, r1, c0, c1 = self.bounds(m)
        out = np.zeros((self.height, self.width), dtype=bool)
        out[r0:r1, c0:c1] = True
        return out


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"blur kernel size must be a positive odd integer, got {size}")
    if sigma <= 0:
        raise ConfigError(f"blur sigma must be positive, got {sigma}")
    half = size // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, mirror padding at the borders."""
    k = gaussian_kernel1d(size, sigma)
    out = correlate1d(np.asarray(image, dtype=np.float64), k, axis=-1, mode="reflect")
    return correlate1d(out, k, axis=-2, mode="reflect")


BASELINE_KINDS = ("zero", "random_uniform", "gaussian_blur")


@dataclass(frozen=True)
class Baseline:
    """Reduced-information image that replaces deleted pixels.

    ``zero`` is zero in normalized space; ``random_uniform`` draws fresh values in
    ``(lo, hi)`` per image key; ``gaussian_blur`` blurs the image being deleted.
    """

    kind: str = "zero"
    lo: float = -1.0
    hi: float = 1.0
    seed: int = 0
    kernel: int = 9
    sigma: float = 4.0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}; expected one of {BASELINE_KINDS}")
        if self.kind == "random_uniform" and not self.lo < self.hi:
            raise ConfigError(f"uniform baseline needs lo < hi, got ({self.lo}, {self.hi})")
        if self.kind == "gaussian_blur":
            gaussian_kernel1d(self.kernel, self.sigma)

    @classmethod
    def zero(cls) -> "Baseline":
        return cls("zero")

    @classmethod
    def uniform(cls, lo: float = -1.0, hi: float = 1.0, seed: int = 0) -> "Baseline":
        return cls("random_uniform", lo=lo, hi=hi, seed=seed)

    @classmethod
    def blur(cls, kernel: int = 9, sigma: float = 4.0) -> "Baseline":
        return cls("gaussian_blur", kernel=kernel, sigma=sigma)

    @classmethod
    def blur_for_size(cls, size: int) -> "Baseline":
        """Blur scaled from 9×9/σ=4 at 64 px; the original 51×51/σ=41 at 224 px."""
        if size == 224:
            return cls.blur(51, 41.0)
        k = max(3, int(round(9 * size / 64)))
        k += (k + 1) % 2
        return cls.blur(k, 4.0 * size / 64)

    @classmethod
    def from_dict(cls, d: dict | str) -> "Baseline":
        if isinstance(d, str):
            d = {"kind": d}
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def label(self) -> str:
        if self.kind == "zero":
            return "zero"
        if self.kind == "random_uniform":
            return f"uniform({self.lo:g},{self.hi:g})"
        return f"blur({self.kernel},{self.sigma:g})"

    def image(self, x: np.ndarray, key: Sequence[int] = ()) -> np.ndarray:
        """Full baseline image for input ``x`` (shape preserved).

        ``key`` selects the random stream for ``random_uniform`` so that a given
        image always receives the same noise regardless of evaluation order.
        """
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "random_uniform":
            rng = np.random.default_rng([self.seed, 0xBA5E, *[int(k) for k in key]])
            return rng.uniform(self.lo, self.hi, size=x.shape)
        return gaussian_blur(x, self.kernel, self.sigma)


def delete_patch(x: np.ndarray, grid: PatchGrid, m: int, baseline: Baseline, key: Sequence[int] = (), base_image=None) -> np.ndarray:
    """Copy of ``x`` (C×H×W) with patch ``m`` replaced by baseline values in every channel."""
    grid.check_image(x.shape)
    r0, r1, c0, c1 = grid.bounds(m)
    b = baseline.image(x, key) if base_image is None else base_image
    out = np.array(x, dtype=np.float64, copy=True)
    out[..., r0:r1, c0:c1] = b[..., r0:r1, c0:c1]
    return out


def all_single_deletions(x: np.ndarray, grid: PatchGrid, base_image: np.ndarray) -> np.ndarray:
    """Stack ``(P, C, H, W)`` of ``x`` with each patch deleted in turn."""
    grid.check_image(x.shape)
    out = np.repeat(np.asarray(x, dtype=np.float64)[None], grid.num_patches, axis=0)
    for m in range(1, grid.num_patches + 1):
        r0, r1, c0, c1 = grid.bounds(m)
        out[m - 1, ..., r0:r1, c0:c1] = base_image[..., r0:r1, c0:c1]
    return out


def extract_patch(x: np.ndarray, grid: PatchGrid, m: int) -> np.ndarray:
    r0, r1, c0, c1 = grid.bounds(m)
    return np.array(x[..., r0:r1, c0:c1], copy=True)


def insert_patch(x: np.ndarray, grid: PatchGrid, m: int, pixels: np.ndarray) -> np.ndarray:
    r0, r1, c0, c1 = grid.bounds(m)
    out = np.array(x, copy=True)
    out[..., r0:r1, c0:c1] = pixels
    return out
