"""Synthetic phantom volumes with exactly known foreground shapes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..fewshot.episode import Case
from ..volume import LabelVolume, Volume, normalize

FAMILIES = ("ellipsoid", "two-lobe", "crescent", "ring")


def family_organ_id(family: str) -> int:
    return FAMILIES.index(family) + 1


@dataclass(frozen=True)
class PhantomSpec:
    family: str = "ellipsoid"
    radius_range: tuple[float, float] = (6.0, 14.0)
    contrast_range: tuple[float, float] = (0.5, 1.0)
    noise_std: float = 0.3
    dims: tuple[int, int, int] = (24, 64, 64)
    count: int = 8
    seed: int = 0
    organ_id: int = 0  # 0 -> derived from the family

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}; choose from {FAMILIES}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"degenerate radius range {self.radius_range}")
        if min(self.dims) < 4 or len(self.dims) != 3:
            raise ValueError(f"volume dims too small: {self.dims}")
        if self.noise_std < 0 or self.count < 0:
            raise ValueError("noise_std and count must be non-negative")
        if self.contrast_range[0] <= 0 or self.contrast_range[1] < self.contrast_range[0]:
            raise ValueError(f"contrast range must be positive, got {self.contrast_range}")

    @property
    def label(self) -> int:
        return self.organ_id or family_organ_id(self.family)


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def _ellipsoid(grid, center, radii) -> np.ndarray:
    acc = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
    return acc <= 1.0


def shape_mask(family: str, dims, center, radii, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one shape; ``radii`` are (slice, row, col) semi-axes."""
    grid = _grid(dims)
    center = np.asarray(center, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    if family == "ellipsoid":
        return _ellipsoid(grid, center, radii)
    theta = rng.uniform(0, 2 * np.pi)
    direction = np.array([0.0, np.sin(theta), np.cos(theta)])
    if family == "two-lobe":
        lobe = radii * np.array([1.0, 0.6, 0.6])
        offset = direction * radii * 0.45
        return _ellipsoid(grid, center + offset, lobe) | _ellipsoid(grid, center - offset, lobe)
    if family == "crescent":
        bite = radii * np.array([1.2, 0.85, 0.85])
        return _ellipsoid(grid, center, radii) & ~_ellipsoid(grid, center + direction * radii * 0.5, bite)
    if family == "ring":
        z = (grid[0] - center[0]) / radii[0]
        rho = np.sqrt(((grid[1] - center[1]) / radii[1]) ** 2 + ((grid[2] - center[2]) / radii[2]) ** 2)
        return ((rho - 0.65) / 0.35) ** 2 + z ** 2 <= 1.0
    raise ValueError(f"unknown shape family {family!r}")


def generate_case(spec: PhantomSpec, index: int) -> Case:
    rng = np.random.default_rng([spec.seed, family_organ_id(spec.family), index])
    dims = spec.dims
    for _ in range(100):
        radii = [min(rng.uniform(*spec.radius_range), n / 2 - 1.0) for n in dims]
        center = [rng.uniform(r + 0.5, n - r - 1.5) if n - r - 1.5 > r + 0.5 else (n - 1) / 2
                  for r, n in zip(radii, dims)]
        mask = shape_mask(spec.family, dims, center, radii, rng)
        if mask.any():
            break
    else:
        raise ValueError(f"could not place a non-empty {spec.family} in {dims}")
    contrast = rng.uniform(*spec.contrast_range)
    clean = mask * contrast
    noisy = clean + rng.normal(0.0, spec.noise_std, size=dims) if spec.noise_std else clean
    volume = normalize(Volume(noisy))
    labels = LabelVolume(mask.astype(np.uint8) * spec.label, spec.label)
    return Case(f"{spec.family}_{spec.seed}_{index:03d}", volume, labels)


def generate_phantoms(spec: PhantomSpec) -> list[Case]:
    """``spec.count`` cases of one shape family, deterministic in ``spec.seed``."""
    return [generate_case(spec, i) for i in range(spec.count)]


def generate_corpus(families: Sequence[str] = FAMILIES, count: int = 8, seed: int = 0,
                    **spec_fields) -> list[Case]:
    cases: list[Case] = []
    for family in families:
        cases.extend(generate_phantoms(PhantomSpec(family=family, count=count, seed=seed, **spec_fields)))
    return cases
