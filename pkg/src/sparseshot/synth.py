"""Seeded synthetic cell-blob scenes with exhaustive ground truth."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import Annotation, AnnotationSet, Image
from .errors import InvalidConfig, PackingError
from .seeding import derive_seed

MAX_ATTEMPTS = 1000


@dataclass(frozen=True)
class SceneConfig:
    height: int = 128
    width: int = 128
    n_cells_class1: int = 20
    n_cells_class2: int = 0
    radius_range: tuple[float, float] = (3.0, 5.0)
    intensity_class1: tuple[float, float] = (0.5, 0.9)
    intensity_class2: tuple[float, float] = (0.8, 1.0)
    # class 2 cells are drawn from radius_range scaled by this factor
    class2_radius_scale: float = 1.5
    # bump exponent: 2 is parabolic, larger values give flatter-topped cells
    profile_power: float = 8.0
    noise_std: float = 0.05
    min_separation: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("radius_range", "intensity_class1", "intensity_class2"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.height <= 0 or self.width <= 0:
            raise InvalidConfig("image dimensions must be positive")
        if self.n_cells_class1 < 0 or self.n_cells_class2 < 0:
            raise InvalidConfig("cell counts must be non-negative")
        lo, hi = self.radius_range
        if not (0 < lo < hi):
            raise InvalidConfig(f"radius_range must satisfy 0 < min < max, got {self.radius_range}")
        for name in ("intensity_class1", "intensity_class2"):
            a, b = getattr(self, name)
            if not (0 < a < b <= 1):
                raise InvalidConfig(f"{name} must satisfy 0 < min < max <= 1")
        if self.class2_radius_scale <= 0:
            raise InvalidConfig("class2_radius_scale must be positive")
        if not self.profile_power > 0:
            raise InvalidConfig("profile_power must be positive")
        if self.noise_std < 0 or self.min_separation < 0:
            raise InvalidConfig("noise_std and min_separation must be non-negative")
        biggest = hi * (self.class2_radius_scale if self.n_cells_class2 else 1.0)
        if 2 * biggest >= min(self.height, self.width) - 1:
            raise InvalidConfig("cells do not fit inside the image")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


def bump(dist: np.ndarray, radius: float, power: float = 2.0) -> np.ndarray:
    """Radially decaying profile, 1 at the centre and exactly 0 from ``radius`` on."""
    return np.clip(1.0 - (dist / radius) ** power, 0.0, None)


def _place(rng, cfg: SceneConfig, radii, placed):
    for r in radii:
        for _ in range(MAX_ATTEMPTS):
            cx = rng.uniform(r, cfg.width - 1 - r)
            cy = rng.uniform(r, cfg.height - 1 - r)
            if all(math.hypot(cx - px, cy - py) >= cfg.min_separation for px, py in placed):
                placed.append((cx, cy))
                break
        else:
            raise PackingError(
                f"could not place cell {len(placed) + 1} within {MAX_ATTEMPTS} attempts"
            )
    return placed


def generate_scene(cfg: SceneConfig) -> tuple[Image, AnnotationSet]:
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.radius_range
    s = cfg.class2_radius_scale
    r2 = rng.uniform(lo * s, hi * s, cfg.n_cells_class2)
    r1 = rng.uniform(lo, hi, cfg.n_cells_class1)
    # big cells first; they are the hardest to fit
    centres = _place(rng, cfg, r2, [])
    centres = _place(rng, cfg, r1, centres)
    i2 = rng.uniform(*cfg.intensity_class2, cfg.n_cells_class2)
    i1 = rng.uniform(*cfg.intensity_class1, cfg.n_cells_class1)

    classes = [2] * cfg.n_cells_class2 + [1] * cfg.n_cells_class1
    radii = np.concatenate([r2, r1])
    peaks = np.concatenate([i2, i1])

    signal = np.zeros((cfg.height, cfg.width))
    rows, cols = np.mgrid[0 : cfg.height, 0 : cfg.width]
    annos = []
    for (cx, cy), r, peak, c in zip(centres, radii, peaks, classes):
        r0, r1_ = max(0, math.floor(cy - r)), min(cfg.height, math.ceil(cy + r) + 1)
        c0, c1 = max(0, math.floor(cx - r)), min(cfg.width, math.ceil(cx + r) + 1)
        d = np.hypot(cols[r0:r1_, c0:c1] - cx, rows[r0:r1_, c0:c1] - cy)
        signal[r0:r1_, c0:c1] += peak * bump(d, r, cfg.profile_power)
        annos.append(Annotation(cx, cy, r, c))

    noise = rng.normal(0.0, cfg.noise_std, signal.shape) if cfg.noise_std > 0 else 0.0
    pixels = np.clip(signal + noise, 0.0, 1.0)
    return Image(pixels), AnnotationSet(tuple(annos), f"scene_{cfg.seed}")


def generate_scenes(cfg: SceneConfig, n: int, seed: int | None = None) -> list[tuple[Image, AnnotationSet]]:
    """``n`` independent scenes, scene i seeded from (seed, i)."""
    base = cfg.seed if seed is None else seed
    out = []
    for i in range(n):
        scene_cfg = SceneConfig(**{**cfg.to_dict(), "seed": derive_seed(base, i)})
        img, annos = generate_scene(scene_cfg)
        out.append((img, AnnotationSet(annos.annotations, f"scene_{i:03d}")))
    return out
