"""Procedural segmentation scenes with two deliberate failure modes.

Every foreground class has a fixed shape family (odd ids are rectangles, even
ids ellipses) and a canonical colour. Scenes mix three scenarios:

``intra_inconsistency``
    one region is split in two halves rendered with visibly different
    textures, although both halves carry the same label;
``inter_indistinction``
    two adjacent regions of different classes (and different shape families)
    are rendered with nearly the same colour;
``mixed``
    both of the above in one scene.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from .boundary import extract_boundary

SCENARIOS = ("intra_inconsistency", "inter_indistinction", "mixed")
BACKGROUND_COLOR = (0.45, 0.45, 0.45)


@dataclass
class DatasetSpec:
    count: int = 200
    height: int = 64
    width: int = 64
    num_classes: int = 4
    mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    texture_noise: float = 0.06
    intra_shift: float = 0.35
    similarity: float = 0.1
    seed: int = 0
    thickness: int = 1
    mean: tuple[float, float, float] | None = None

    def __post_init__(self):
        self.mix = tuple(float(r) for r in self.mix)
        if len(self.mix) != 3 or abs(sum(self.mix) - 1.0) > 1e-9 or min(self.mix) < 0:
            raise ConfigurationError(f"scenario mix must be 3 non-negative ratios summing to 1, got {self.mix}")
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise ConfigurationError(f"size {self.height}x{self.width} must be a positive multiple of 32")
        if not 3 <= self.num_classes <= 256:
            raise ConfigurationError(f"num_classes must lie in [3, 256], got {self.num_classes}")
        if self.count < 0:
            raise ConfigurationError(f"count must be >= 0, got {self.count}")
        if self.mean is not None:
            self.mean = tuple(float(m) for m in self.mean)

    def to_kv(self) -> dict[str, str]:
        kv = {
            "count": str(self.count),
            "height": str(self.height),
            "width": str(self.width),
            "num_classes": str(self.num_classes),
            "mix": ",".join(repr(r) for r in self.mix),
            "texture_noise": repr(self.texture_noise),
            "intra_shift": repr(self.intra_shift),
            "similarity": repr(self.similarity),
            "seed": str(self.seed),
            "thickness": str(self.thickness),
        }
        if self.mean is not None:
            kv["mean"] = ",".join(repr(m) for m in self.mean)
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "DatasetSpec":
        return cls(
            count=int(kv["count"]),
            height=int(kv["height"]),
            width=int(kv["width"]),
            num_classes=int(kv["num_classes"]),
            mix=tuple(float(x) for x in kv["mix"].split(",")),
            texture_noise=float(kv["texture_noise"]),
            intra_shift=float(kv["intra_shift"]),
            similarity=float(kv["similarity"]),
            seed=int(kv["seed"]),
            thickness=int(kv["thickness"]),
            mean=tuple(float(x) for x in kv["mean"].split(",")) if "mean" in kv else None,
        )


@dataclass
class SampleRecord:
    image: np.ndarray  # float32 [3,H,W]
    labels: np.ndarray  # uint8 [H,W]
    boundary: np.ndarray  # uint8 [H,W]
    seed: int
    scenario: str
    focus: tuple[int, ...] = field(default=())

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.scenario == other.scenario
            and tuple(self.focus) == tuple(other.focus)
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.boundary, other.boundary)
        )


def class_palette(num_classes: int) -> np.ndarray:
    """Canonical RGB colour per class; class 0 is a neutral background."""
    pal = np.zeros((num_classes, 3))
    pal[0] = BACKGROUND_COLOR
    for k in range(1, num_classes):
        hue = (k - 1) / (num_classes - 1)
        pal[k] = colorsys.hsv_to_rgb(hue, 0.65, 0.8)
    return pal


def is_rect_class(k: int) -> bool:
    return k % 2 == 1


def _region_mask(rng, shape_rect: bool, cy: float, cx: float, ry: float, rx: float, h: int, w: int):
    yy, xx = np.mgrid[0:h, 0:w]
    if shape_rect:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _random_region(rng, h, w, scale):
    ry = rng.uniform(6, 14) * scale
    rx = rng.uniform(6, 14) * scale
    cy = rng.uniform(ry, h - 1 - ry)
    cx = rng.uniform(rx, w - 1 - rx)
    return cy, cx, ry, rx


def _unit(rng, dim=3):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def gen_sample(seed: int, spec: DatasetSpec, scenario: str) -> SampleRecord:
    """Render one scene deterministically from ``seed``."""
    if scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {scenario!r}")
    rng = np.random.default_rng(seed)
    h, w, k = spec.height, spec.width, spec.num_classes
    scale = min(h, w) / 64.0
    palette = class_palette(k)
    colors = palette.copy()
    noise = spec.texture_noise

    labels = np.zeros((h, w), np.uint8)
    # per-pixel base colour and noise level
    base = np.broadcast_to(colors[0], (h, w, 3)).copy()
    sigma = np.full((h, w, 1), noise)

    def paint(mask, cls, color, sd=noise):
        labels[mask] = cls
        base[mask] = color
        sigma[mask] = sd

    wants_inter = scenario in ("inter_indistinction", "mixed")
    wants_intra = scenario in ("intra_inconsistency", "mixed")
    focus: list[int] = []

    n_regions = int(rng.integers(2, 6))
    n_special = (2 if wants_inter else 0) + (1 if wants_intra else 0)
    n_plain = max(n_regions - n_special, 0)

    pair = None
    if wants_inter:
        rect_ids = [c for c in range(1, k) if is_rect_class(c)]
        ell_ids = [c for c in range(1, k) if not is_rect_class(c)]
        a, b = int(rng.choice(rect_ids)), int(rng.choice(ell_ids))
        if rng.random() < 0.5:
            a, b = b, a
        pair = (a, b)
        # class b borrows a colour within 0.4 * similarity of class a's
        offset = _unit(rng) * rng.uniform(0.0, spec.similarity * 0.4)
        colors[b] = np.clip(colors[a] + offset, 0.0, 1.0)
        focus += [a, b]

    for _ in range(n_plain):
        cls = int(rng.integers(1, k))
        if pair is not None and cls == pair[1]:
            cls = pair[0]
        cy, cx, ry, rx = _random_region(rng, h, w, scale)
        paint(_region_mask(rng, is_rect_class(cls), cy, cx, ry, rx, h, w), cls, colors[cls])

    if wants_intra:
        cands = [c for c in range(1, k) if pair is None or c not in pair] or list(range(1, k))
        c = int(rng.choice(cands))
        cy, cx, ry, rx = _random_region(rng, h, w, scale * 1.25)
        mask = _region_mask(rng, is_rect_class(c), cy, cx, ry, rx, h, w)
        yy, xx = np.mgrid[0:h, 0:w]
        split = (xx < cx) if rng.random() < 0.5 else (yy < cy)
        paint(mask, c, colors[c])
        shifted = np.clip(colors[c] + _unit(rng) * spec.intra_shift, 0.0, 1.0)
        paint(mask & split, c, shifted, noise * 2.0)
        focus.append(c)

    if pair is not None:
        a, b = pair
        cy, cx, ry, rx = _random_region(rng, h, w, scale)
        paint(_region_mask(rng, is_rect_class(a), cy, cx, ry, rx, h, w), a, colors[a])
        # place b so that it touches a along a random direction
        theta = rng.uniform(0, 2 * np.pi)
        ry2, rx2 = rng.uniform(5, 10, size=2) * scale
        dist_y = (ry + ry2) * 0.85 * np.sin(theta)
        dist_x = (rx + rx2) * 0.85 * np.cos(theta)
        cy2 = float(np.clip(cy + dist_y, ry2, h - 1 - ry2))
        cx2 = float(np.clip(cx + dist_x, rx2, w - 1 - rx2))
        paint(_region_mask(rng, is_rect_class(b), cy2, cx2, ry2, rx2, h, w), b, colors[b])

    img = base + rng.normal(size=(h, w, 3)) * sigma
    image = np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)
    return SampleRecord(
        image=np.ascontiguousarray(image),
        labels=labels,
        boundary=extract_boundary(labels, spec.thickness),
        seed=int(seed),
        scenario=scenario,
        focus=tuple(focus),
    )


def sample_seed(spec_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([spec_seed, index]).generate_state(2, np.uint32).view(np.uint64)[0])


def generate_dataset(spec: DatasetSpec) -> tuple[DatasetSpec, list[SampleRecord]]:
    """Generate ``spec.count`` samples; returns the spec with its empirical mean filled in."""
    samples = []
    for i in range(spec.count):
        s = sample_seed(spec.seed, i)
        pick = np.random.default_rng([spec.seed, i, 1]).random()
        idx = int(np.searchsorted(np.cumsum(spec.mix), pick, side="right"))
        samples.append(gen_sample(s, spec, SCENARIOS[min(idx, 2)]))
    if samples:
        mean = tuple(float(m) for m in np.mean([smp.image.mean(axis=(1, 2)) for smp in samples], axis=0))
    else:
        mean = (0.0, 0.0, 0.0)
    out = DatasetSpec(**{**spec.__dict__, "mean": mean})
    return out, samples
