"""Image/mask/saliency triples: loading, resizing, fold plans and synthetic data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.transform import resize as _sk_resize

N_FOLDS = 5
VAL_FRACTION = 0.2
QUALITY_LEVELS = ("satisfactory", "moderate", "low", "poor")
SUBDIRS = ("images", "masks", "saliency")


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    saliency: np.ndarray
    quality: str | None = None

    def __post_init__(self):
        if not (self.image.shape == self.mask.shape == self.saliency.shape) or self.image.ndim != 2:
            raise ValueError(
                f"{self.id}: image {self.image.shape}, mask {self.mask.shape} and saliency "
                f"{self.saliency.shape} must be equal 2-D shapes"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.id}: mask must contain only 0 and 1")
        for name in ("image", "saliency"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"{self.id}: {name} values must lie in [0, 1]")
        for arr in (self.image, self.mask, self.saliency):
            arr.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def replace(self, **changes) -> "Sample":
        fields = dict(id=self.id, image=self.image, mask=self.mask,
                      saliency=self.saliency, quality=self.quality)
        fields.update(changes)
        return Sample(**fields)


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                raise ValueError(f"{path}: expected 8-bit single-channel image, got mode {im.mode}")
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc


def load_dataset(root: str | Path) -> list[Sample]:
    """Load ``<root>/{images,masks,saliency}/<id>.png`` into samples sorted by id."""
    root = Path(root)
    listing = {}
    for sub in SUBDIRS:
        d = root / sub
        if not d.is_dir():
            raise FileNotFoundError(f"{root}: missing {sub}/ directory")
        listing[sub] = {p.stem: p for p in d.iterdir() if p.suffix.lower() == ".png"}
    all_ids = set().union(*listing.values())
    if not all_ids:
        raise ValueError(f"{root}: dataset is empty")
    for sample_id in sorted(all_ids):
        missing = [sub for sub in SUBDIRS if sample_id not in listing[sub]]
        if missing:
            raise FileNotFoundError(f"{sample_id}: no counterpart in {', '.join(missing)}")

    samples = []
    for sample_id in sorted(all_ids):
        image = _read_gray(listing["images"][sample_id]) / 255.0
        mask = (_read_gray(listing["masks"][sample_id]) >= 128).astype(np.uint8)
        saliency = _read_gray(listing["saliency"][sample_id]) / 255.0
        samples.append(Sample(sample_id, image, mask, saliency))
    return samples


def _to_u8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_dataset(samples: list[Sample], root: str | Path) -> Path:
    """Write samples in the directory layout read by :func:`load_dataset`."""
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(_to_u8(s.image)).save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask * 255).astype(np.uint8)).save(root / "masks" / f"{s.id}.png")
        Image.fromarray(_to_u8(s.saliency)).save(root / "saliency" / f"{s.id}.png")
    return root


def resize_sample(s: Sample, side: int) -> Sample:
    """Bilinear resize for image and saliency, nearest-neighbour for the mask."""
    if side < 16 or side % 16:
        raise ValueError(
            f"side must be a positive multiple of 16 so four 2x poolings divide evenly, got {side}"
        )
    if s.shape == (side, side):
        return s
    out = (side, side)
    image = _sk_resize(s.image, out, order=1, mode="edge", anti_aliasing=False, preserve_range=True)
    saliency = _sk_resize(s.saliency, out, order=1, mode="edge", anti_aliasing=False, preserve_range=True)
    rows = np.minimum((np.arange(side) + 0.5) * s.shape[0] / side, s.shape[0] - 1).astype(int)
    cols = np.minimum((np.arange(side) + 0.5) * s.shape[1] / side, s.shape[1] - 1).astype(int)
    mask = (s.mask[np.ix_(rows, cols)] > 0).astype(np.uint8)
    return s.replace(image=np.clip(image, 0.0, 1.0), mask=mask, saliency=np.clip(saliency, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Fold plans


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    folds: tuple[tuple[str, ...], ...]
    val_fraction: float = VAL_FRACTION

    def __post_init__(self):
        object.__setattr__(self, "folds", tuple(tuple(f) for f in self.folds))
        if len(self.folds) < 2:
            raise ValueError(f"a fold plan needs at least 2 folds, got {len(self.folds)}")
        seen: set[str] = set()
        for fold in self.folds:
            overlap = seen.intersection(fold)
            if overlap:
                raise ValueError(f"ids assigned to more than one fold: {sorted(overlap)[:5]}")
            seen.update(fold)

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    @property
    def ids(self) -> list[str]:
        return sorted(i for fold in self.folds for i in fold)

    def split(self, fold: int) -> tuple[list[str], list[str], list[str]]:
        """(train, val, test) ids for 1-based ``fold``.

        Validation takes ceil(val_fraction * n) of the non-test ids, drawn with a
        generator seeded by (seed, fold).
        """
        if not 1 <= fold <= self.n_folds:
            raise ValueError(f"fold must be in 1..{self.n_folds}, got {fold}")
        test = sorted(self.folds[fold - 1])
        rest = sorted(i for k, f in enumerate(self.folds, 1) if k != fold for i in f)
        order = np.random.default_rng([self.seed, fold]).permutation(len(rest))
        n_val = math.ceil(self.val_fraction * len(rest) - 1e-9)
        val = sorted(rest[i] for i in order[:n_val])
        train = sorted(rest[i] for i in order[n_val:])
        return train, val, test

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "val_fraction": self.val_fraction, "folds": [list(f) for f in self.folds]},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(int(d["seed"]), tuple(tuple(f) for f in d["folds"]), float(d["val_fraction"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())


def make_fold_plan(ids, seed: int, n_folds: int = N_FOLDS) -> FoldPlan:
    ids = sorted(set(ids))
    if n_folds < 2:
        raise ValueError(f"need at least 2 folds, got {n_folds}")
    if len(ids) < n_folds:
        raise ValueError(f"need at least {n_folds} samples for {n_folds}-fold CV, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = tuple(tuple(sorted(ids[i] for i in part)) for part in np.array_split(order, n_folds))
    return FoldPlan(seed, folds)


# ---------------------------------------------------------------------------
# Synthetic BUS-like data


@dataclass(frozen=True)
class SyntheticConfig:
    count: int = 200
    size: int = 128
    quality_mix: tuple[float, float, float, float] = (0.7, 0.2, 0.1, 0.0)
    seed: int = 0
    id_prefix: str = "syn"

    def __post_init__(self):
        object.__setattr__(self, "quality_mix", tuple(float(w) for w in self.quality_mix))
        if len(self.quality_mix) != 4:
            raise ValueError("quality_mix needs four weights (satisfactory, moderate, low, poor)")
        if any(w < 0 or not math.isfinite(w) for w in self.quality_mix):
            raise ValueError(f"quality_mix weights must be non-negative, got {self.quality_mix}")
        if abs(sum(self.quality_mix) - 1.0) > 1e-9:
            raise ValueError(f"quality_mix must sum to 1, got {sum(self.quality_mix)!r}")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if self.size < 64:
            raise ValueError(f"size must be at least 64 to fit the tumor layout, got {self.size}")


@dataclass
class _Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    theta: float

    def inside(self, yy, xx, scale: float = 1.0):
        c, s = math.cos(self.theta), math.sin(self.theta)
        dy, dx = yy - self.cy, xx - self.cx
        u = (dx * c + dy * s) / (self.rx * scale)
        v = (-dx * s + dy * c) / (self.ry * scale)
        return u * u + v * v <= 1.0

    def radial(self, yy, xx):
        c, s = math.cos(self.theta), math.sin(self.theta)
        dy, dx = yy - self.cy, xx - self.cx
        u = (dx * c + dy * s) / self.rx
        v = (-dx * s + dy * c) / self.ry
        return np.sqrt(u * u + v * v), np.arctan2(v, u)


def _random_ellipse(rng, size, r_lo, r_hi, avoid=(), margin=4.0, tries=200) -> _Ellipse:
    for _ in range(tries):
        ry = rng.uniform(r_lo, r_hi) * size
        rx = ry * rng.uniform(0.7, 1.5)
        reach = max(rx, ry) + margin
        cy = rng.uniform(reach, size - reach)
        cx = rng.uniform(reach, size - reach)
        e = _Ellipse(cy, cx, ry, rx, rng.uniform(0, math.pi))
        if all(math.hypot(e.cy - o.cy, e.cx - o.cx) > max(e.rx, e.ry) + max(o.rx, o.ry) + 2 * margin
               for o in avoid):
            return e
    raise RuntimeError("could not place a non-overlapping region; image too small")


def _place_distractor(rng, size, radius, avoid, margin) -> _Ellipse:
    # shrink until the region fits away from the tumors
    for _ in range(6):
        try:
            return _random_ellipse(rng, size, radius * 0.9, radius * 1.05, avoid=avoid, margin=margin)
        except RuntimeError:
            radius *= 0.8
    raise RuntimeError("could not place a distractor region")


def _smooth_blob(region: np.ndarray, sigma: float) -> np.ndarray:
    blob = ndimage.gaussian_filter(region.astype(np.float64), sigma)
    peak = blob.max()
    return blob / peak if peak > 0 else blob


def _blob_saliency(region, sigma, peak):
    # raised-and-smoothed plateau: high inside, soft falloff across the edge
    return peak * _smooth_blob(region, sigma)


def _ultrasound_image(rng, size, tumor_regions, lobules, yy, xx) -> np.ndarray:
    depth = yy / size
    tissue = 0.55 + 0.15 * ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 12) * 6
    tissue = tissue - 0.12 * depth
    # horizontal layering, loosely mimicking skin/fat/gland bands
    bands = 0.05 * np.sin(2 * math.pi * (depth * rng.uniform(2.0, 4.0) + rng.uniform(0, 1)))
    clean = tissue + bands
    for e in lobules:
        clean = np.where(e.inside(yy, xx), clean * rng.uniform(0.55, 0.7), clean)
    for region, r in tumor_regions:
        clean = np.where(region, rng.uniform(0.12, 0.25) + 0.05 * np.clip(1 - r, 0, 1), clean)
    clean = ndimage.gaussian_filter(np.clip(clean, 0.02, 1.0), 0.8)
    looks = 4.0
    speckle = rng.gamma(looks, 1.0 / looks, size=(size, size))
    img = ndimage.gaussian_filter(clean * speckle, 0.6)
    return np.clip(img, 0.0, 1.0)


def _tumor_regions(rng, tumors, yy, xx) -> list[tuple[np.ndarray, np.ndarray]]:
    regions = []
    for e in tumors:
        r, ang = e.radial(yy, xx)
        wobble = 1.0 + 0.08 * np.sin(ang * int(rng.integers(3, 7)) + rng.uniform(0, 2 * math.pi))
        regions.append((r <= wobble, r))
    return regions


def _stats(saliency, threshold=0.3):
    from .saliency_filter import ConfidenceParams, confidence_decision, extract_contours

    contours = extract_contours(saliency, threshold)
    rejected, _ = confidence_decision(contours, ConfidenceParams())
    return contours, rejected


def _synth_saliency(rng, quality, size, mask, tumor_masks, tumors, lobules, yy, xx) -> np.ndarray:
    sigma = size / 40
    faint = 0.15 * ndimage.gaussian_filter(rng.random((size, size)), size / 16)
    faint = faint / max(faint.max(), 1e-12) * rng.uniform(0.05, 0.2)

    if quality == "satisfactory":
        primary = tumor_masks[0]
        sal = _blob_saliency(primary, sigma, rng.uniform(0.88, 1.0))
        if len(tumors) > 1:
            secondary = tumor_masks[1] & ~primary
            amp = rng.uniform(0.45, 0.7)
            for _ in range(20):
                cand = np.maximum(sal, _blob_saliency(secondary, sigma, amp * sal.max()))
                cand = np.maximum(cand, faint)
                contours, rejected = _stats(cand)
                if not rejected:
                    break
                amp *= 0.8
            sal = cand
        else:
            sal = np.maximum(sal, faint)
        return sal

    if quality == "moderate":
        out = np.zeros((size, size))
        for e in tumors:
            shifted = _Ellipse(
                e.cy + rng.normal(0, 0.25) * e.ry,
                e.cx + rng.normal(0, 0.25) * e.rx,
                e.ry * rng.uniform(0.65, 1.35),
                e.rx * rng.uniform(0.65, 1.35),
                e.theta + rng.normal(0, 0.6),
            )
            r, ang = shifted.radial(yy, xx)
            region = r <= 1.0 + 0.25 * np.sin(ang * rng.integers(2, 5) + rng.uniform(0, 6.3))
            out = np.maximum(out, region)
        sal = _blob_saliency(out, sigma * 1.5, rng.uniform(0.75, 0.95))
        return np.maximum(sal, faint)

    if quality == "low":
        # tumor blob with moderate mean intensity plus brighter, smaller
        # distractor(s) of comparable cumulative intensity; the distractor size is
        # tuned until the tumor contour leads on cumulative but not mean intensity
        base = tumors[0]
        tumor_sal = _blob_saliency(tumor_masks[0], sigma, rng.uniform(0.5, 0.6))
        n_distract = int(rng.integers(1, 3))
        placed, amps = [], []
        for _ in range(n_distract):
            r = math.sqrt(base.rx * base.ry) * 0.8 / size
            placed.append(_place_distractor(rng, size, r, list(tumors) + placed, margin=2.0))
            amps.append(rng.uniform(0.9, 1.0))
        factor = 0.75
        for _ in range(25):
            sal = tumor_sal.copy()
            for d, amp in zip(placed, amps):
                shrunk = _Ellipse(d.cy, d.cx, d.ry * factor, d.rx * factor, d.theta)
                sal = np.maximum(sal, _blob_saliency(shrunk.inside(yy, xx), sigma, amp))
            sal = np.maximum(sal, faint)
            contours, _ = _stats(sal)
            if len(contours) >= 2:
                top_is_tumor = bool(mask[tuple(contours[0].pixels[0])]) or bool(
                    mask[contours[0].pixels[:, 0], contours[0].pixels[:, 1]].any())
                ratio = contours[0].cum_intensity / contours[1].cum_intensity
                if top_is_tumor and 1.1 < ratio < 1.8:
                    break
                factor *= 0.93 if not top_is_tumor or ratio <= 1.1 else 1.05
            else:
                factor *= 1.05
        return sal

    if quality == "poor":
        keepout = ndimage.binary_dilation(mask, iterations=max(2, int(sigma * 3)))
        base = tumors[0]
        r = math.sqrt(base.rx * base.ry) / size
        d = _place_distractor(rng, size, r, list(tumors), margin=sigma * 3)
        sal = _blob_saliency(d.inside(yy, xx), sigma, rng.uniform(0.8, 1.0))
        sal = np.maximum(sal, faint)
        return np.where(keepout, 0.0, sal)

    raise ValueError(f"unknown saliency quality {quality!r}")


def synthesize_sample(cfg: SyntheticConfig, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size
    quality = QUALITY_LEVELS[int(rng.choice(4, p=cfg.quality_mix))]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    n_tumors = 1 if rng.random() < 0.75 else 2
    tumors = [_random_ellipse(rng, size, 0.10, 0.18)]
    if n_tumors == 2:
        tumors.append(_random_ellipse(rng, size, 0.05, 0.08, avoid=tumors))
    lobules = []
    for _ in range(int(rng.integers(0, 3))):
        try:
            lobules.append(_random_ellipse(rng, size, 0.05, 0.10, avoid=tumors + lobules, tries=50))
        except RuntimeError:
            break

    regions = _tumor_regions(rng, tumors, yy, xx)
    mask = np.logical_or.reduce([region for region, _ in regions])
    image = _ultrasound_image(rng, size, regions, lobules, yy, xx)
    saliency = _synth_saliency(rng, quality, size, mask, [r for r, _ in regions], tumors, lobules, yy, xx)
    saliency = np.clip(saliency, 0.0, 1.0)
    return Sample(
        id=f"{cfg.id_prefix}{index:05d}",
        image=image,
        mask=mask.astype(np.uint8),
        saliency=saliency,
        quality=quality,
    )


def generate_synthetic(cfg: SyntheticConfig) -> list[Sample]:
    """Speckled images with 1-2 dark elliptical tumors, exact masks, and saliency
    maps whose quality level is drawn from ``cfg.quality_mix``.

    Each sample draws from its own generator seeded by (seed, index), so output
    is a pure function of the config.
    """
    return [synthesize_sample(cfg, i) for i in range(cfg.count)]
