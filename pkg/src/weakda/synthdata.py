"""Deterministic two-domain synthetic scene generator with per-pixel ground truth.

Scenes are colored geometric shapes (axis-aligned rectangles, circles,
upright triangles) on a gray background. Scene geometry is a pure function of
(spec.seed, scene index); the domain gap is an appearance-only transform
(hue rotation, brightness, blur, noise) that never touches the label mask.
Class color is the discriminative cue: shape type is drawn independently of
class, so a hue-rotated target domain genuinely confuses a source-trained
model.

Images are quantized to the uint8 grid at generation time, which makes the
on-disk PNG dump and in-memory generation bit-identical.
"""

import json
from dataclasses import dataclass, asdict, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import uniform_filter

DATASET_VERSION = 1

_PLACEMENT_RETRIES = 100
_MIN_REGION_PIXELS = 4

# stream tags keeping the per-scene substreams independent
_APPEARANCE_TAG = 0xA11
_POINT_TAG = 0xB22


def default_palette(num_classes):
    """Background gray plus evenly spaced hues for the object classes."""
    colors = [(0.55, 0.55, 0.55)]
    for c in range(1, num_classes):
        hue = (c - 1) / (num_classes - 1)
        r, g, b = hsv_to_rgb((hue, 0.85, 0.9))
        colors.append((float(r), float(g), float(b)))
    return tuple(colors)


@dataclass(frozen=True)
class DomainParams:
    """Appearance model of one domain; applied to images only, never to masks."""

    palette: tuple
    hue_shift: float = 0.0
    brightness: float = 0.0
    noise_sigma: float = 0.0
    blur_radius: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("noise_sigma and blur_radius must be non-negative")


@dataclass(frozen=True)
class BenchmarkSpec:
    H: int = 64
    W: int = 64
    C: int = 6
    class_rarity: tuple = (1.0, 0.9, 0.7, 0.5, 0.3, 0.1)
    n_source: int = 500
    n_target: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.C < 2:
            raise ValueError("need at least background plus one object class")
        if len(self.class_rarity) != self.C:
            raise ValueError("class_rarity must have one entry per category")
        if any(not (0.0 < r <= 1.0) for r in self.class_rarity):
            raise ValueError("class_rarity entries must lie in (0, 1]")
        if self.class_rarity[0] != 1.0:
            raise ValueError("background rarity must be 1.0 (always present)")
        if self.H < 4 or self.W < 4:
            raise ValueError("canvas too small")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def source_domain_params(spec):
    return DomainParams(palette=default_palette(spec.C))


def target_domain_params(spec):
    """The 'large gap' preset: strong enough that source-only accuracy drops."""
    return DomainParams(palette=default_palette(spec.C), hue_shift=0.15,
                        brightness=-0.2, noise_sigma=0.08, blur_radius=1)


@dataclass
class SceneBatch:
    """X: (B, H, W, 3) float32 images in [0, 1]; Y: (B, H, W, C) uint8 one-hot masks."""

    X: np.ndarray
    Y: np.ndarray

    def __len__(self):
        return self.X.shape[0]


# ---------------------------------------------------------------------------
# shape rasterization


def _class_extent_range(c, num_classes, h, w):
    """Per-class shape extent range in pixels; rarer (higher) classes are smaller."""
    span = min(h, w)
    t = (c - 1) / max(num_classes - 2, 1)
    lo = (0.18 - 0.08 * t) * span
    hi = (0.30 - 0.14 * t) * span
    return lo, hi


def _raster_rect(h, w, cy, cx, eh, ew):
    mask = np.zeros((h, w), dtype=bool)
    r0, r1 = int(round(cy - eh / 2)), int(round(cy + eh / 2))
    c0, c1 = int(round(cx - ew / 2)), int(round(cx + ew / 2))
    if r0 < 0 or c0 < 0 or r1 >= h or c1 >= w:
        return None
    mask[r0:r1 + 1, c0:c1 + 1] = True
    return mask


def _raster_circle(h, w, cy, cx, extent):
    r = extent / 2.0
    if cy - r < 0 or cy + r >= h or cx - r < 0 or cx + r >= w:
        return None
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _raster_triangle(h, w, cy, cx, eh, ew):
    """Upright isoceles triangle: apex on top, base at the bottom."""
    top = cy - eh / 2.0
    bot = cy + eh / 2.0
    if top < 0 or bot >= h or cx - ew / 2.0 < 0 or cx + ew / 2.0 >= w:
        return None
    yy, xx = np.ogrid[:h, :w]
    frac = np.clip((yy - top) / max(bot - top, 1e-9), 0.0, 1.0)
    half = frac * (ew / 2.0)
    return (yy >= top) & (yy <= bot) & (np.abs(xx - cx) <= half)


def _place_shape(rng, labels, c, spec):
    """Rasterize one non-overlapping shape for class c, retrying placement."""
    h, w = labels.shape
    lo, hi = _class_extent_range(c, spec.C, h, w)
    for _ in range(_PLACEMENT_RETRIES):
        kind = int(rng.integers(0, 3))
        cy = float(rng.uniform(0, h))
        cx = float(rng.uniform(0, w))
        if kind == 0:
            mask = _raster_rect(h, w, cy, cx, rng.uniform(lo, hi), rng.uniform(lo, hi))
        elif kind == 1:
            mask = _raster_circle(h, w, cy, cx, rng.uniform(lo, hi))
        else:
            mask = _raster_triangle(h, w, cy, cx, rng.uniform(lo, hi), rng.uniform(lo, hi))
        if mask is None or mask.sum() < _MIN_REGION_PIXELS:
            continue
        if np.any(labels[mask] != 0):
            continue
        labels[mask] = c
        return
    raise RuntimeError(
        f"could not place a shape for class {c} after {_PLACEMENT_RETRIES} attempts "
        f"(canvas {h}x{w} too crowded or too small)")


# ---------------------------------------------------------------------------
# domain shift


def _apply_domain_shift(x, dp, rng_appearance):
    if dp.hue_shift != 0.0 or dp.brightness != 0.0:
        hsv = rgb_to_hsv(np.clip(x, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + dp.hue_shift) % 1.0
        hsv[..., 2] = np.clip(hsv[..., 2] + dp.brightness, 0.0, 1.0)
        x = hsv_to_rgb(hsv)
    if dp.blur_radius > 0:
        size = 2 * dp.blur_radius + 1
        x = np.stack([uniform_filter(x[..., ch], size=size, mode="nearest")
                      for ch in range(3)], axis=-1)
    if dp.noise_sigma > 0:
        x = x + rng_appearance.normal(0.0, dp.noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# public generation API


def generate_scene(spec, dp, index):
    """Render scene `index` of the benchmark under domain parameters `dp`.

    Returns (X, Y): X (H, W, 3) float32 on the uint8 grid, Y (H, W, C) uint8
    one-hot. Deterministic in (spec.seed, index); the same index rendered under
    two domains shares its geometry and mask exactly.
    """
    if index < 0:
        raise ValueError("scene index must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    labels = np.zeros((spec.H, spec.W), dtype=np.int64)

    present = [c for c in range(1, spec.C) if rng.random() < spec.class_rarity[c]]
    jitters = {}
    for c in present:
        _place_shape(rng, labels, c, spec)
        jitters[c] = float(rng.uniform(-0.05, 0.05))

    palette = np.asarray(dp.palette, dtype=float)
    if palette.shape != (spec.C, 3):
        raise ValueError(f"palette must have shape ({spec.C}, 3)")
    x = palette[labels].copy()
    for c, jit in jitters.items():
        x[labels == c] += jit

    rng_app = np.random.default_rng(np.random.SeedSequence([spec.seed, index, _APPEARANCE_TAG]))
    x = _apply_domain_shift(x, dp, rng_app)
    x = np.round(x * 255.0).astype(np.uint8).astype(np.float32) / 255.0

    onehot = np.zeros((spec.H, spec.W, spec.C), dtype=np.uint8)
    yy, xx = np.indices(labels.shape)
    onehot[yy, xx, labels] = 1
    return x, onehot


def generate_batch(spec, dp, indices):
    """Stack scenes for the given indices into a SceneBatch."""
    xs, ys = [], []
    for i in indices:
        x, y = generate_scene(spec, dp, int(i))
        xs.append(x)
        ys.append(y)
    return SceneBatch(X=np.stack(xs), Y=np.stack(ys))


def mask_labels(onehot):
    """(..., H, W, C) one-hot -> (..., H, W) integer labels."""
    return onehot.argmax(axis=-1)


# ---------------------------------------------------------------------------
# weak and point labels


def weak_from_mask(onehot):
    """Multi-hot presence vector: y_c = 1 iff class c occupies at least one pixel."""
    onehot = np.asarray(onehot)
    if onehot.ndim != 3:
        raise ValueError("expected a single (H, W, C) mask")
    return (onehot.sum(axis=(0, 1)) > 0).astype(np.uint8)


def points_from_mask(onehot, seed):
    """One uniformly sampled pixel per present category.

    Returns an (N, 3) int64 array of (row, col, category) tuples, ordered by
    category. Deterministic in `seed`.
    """
    return n_points_from_mask(onehot, 1, seed)


def n_points_from_mask(onehot, n, seed):
    """Up to `n` distinct uniformly sampled pixels per present category."""
    if n < 1:
        raise ValueError("n must be >= 1")
    onehot = np.asarray(onehot)
    rng = np.random.default_rng(seed)
    tuples = []
    for c in range(onehot.shape[2]):
        rows, cols = np.nonzero(onehot[..., c])
        if rows.size == 0:
            continue
        take = min(n, rows.size)
        chosen = rng.choice(rows.size, size=take, replace=False)
        for idx in np.sort(chosen):
            tuples.append((int(rows[idx]), int(cols[idx]), c))
    if not tuples:
        return np.zeros((0, 3), dtype=np.int64)
    return np.asarray(tuples, dtype=np.int64)


def points_for_scene(spec, index, onehot, n):
    """Deterministic per-scene point annotation (fixed once, like a human label)."""
    seed = np.random.SeedSequence([spec.seed, index, _POINT_TAG, n])
    return n_points_from_mask(onehot, n, seed)


# ---------------------------------------------------------------------------
# on-disk datasets

_SPLIT_DOMAINS = {"source": "source", "source_val": "source",
                  "target": "target", "target_val": "target"}


def split_indices(spec, split, n_val):
    """Index ranges of the four canonical splits; val scenes never overlap train."""
    if split == "source":
        return range(0, spec.n_source)
    if split == "source_val":
        return range(spec.n_source, spec.n_source + n_val)
    if split == "target":
        return range(0, spec.n_target)
    if split == "target_val":
        return range(spec.n_target, spec.n_target + n_val)
    raise ValueError(f"unknown split {split!r}")


def dump_dataset(out_dir, spec, n_val=100):
    """Write PNG images+masks for all four splits plus a manifest.

    Rerunning with the same spec reproduces every file byte for byte.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    domains = {"source": source_domain_params(spec), "target": target_domain_params(spec)}
    manifest = {
        "version": DATASET_VERSION,
        "spec": asdict(spec),
        "n_val": n_val,
        "domains": {name: asdict(dp) for name, dp in domains.items()},
        "splits": {},
    }
    for split, domain in _SPLIT_DOMAINS.items():
        d = out_dir / split
        d.mkdir(exist_ok=True)
        indices = list(split_indices(spec, split, n_val))
        for i in indices:
            x, y = generate_scene(spec, domains[domain], i)
            img = Image.fromarray(np.round(x * 255.0).astype(np.uint8), mode="RGB")
            img.save(d / f"img_{i:05d}.png")
            Image.fromarray(mask_labels(y).astype(np.uint8), mode="L").save(
                d / f"mask_{i:05d}.png")
        manifest["splits"][split] = {"domain": domain, "indices": indices}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir / "manifest.json"


def load_manifest(root):
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["version"] != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {manifest['version']}")
    spec_kwargs = dict(manifest["spec"])
    spec_kwargs["class_rarity"] = tuple(spec_kwargs["class_rarity"])
    return BenchmarkSpec(**spec_kwargs), manifest


def load_split(root, split):
    """Load one split back into a SceneBatch, bit-identical to generation."""
    spec, manifest = load_manifest(root)
    if split not in manifest["splits"]:
        raise ValueError(f"split {split!r} not present in dataset")
    indices = manifest["splits"][split]["indices"]
    xs, ys = [], []
    for i in indices:
        img = np.asarray(Image.open(root / split / f"img_{i:05d}.png"), dtype=np.uint8)
        xs.append(img.astype(np.float32) / 255.0)
        lab = np.asarray(Image.open(root / split / f"mask_{i:05d}.png"), dtype=np.int64)
        onehot = np.zeros((spec.H, spec.W, spec.C), dtype=np.uint8)
        yy, xx = np.indices(lab.shape)
        onehot[yy, xx, lab] = 1
        ys.append(onehot)
    return SceneBatch(X=np.stack(xs), Y=np.stack(ys))
