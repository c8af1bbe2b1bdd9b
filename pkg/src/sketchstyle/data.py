"""Procedural paired dataset: palette-styled shape paintings and their edge sketches.

Every style class owns a hue-coherent palette. Palette colors are calibrated so
that the color of rank ``j`` has the same Rec.601 luma in every class; a layout
re-rendered with another class's palette therefore has the same luminance
structure and the same sketch.

Images are float32 numpy arrays, H x W x C, values in [0, 1].
"""
from __future__ import annotations

import colorsys
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy import ndimage
from skimage.morphology import thin

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)
# luma of palette color rank j, shared by all classes
LUMA_LADDER = (0.18, 0.30, 0.42, 0.54, 0.66, 0.78)
BACKGROUND_LUMA = 0.92
MIN_CLASS_HUE_GAP = 30.0
TEXTURES = ("flat", "gradient", "stripes")
# Sobel magnitude (unnormalized 3x3 kernels) above which a pixel is an edge
EDGE_THRESHOLD = 0.2


class ImageDecodeError(ValueError):
    pass


@dataclass(frozen=True)
class StyleClass:
    id: int
    hue: float                         # class hue center, degrees
    palette: Tuple[Tuple[float, float, float], ...]
    background: Tuple[float, float, float]
    texture_weights: Tuple[float, float, float]   # P(flat), P(gradient), P(stripes)
    stripe_period: float               # fraction of image size

    def palette_hues(self) -> List[float]:
        return [rgb_to_hue(c) for c in self.palette + (self.background,)]

    def mean_hue(self) -> float:
        return circular_mean_deg(self.palette_hues())

    def to_dict(self) -> dict:
        return {
            "id": self.id, "hue": self.hue, "palette": [list(c) for c in self.palette],
            "background": list(self.background), "texture_weights": list(self.texture_weights),
            "stripe_period": self.stripe_period,
        }


@dataclass
class Shape:
    kind: str                 # "ellipse" | "polygon"
    points: List[Tuple[float, float]]
    color: int                # palette rank
    texture: str
    color2: int
    angle: float              # radians, for gradient / stripes


@dataclass
class Layout:
    size: int
    shapes: List[Shape] = field(default_factory=list)


# ---------------------------------------------------------------------------
# color helpers
# ---------------------------------------------------------------------------

def rgb_to_hue(rgb) -> float:
    return colorsys.rgb_to_hsv(*rgb)[0] * 360.0


def circular_mean_deg(hues: Sequence[float], weights=None) -> float:
    a = np.deg2rad(np.asarray(hues, dtype=np.float64))
    w = np.ones_like(a) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(np.rad2deg(np.arctan2((w * np.sin(a)).sum(), (w * np.cos(a)).sum())) % 360.0)


def hue_distance(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def _color_with_luma(hue: float, sat: float, luma: float) -> Tuple[float, float, float]:
    """HSV color of the given hue whose luma equals `luma`, lowering saturation if needed."""
    h = (hue % 360.0) / 360.0
    lo, hi = 0.0, sat
    s = sat
    for _ in range(60):
        full = float(LUMA @ colorsys.hsv_to_rgb(h, s, 1.0))
        if full >= luma:
            break
        hi = s
        s = 0.5 * (lo + hi)
    full = float(LUMA @ colorsys.hsv_to_rgb(h, s, 1.0))
    v = min(1.0, luma / full)
    return tuple(float(c) for c in colorsys.hsv_to_rgb(h, s, v))


def make_style_classes(num_classes: int, seed: int = 0) -> List[StyleClass]:
    """Evenly spaced hue centers; palettes jitter hue by less than half the slack over 30 degrees."""
    if not 1 <= num_classes <= int(360 // MIN_CLASS_HUE_GAP):
        raise ValueError(f"num_classes must be in [1, {int(360 // MIN_CLASS_HUE_GAP)}] (got {num_classes})")
    rng = np.random.default_rng([seed, 1729])
    spacing = 360.0 / num_classes
    jitter = min(10.0, max(0.0, (spacing - MIN_CLASS_HUE_GAP) / 2 - 1e-6))
    offset = rng.uniform(0, spacing)
    classes = []
    for cid in range(num_classes):
        hue = (offset + cid * spacing) % 360.0
        k = int(rng.integers(4, 7))
        palette = tuple(
            _color_with_luma(hue + rng.uniform(-jitter, jitter), rng.uniform(0.55, 0.95), LUMA_LADDER[j])
            for j in range(k)
        )
        background = _color_with_luma(hue, rng.uniform(0.25, 0.45), BACKGROUND_LUMA)
        tw = rng.dirichlet([2.0, 2.0, 2.0])
        classes.append(StyleClass(
            id=cid, hue=hue, palette=palette, background=background,
            texture_weights=tuple(float(t) for t in tw), stripe_period=float(rng.uniform(0.2, 0.3)),
        ))
    return classes


# ---------------------------------------------------------------------------
# painting synthesis
# ---------------------------------------------------------------------------

def random_layout(style: StyleClass, size: int, rng: np.random.Generator) -> Layout:
    n_shapes = int(rng.integers(3, 9))
    k = len(style.palette)
    layout = Layout(size)
    for _ in range(n_shapes):
        cx, cy = rng.uniform(0.1, 0.9, size=2) * size
        r = rng.uniform(0.1, 0.25) * size
        if rng.random() < 0.5:
            rx, ry = r, r * rng.uniform(0.5, 1.0)
            kind, points = "ellipse", [(cx - rx, cy - ry), (cx + rx, cy + ry)]
        else:
            n = int(rng.integers(3, 7))
            ang = np.sort(rng.uniform(0, 2 * np.pi, n))
            rad = r * rng.uniform(0.6, 1.0, n)
            kind = "polygon"
            points = [(float(cx + a * np.cos(t)), float(cy + a * np.sin(t))) for a, t in zip(rad, ang)]
        color = int(rng.integers(0, k))
        texture = TEXTURES[int(rng.choice(3, p=style.texture_weights))]
        color2 = (color + 1) % k if color + 1 < k else color - 1
        layout.shapes.append(Shape(kind, [tuple(map(float, p)) for p in points], color, texture,
                                   color2, float(rng.uniform(0, np.pi))))
    return layout


def _shape_mask(shape: Shape, size: int) -> np.ndarray:
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    if shape.kind == "ellipse":
        draw.ellipse(shape.points, fill=255)
    else:
        draw.polygon(shape.points, fill=255)
    return np.asarray(img) > 0


def render_painting(layout: Layout, style: StyleClass, period: Optional[float] = None) -> np.ndarray:
    size = layout.size
    pal = np.asarray(style.palette, dtype=np.float64)
    k = len(pal)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = style.background
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = (period if period is not None else style.stripe_period) * size
    for shape in layout.shapes:
        mask = _shape_mask(shape, size)
        if not mask.any():
            continue
        c1, c2 = pal[shape.color % k], pal[shape.color2 % k]
        proj = xx * math.cos(shape.angle) + yy * math.sin(shape.angle)
        if shape.texture == "flat":
            img[mask] = c1
        elif shape.texture == "gradient":
            p = proj[mask]
            t = (p - p.min()) / max(p.max() - p.min(), 1e-9)
            img[mask] = (1 - t)[:, None] * c1 + t[:, None] * c2
        else:
            band = np.floor(proj[mask] / (period / 2)).astype(int) % 2 == 0
            img[mask] = np.where(band[:, None], c1, c2)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def quantize(image: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(image, 0, 1) * 255.0) / 255.0).astype(np.float32)


def synthesize_painting(style: StyleClass, seed: int, size: int = 64) -> np.ndarray:
    """Deterministic painting for (style, seed); 8-bit quantized so it survives PNG exactly."""
    rng = np.random.default_rng([seed, style.id])
    return quantize(render_painting(random_layout(style, size, rng), style))


# ---------------------------------------------------------------------------
# sketch extraction
# ---------------------------------------------------------------------------

def grayscale_np(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.shape[-1] == 1:
        return image[..., 0].astype(np.float64)
    if image.shape[-1] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {image.shape[-1]}")
    return image.astype(np.float64) @ LUMA


def extract_sketch(painting: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Inverted thinned Sobel edge map, H x W x 1: white (1.0) background, black (0.0) lines."""
    if painting.min() < 0 or painting.max() > 1:
        raise ValueError("painting values must lie in [0, 1]")
    gray = grayscale_np(painting)
    mag = np.hypot(ndimage.sobel(gray, axis=0, mode="nearest"), ndimage.sobel(gray, axis=1, mode="nearest"))
    edges = thin(mag > threshold)
    return (1.0 - edges.astype(np.float32))[..., None]


# ---------------------------------------------------------------------------
# hue statistics
# ---------------------------------------------------------------------------

def _hsv(image: np.ndarray) -> np.ndarray:
    from skimage.color import rgb2hsv
    return rgb2hsv(np.clip(image, 0, 1))


def hue_histogram(image: np.ndarray, bins: int = 36) -> np.ndarray:
    """Saturation-weighted hue histogram normalized to unit mass."""
    hsv = _hsv(image)
    w = hsv[..., 1] * hsv[..., 2]
    hist, _ = np.histogram(hsv[..., 0].ravel(), bins=bins, range=(0.0, 1.0), weights=w.ravel())
    total = hist.sum()
    return hist / total if total > 0 else np.full(bins, 1.0 / bins)


def hue_histogram_distance(a: np.ndarray, b: np.ndarray, bins: int = 36) -> float:
    """L1 distance between saturation-weighted hue histograms (0 = identical, 2 = disjoint)."""
    return float(np.abs(hue_histogram(a, bins) - hue_histogram(b, bins)).sum())


def image_mean_hue(image: np.ndarray) -> float:
    hsv = _hsv(image)
    return circular_mean_deg(hsv[..., 0].ravel() * 360.0, (hsv[..., 1] * hsv[..., 2]).ravel())


def palette_band_mass(image: np.ndarray, style: StyleClass, half_width: float = 15.0) -> float:
    """Fraction of chromatic pixels whose hue lies within `half_width` of some palette hue."""
    hsv = _hsv(image)
    chroma = hsv[..., 1] > 1e-3
    hues = hsv[..., 0][chroma] * 360.0
    if hues.size == 0:
        return 1.0
    ok = np.zeros(hues.shape, dtype=bool)
    for h in style.palette_hues():
        d = np.abs(hues - h) % 360.0
        ok |= np.minimum(d, 360.0 - d) <= half_width
    return float(ok.mean())


# ---------------------------------------------------------------------------
# PNG IO
# ---------------------------------------------------------------------------

def save_png(image: np.ndarray, path) -> None:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[-1] != 3):
        raise ValueError(f"expected H x W, H x W x 1 or H x W x 3, got {arr.shape}")
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, mode="L" if u8.ndim == 2 else "RGB").save(path, format="PNG")


def load_png(path, channels: Optional[int] = None) -> np.ndarray:
    """Load an 8-bit PNG as float32 H x W x C in [0, 1]."""
    try:
        with Image.open(path) as im:
            if channels == 1 or (channels is None and im.mode in ("L", "1", "I", "I;16")):
                im = im.convert("L")
            else:
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageDecodeError(f"cannot decode image {path}: {e}") from e
    return arr[..., None] if arr.ndim == 2 else arr


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class PairedSample:
    sketch: np.ndarray       # H x W x 1
    painting: np.ndarray     # H x W x 3
    style_class: int


def sample_seed(seed: int, cid: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, cid, index]).generate_state(1)[0])


def make_sample(style: StyleClass, seed: int, size: int) -> PairedSample:
    painting = synthesize_painting(style, seed, size)
    return PairedSample(extract_sketch(painting), painting, style.id)


def generate_samples(num_classes: int, samples_per_class: int, size: int, seed: int,
                     classes: Optional[List[StyleClass]] = None) -> Iterator[Tuple[int, PairedSample]]:
    """Yield (sample_id, sample); sample ids run class-major."""
    classes = classes or make_style_classes(num_classes, seed)
    for cid, style in enumerate(classes):
        for i in range(samples_per_class):
            yield cid * samples_per_class + i, make_sample(style, sample_seed(seed, cid, i), size)


class PairedArrays:
    """In-memory stack of samples, NCHW float32, ready to become tensors."""

    def __init__(self, sketches: np.ndarray, paintings: np.ndarray, labels: np.ndarray):
        if not len(sketches) == len(paintings) == len(labels):
            raise ValueError("sketches, paintings and labels must have equal length")
        self.sketches = sketches
        self.paintings = paintings
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: Sequence[PairedSample]) -> "PairedArrays":
        return cls(
            np.stack([s.sketch.transpose(2, 0, 1) for s in samples]).astype(np.float32),
            np.stack([s.painting.transpose(2, 0, 1) for s in samples]).astype(np.float32),
            np.array([s.style_class for s in samples], dtype=np.int64),
        )

    @classmethod
    def synthesize(cls, num_classes: int, samples_per_class: int, size: int, seed: int) -> "PairedArrays":
        return cls.from_samples([s for _, s in generate_samples(num_classes, samples_per_class, size, seed)])

    @classmethod
    def load(cls, root) -> "PairedArrays":
        root = Path(root)
        samples = []
        for rec in read_manifest(root):
            samples.append(PairedSample(load_png(root / rec["sketch"], 1), load_png(root / rec["painting"], 3),
                                        int(rec["style_class"])))
        return cls.from_samples(samples)

    def subset(self, idx) -> "PairedArrays":
        return PairedArrays(self.sketches[idx], self.paintings[idx], self.labels[idx])


MANIFEST_NAME = "manifest.jsonl"


def build_dataset(num_classes: int, samples_per_class: int, size: int, seed: int, out_dir) -> Path:
    """Write PNG pairs, ``classes.json`` and a line-delimited manifest under `out_dir`.

    Manifest rows: ``{"id", "sketch", "painting", "style_class"}`` with paths
    relative to `out_dir`. Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "sketches").mkdir(parents=True, exist_ok=True)
    (out / "paintings").mkdir(parents=True, exist_ok=True)
    classes = make_style_classes(num_classes, seed)
    (out / "classes.json").write_text(json.dumps([c.to_dict() for c in classes], indent=1) + "\n")
    rows = []
    for sid, sample in generate_samples(num_classes, samples_per_class, size, seed, classes):
        sk, pt = f"sketches/{sid:06d}.png", f"paintings/{sid:06d}.png"
        save_png(sample.sketch, out / sk)
        save_png(sample.painting, out / pt)
        rows.append({"id": sid, "sketch": sk, "painting": pt, "style_class": sample.style_class})
    manifest = out / MANIFEST_NAME
    with open(manifest, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    log.info("wrote %d pairs to %s", len(rows), out)
    return manifest


def read_manifest(root) -> List[dict]:
    with open(Path(root) / MANIFEST_NAME) as f:
        return [json.loads(line) for line in f if line.strip()]
