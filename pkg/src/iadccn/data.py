"""Annotations, ground-truth maps, patch sampling, augmentation and synthetic scenes.

Densities are built on a fixed-point grid of ``2**-36`` people per pixel:
every kernel window is quantised and its rounding residue folded into the
centre pixel so that each window sums to exactly 1.  Sums of such values
are exact in float64 for totals below 2**16, so count conservation and
sum-pooling hold with no rounding error at all.
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DataError, ParseError

DENSITY_QUANTUM = 2.0 ** -36
DENSITY_MAGIC = b"IADM"
DENSITY_VERSION = 1


@dataclass
class AnnotatedImage:
    pixels: np.ndarray  # H x W x C in [0, 1]
    points: np.ndarray  # K x 2, (x, y) in pixel units
    id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise DataError(f"image {self.id!r}: pixels must be H x W x C with C in (1, 3)")
        if self.height < 1 or self.width < 1:
            raise DataError(f"image {self.id!r}: empty image")
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        check_points(self.points, self.height, self.width, self.id)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def count(self):
        return len(self.points)


def check_points(points, height, width, what=""):
    for i, (x, y) in enumerate(np.asarray(points).reshape(-1, 2)):
        if not (0 <= x < width and 0 <= y < height):
            raise DataError(
                f"{what or 'annotation'}: point {i} at ({x}, {y}) is outside the "
                f"{width}x{height} image"
            )


@dataclass
class DensityConfig:
    sigma: float = 4.0
    mask_threshold: float = 1e-3

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")
        if not self.mask_threshold >= 0:
            raise ConfigurationError(f"mask threshold must be >= 0, got {self.mask_threshold}")

    @property
    def truncation_radius(self):
        return int(math.ceil(3 * self.sigma))


@dataclass
class DensityMap:
    values: np.ndarray
    scale: int = 1

    @property
    def count(self):
        return float(self.values.sum())


def _kernel_window(x, y, height, width, sigma, radius):
    cx = min(int(round(x)), width - 1)
    cy = min(int(round(y)), height - 1)
    x0, x1 = max(cx - radius, 0), min(cx + radius + 1, width)
    y0, y1 = max(cy - radius, 0), min(cy + radius + 1, height)
    dx = np.arange(x0, x1) - x
    dy = np.arange(y0, y1) - y
    win = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * sigma * sigma))
    win /= win.sum()
    win = np.round(win / DENSITY_QUANTUM) * DENSITY_QUANTUM
    win[cy - y0, cx - x0] += 1.0 - win.sum()
    return (slice(y0, y1), slice(x0, x1)), win


def generate_density_map(points, height, width, cfg=None):
    """Sum of truncated, renormalised Gaussians centred on each point."""
    cfg = cfg or DensityConfig()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    check_points(points, height, width)
    out = np.zeros((height, width))
    radius = cfg.truncation_radius
    for x, y in points:
        where, win = _kernel_window(x, y, height, width, cfg.sigma, radius)
        out[where] += win
    return DensityMap(out, scale=1)


def _block_view(values, factor):
    h, w = values.shape
    if factor < 1 or h % factor or w % factor:
        raise ConfigurationError(f"{h}x{w} map is not divisible by factor {factor}")
    return values.reshape(h // factor, factor, w // factor, factor)


def downsample_density(d, factor=4):
    """Sum-pool non-overlapping ``factor`` x ``factor`` blocks."""
    return DensityMap(_block_view(d.values, factor).sum(axis=(1, 3)), scale=d.scale * factor)


def generate_seg_mask(d, threshold):
    values = d.values if isinstance(d, DensityMap) else np.asarray(d)
    return (values > threshold).astype(np.float64)


def invert(mask):
    return 1.0 - mask


def downsample_mask(mask, factor=4):
    """A block is foreground when any of its pixels is."""
    return _block_view(mask, factor).max(axis=(1, 3))


def ground_truth(points, height, width, cfg=None, factor=4):
    """Density and inverse-attention targets at the network output resolution."""
    cfg = cfg or DensityConfig()
    full = generate_density_map(points, height, width, cfg)
    density = downsample_density(full, factor)
    mask = downsample_mask(generate_seg_mask(full, cfg.mask_threshold), factor)
    return density.values, invert(mask)


# ---------------------------------------------------------------------------
# patches and augmentation


def pad_image(img, height, width):
    """Zero-pad pixels on the bottom/right up to at least ``height`` x ``width``."""
    h, w = img.height, img.width
    if h >= height and w >= width:
        return img
    pixels = np.zeros((max(h, height), max(w, width), img.pixels.shape[2]))
    pixels[:h, :w] = img.pixels
    return AnnotatedImage(pixels, img.points.copy(), img.id)


def crop_image(img, top, left, height, width, new_id=None):
    pts = img.points
    keep = (
        (pts[:, 0] >= left) & (pts[:, 0] < left + width) & (pts[:, 1] >= top) & (pts[:, 1] < top + height)
    )
    pixels = img.pixels[top:top + height, left:left + width].copy()
    return AnnotatedImage(pixels, pts[keep] - [left, top], new_id or img.id)


def sample_patches(img, n=9, size=224, rng=None):
    rng = rng if rng is not None else np.random.default_rng()
    img = pad_image(img, size, size)
    patches = []
    for k in range(n):
        top = int(rng.integers(0, img.height - size + 1))
        left = int(rng.integers(0, img.width - size + 1))
        patches.append(crop_image(img, top, left, size, size, f"{img.id}#p{k}"))
    return patches


def flip_horizontal(img):
    pts = img.points.copy()
    if len(pts):
        # points in the last partial pixel (x > W - 1) snap onto it
        pts[:, 0] = np.clip(img.width - 1 - pts[:, 0], 0.0, img.width - 1)
    return AnnotatedImage(img.pixels[:, ::-1].copy(), pts, img.id)


def augment(patch, rng, noise_amp=0.01, flip=None):
    """Random horizontal flip plus uniform pixel noise, clamped to [0, 1]."""
    if flip is None:
        flip = bool(rng.random() < 0.5)
    out = flip_horizontal(patch) if flip else AnnotatedImage(patch.pixels.copy(), patch.points.copy(), patch.id)
    if noise_amp > 0:
        noise = rng.uniform(-noise_amp, noise_amp, size=out.pixels.shape)
        out.pixels = np.clip(out.pixels + noise, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    count_range: tuple = (5, 15)
    head_radius_range: tuple = (2.0, 3.5)
    clutter_level: float = 0.5
    channels: int = 3

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"bad count range {self.count_range}")
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3")


def _paint(canvas, alpha, value):
    canvas *= 1.0 - alpha
    canvas += alpha * value


def synth_scene(rng, cfg=None, image_id="synth"):
    """Dark disc heads on a textured background, plus head-dark distractor bars.

    Distractors (count ~ Poisson(clutter_level * mean head count)) share the
    head intensity but are elongated, and carry no annotation.
    """
    cfg = cfg or SynthConfig()
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    base = gaussian_filter(rng.normal(size=(h, w)), sigma=max(h, w) / 8.0, mode="wrap")
    base = 0.55 + 0.15 * base / (np.abs(base).max() + 1e-12)
    base += rng.normal(scale=0.03, size=(h, w))
    canvas = base

    mean_count = 0.5 * (cfg.count_range[0] + cfg.count_range[1])
    n_clutter = int(rng.poisson(cfg.clutter_level * mean_count)) if cfg.clutter_level > 0 else 0
    for _ in range(n_clutter):
        cx, cy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        r = rng.uniform(*cfg.head_radius_range)
        theta = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        a, b = 2.2 * r, 0.8 * r
        q = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        _paint(canvas, np.clip((1.0 - q) * b + 0.5, 0.0, 1.0), rng.uniform(0.1, 0.2))

    k = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    points = np.empty((k, 2))
    for i in range(k):
        cx, cy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        r = rng.uniform(*cfg.head_radius_range)
        dist = np.hypot(xx - cx, yy - cy)
        _paint(canvas, np.clip(r + 0.5 - dist, 0.0, 1.0), rng.uniform(0.1, 0.2))
        points[i] = cx, cy

    pixels = np.clip(canvas, 0.0, 1.0)[:, :, None]
    if cfg.channels == 3:
        tint = rng.uniform(0.9, 1.1, size=3)
        pixels = np.clip(pixels * tint, 0.0, 1.0)
    return AnnotatedImage(pixels, points, image_id)


def synth_dataset(n, seed, cfg=None):
    rng = np.random.default_rng(seed)
    return [synth_scene(rng, cfg, f"img_{i:04d}") for i in range(n)]


# ---------------------------------------------------------------------------
# file formats


def _to_bytes(pixels):
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(pixels, path):
    """PGM (P5) for 1 channel, PPM (P6) for 3; 8-bit."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    Image.fromarray(_to_bytes(pixels)).save(path, format="PPM")


def load_image(path):
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                raise DataError(f"{path}: expected 8-bit PGM or PPM, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot read image: {exc}") from exc
    return arr[:, :, None] if arr.ndim == 2 else arr


def _points_from_json(raw, ctx):
    try:
        pts = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{ctx}: points must be a list of [x, y] pairs") from exc
    if pts.size == 0:
        return np.zeros((0, 2))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DataError(f"{ctx}: points must be a list of [x, y] pairs")
    return pts


def load_annotations(path):
    """Read a JSON list of {"id", "image", "points"}; images resolve relative to the file."""
    path = Path(path)
    text = path.read_text()
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno, offset=exc.pos) from exc
    if not isinstance(records, list):
        raise ParseError(f"{path}: top level must be a list of image records", line=1, offset=0)
    out = []
    for n, rec in enumerate(records):
        ctx = f"{path} record {n}"
        if not isinstance(rec, dict) or not {"id", "image", "points"} <= rec.keys():
            raise DataError(f"{ctx}: needs keys id, image, points")
        pixels = load_image(path.parent / rec["image"])
        pts = _points_from_json(rec["points"], ctx)
        check_points(pts, pixels.shape[0], pixels.shape[1], f"{ctx} ({rec['id']})")
        out.append(AnnotatedImage(pixels, pts, str(rec["id"])))
    return out


def save_dataset(images, directory):
    """Write images under ``directory/images`` and ``annotations.json``; returns written paths."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records, written = [], []
    for img in images:
        ext = ".pgm" if img.pixels.shape[2] == 1 else ".ppm"
        rel = f"images/{img.id}{ext}"
        save_image(img.pixels, directory / rel)
        written.append(directory / rel)
        records.append({"id": img.id, "image": rel, "points": img.points.tolist()})
    ann = directory / "annotations.json"
    ann.write_text(json.dumps(records, indent=1) + "\n")
    written.append(ann)
    return written


def save_density(d, path):
    values = np.asarray(d.values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(DENSITY_MAGIC + struct.pack("<IIII", DENSITY_VERSION, h, w, d.scale))
        fh.write(values.tobytes(order="C"))


def load_density(path):
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != DENSITY_MAGIC:
        raise ParseError(f"{path}: not a density file (bad magic)", offset=0)
    version, h, w, scale = struct.unpack_from("<IIII", blob, 4)
    if version != DENSITY_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=4)
    if len(blob) != 20 + 4 * h * w:
        raise ParseError(f"{path}: expected {h * w} values, file is {len(blob)} bytes", offset=20)
    values = np.frombuffer(blob, dtype="<f4", offset=20).reshape(h, w).astype(np.float32)
    return DensityMap(values, scale=scale)


def export_density_csv(d, path):
    np.savetxt(path, np.asarray(d.values, dtype=np.float64), delimiter=",", fmt="%.9g")


def render_heatmap(d, path):
    """8-bit PGM scaled so that the map maximum is white."""
    values = np.asarray(d.values if isinstance(d, DensityMap) else d, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    if peak > 0:
        img = np.round(np.clip(values, 0.0, None) / peak * 255.0).astype(np.uint8)
    else:
        img = np.zeros(values.shape, dtype=np.uint8)
    Image.fromarray(img).save(path, format="PPM")
    return img
