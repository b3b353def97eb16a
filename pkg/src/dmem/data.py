"""Image/mask ingestion, preprocessing, and a synthetic dataset generator.

Label maps use four classes: 0 background, 1 cytoplasm, 2 normal nucleus
(large), 3 abnormal nucleus (small/irregular). Real annotations arrive as
8-bit single-channel images with the palette background=0, cytoplasm=85,
nucleus=170, unknown=255; ``encode_labels`` folds unknown into background and
splits nuclei into normal/abnormal by connected-component area.

The synthetic generator paints one cytoplasm blob per cell with an
ellipse-shaped nucleus inside: normal nuclei are large and near-circular,
abnormal ones small with an eccentric, harmonically perturbed boundary.
Masks are exact by construction and everything is deterministic per seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

RAW_BACKGROUND, RAW_CYTOPLASM, RAW_NUCLEUS, RAW_UNKNOWN = 0, 85, 170, 255

CLASS_BACKGROUND, CLASS_CYTOPLASM, CLASS_NORMAL, CLASS_ABNORMAL = 0, 1, 2, 3

_LEVELS = np.array([0.15, 0.50, 0.85, 0.85])  # per-class base intensity

_VARIANCE_FLOOR = 1e-8


class GeometryError(RuntimeError):
    """Raised when the generator cannot place the requested shapes."""


class LabelError(ValueError):
    """Raised for label values outside the documented palette."""


@dataclass
class Sample:
    image: np.ndarray  # (c, h, w) float64
    mask: np.ndarray  # (h, w) int64, values in {0..3}
    id: str


@dataclass
class SynthSpec:
    count: int = 16
    size: int = 64
    nuclei_min: int = 1
    nuclei_max: int = 3
    normal_radius: tuple = (6.0, 9.0)
    abnormal_radius: tuple = (2.5, 4.5)
    noise: float = 0.08
    seed: int = 0

    def validate(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.size < 16:
            raise ValueError(f"size must be >= 16, got {self.size}")
        if not (1 <= self.nuclei_min <= self.nuclei_max):
            raise ValueError(f"bad nuclei range [{self.nuclei_min}, {self.nuclei_max}]")
        lo_n, hi_n = self.normal_radius
        lo_a, hi_a = self.abnormal_radius
        if not (0 < lo_a <= hi_a and 0 < lo_n <= hi_n):
            raise ValueError(f"bad radius ranges {self.abnormal_radius} / {self.normal_radius}")
        if lo_n <= hi_a:
            raise ValueError(
                f"normal radius range {self.normal_radius} must sit strictly above "
                f"abnormal range {self.abnormal_radius}")
        if hi_n + 3 >= self.size / 2:
            raise ValueError(f"normal radius {hi_n} does not fit a {self.size}x{self.size} image")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


def normalize(image):
    """Standardize one image (all channels pooled) to mean 0, variance 1.

    A variance floor keeps constant images well-defined: they map to zeros.
    """
    a = np.asarray(image, dtype=np.float64)
    if a.size == 0:
        raise ValueError("normalize needs a non-empty image")
    m = a.mean()
    v = a.var()
    return (a - m) / np.sqrt(max(v, _VARIANCE_FLOOR))


def _resize_plane_bilinear(plane, target):
    h, w = plane.shape
    th, tw = target
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    p00 = plane[np.ix_(y0, x0)]
    p01 = plane[np.ix_(y0, x1)]
    p10 = plane[np.ix_(y1, x0)]
    p11 = plane[np.ix_(y1, x1)]
    return (1 - fy) * ((1 - fx) * p00 + fx * p01) + fy * ((1 - fx) * p10 + fx * p11)


def resize_bilinear(image, target):
    """Bilinear resize of a (c, h, w) intensity image (half-pixel centers,
    edges clamped). Identity targets return the input bit-exactly."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"resize_bilinear expects (c, h, w), got shape {a.shape}")
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target dims must be >= 1, got {target}")
    return np.stack([_resize_plane_bilinear(a[c], (th, tw)) for c in range(a.shape[0])])


def resize_nearest(mask, target):
    """Nearest-neighbor resize for label maps; never blends classes."""
    a = np.asarray(mask)
    if a.ndim != 2:
        raise ValueError(f"resize_nearest expects (h, w), got shape {a.shape}")
    h, w = a.shape
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target dims must be >= 1, got {target}")
    ys = np.clip(np.floor((np.arange(th) + 0.5) * (h / th)).astype(np.int64), 0, h - 1)
    xs = np.clip(np.floor((np.arange(tw) + 0.5) * (w / tw)).astype(np.int64), 0, w - 1)
    return a[np.ix_(ys, xs)]


def encode_labels(raw, size_threshold_px=64):
    """Map a raw palette mask to the 4-class scheme.

    Unknown regions become background; each connected nucleus component with
    area below size_threshold_px becomes class 3 (abnormal/small), the rest
    class 2 (normal/large). 4-connectivity.
    """
    a = np.asarray(raw)
    known = {RAW_BACKGROUND, RAW_CYTOPLASM, RAW_NUCLEUS, RAW_UNKNOWN}
    values = set(np.unique(a).tolist())
    bad = values - known
    if bad:
        raise LabelError(f"unrecognized raw label value(s) {sorted(bad)}; expected {sorted(known)}")
    out = np.zeros(a.shape, dtype=np.int64)
    out[a == RAW_CYTOPLASM] = CLASS_CYTOPLASM
    nuclei = a == RAW_NUCLEUS
    labels, n = ndimage.label(nuclei)
    for comp in range(1, n + 1):
        region = labels == comp
        cls = CLASS_ABNORMAL if int(region.sum()) < size_threshold_px else CLASS_NORMAL
        out[region] = cls
    return out


def default_size_threshold(size, base=64, base_size=64):
    """Area threshold separating small from large nuclei, scaled with the
    square of the resolution (64 px at 64x64)."""
    return int(round(base * (size / base_size) ** 2))


def _ellipse_mask(yy, xx, cy, cx, a, b, angle, wobble=None):
    """Boolean inside-test for an ellipse, optionally with a harmonically
    perturbed boundary radius (wobble = list of (amp, mult, phase))."""
    dy = yy - cy
    dx = xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    limit = 1.0
    if wobble:
        phi = np.arctan2(v, u)
        limit = 1.0 + sum(amp * np.cos(mult * phi + phase) for amp, mult, phase in wobble)
    return rho <= limit


def generate_synthetic(spec):
    """Produce spec.count samples with exact masks; deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    samples = []
    for idx in range(spec.count):
        n_nuclei = int(rng.integers(spec.nuclei_min, spec.nuclei_max + 1))
        placed = []  # (cy, cx, r, abnormal, nucleus params, cyto params)
        for _ in range(n_nuclei):
            abnormal = bool(rng.random() < 0.5)
            lo, hi = spec.abnormal_radius if abnormal else spec.normal_radius
            r = float(rng.uniform(lo, hi))
            ratio = float(rng.uniform(0.45, 0.75) if abnormal else rng.uniform(0.8, 1.0))
            angle = float(rng.uniform(0, np.pi))
            wobble = None
            if abnormal:
                wobble = [(float(rng.uniform(0.08, 0.22)), m, float(rng.uniform(0, 2 * np.pi)))
                          for m in (2, 3)]
            cyto_factor = float(rng.uniform(1.6, 2.1))
            cyto_ratio = float(rng.uniform(0.8, 1.0))
            cyto_angle = float(rng.uniform(0, np.pi))
            margin = r + 2.0
            ok = False
            for _attempt in range(200):
                cy = float(rng.uniform(margin, size - 1 - margin))
                cx = float(rng.uniform(margin, size - 1 - margin))
                if all(np.hypot(cy - py, cx - px) > r + pr + 3.0 for py, px, pr, *_ in placed):
                    ok = True
                    break
            if not ok:
                raise GeometryError(
                    f"sample {idx}: could not place nucleus {len(placed)} of {n_nuclei} "
                    f"after 200 attempts (radius {r:.1f} in a {size}x{size} image)")
            placed.append((cy, cx, r, abnormal,
                           (ratio, angle, wobble), (cyto_factor, cyto_ratio, cyto_angle)))

        mask = np.zeros((size, size), dtype=np.int64)
        for cy, cx, r, _, _, (cf, cr, ca) in placed:
            rc = r * cf + 2.0
            mask[_ellipse_mask(yy, xx, cy, cx, rc, rc * cr, ca)] = CLASS_CYTOPLASM
        for cy, cx, r, abnormal, (ratio, angle, wobble), _ in placed:
            inside = _ellipse_mask(yy, xx, cy, cx, r, r * ratio, angle, wobble)
            mask[inside] = CLASS_ABNORMAL if abnormal else CLASS_NORMAL

        coarse = rng.uniform(-1.0, 1.0, (size // 8 + 1, size // 8 + 1))
        white = rng.standard_normal((size, size))
        image = _LEVELS[mask]
        if spec.noise > 0:
            texture = _resize_plane_bilinear(coarse, (size, size))
            image = image + spec.noise * texture + 0.5 * spec.noise * white
        image = np.clip(image, 0.0, 1.0)[None]
        samples.append(Sample(image=image, mask=mask, id=f"s{idx:04d}"))
    return samples


# ---------------------------------------------------------------------------
# File formats


def write_image_png(path, image):
    """Write a (c, h, w) float image in [0, 1] as an 8-bit gray/RGB PNG."""
    a = np.asarray(image, dtype=np.float64)
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    if a.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path)
    elif a.shape[0] == 3:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ValueError(f"PNG images must have 1 or 3 channels, got {a.shape[0]}")


def read_image_png(path):
    img = Image.open(path)
    a = np.asarray(img, dtype=np.float64) / 255.0
    if a.ndim == 2:
        return a[None]
    return a.transpose(2, 0, 1)


def write_mask_png(path, mask):
    a = np.asarray(mask)
    if a.min() < 0 or a.max() > 255:
        raise ValueError(f"mask values outside 8-bit range: [{a.min()}, {a.max()}]")
    Image.fromarray(a.astype(np.uint8), mode="L").save(path)


def read_mask_png(path):
    return np.asarray(Image.open(path), dtype=np.int64)


def write_raw(path, array):
    """Raw container: 4 little-endian int64 dims then float64 payload.
    Arrays of rank < 4 gain leading singleton dims."""
    a = np.asarray(array, dtype=np.float64)
    dims = (1,) * (4 - a.ndim) + a.shape
    if len(dims) != 4:
        raise ValueError(f"raw container holds up to rank-4 arrays, got shape {a.shape}")
    with open(path, "wb") as fh:
        fh.write(np.array(dims, dtype="<i8").tobytes())
        fh.write(a.astype("<f8").tobytes())


def read_raw(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    dims = np.frombuffer(blob, dtype="<i8", count=4)
    a = np.frombuffer(blob, dtype="<f8", offset=32, count=int(np.prod(dims)))
    a = a.reshape(tuple(int(d) for d in dims))
    return np.squeeze(a, axis=tuple(i for i, d in enumerate(a.shape[:3]) if d == 1))


def save_dataset(samples, out_dir, image_format="png"):
    """Write images/, masks/ and an index of id<TAB>image<TAB>mask lines
    (paths relative to the index file). Returns the index path."""
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    lines = []
    for s in samples:
        if image_format == "png":
            img_rel = f"images/{s.id}.png"
            write_image_png(os.path.join(out_dir, img_rel), s.image)
        elif image_format == "raw":
            img_rel = f"images/{s.id}.raw"
            write_raw(os.path.join(out_dir, img_rel), s.image)
        else:
            raise ValueError(f"unknown image format {image_format!r} (png or raw)")
        mask_rel = f"masks/{s.id}.png"
        write_mask_png(os.path.join(out_dir, mask_rel), s.mask)
        lines.append(f"{s.id}\t{img_rel}\t{mask_rel}")
    index_path = os.path.join(out_dir, "index.tsv")
    with open(index_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return index_path


def load_dataset(index_path):
    """Read an index file back into samples (images as stored, unnormalized)."""
    base = os.path.dirname(os.path.abspath(index_path))
    samples = []
    with open(index_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{index_path}:{lineno}: expected id<TAB>image<TAB>mask")
            sid, img_rel, mask_rel = parts
            img_path = os.path.join(base, img_rel)
            image = read_raw(img_path) if img_path.endswith(".raw") else read_image_png(img_path)
            if image.ndim == 2:
                image = image[None]
            mask_path = os.path.join(base, mask_rel)
            if mask_path.endswith(".raw"):
                mask = np.rint(read_raw(mask_path)).astype(np.int64)
                if mask.ndim == 3:
                    mask = mask[0]
            else:
                mask = read_mask_png(mask_path)
            samples.append(Sample(image=image, mask=mask, id=sid))
    return samples
