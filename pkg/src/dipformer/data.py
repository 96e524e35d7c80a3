"""Sample loading, PNG I/O, and a synthetic depth-separable scene generator."""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .fsutil import atomic_write_bytes

IGNORE_LABEL = 255
GRID = 4  # object edges snap to this many pixels so 4x upsampling can be exact


@dataclass
class SegSample:
    """One RGB-D frame: rgb 3xHxW and depth 1xHxW in [0, 1], labels HxW uint8."""

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray | None = None
    missing_depth: np.ndarray | None = None  # HxW bool, True where depth was 0 on disk
    regions: list[tuple[int, int, int, int, int]] = field(default_factory=list)
    horizon: int | None = None

    def __post_init__(self):
        h, w = self.rgb.shape[1:]
        if self.rgb.shape[0] != 3:
            raise DataError(f"rgb must be 3 x H x W, got {self.rgb.shape}")
        if self.depth.shape != (1, h, w):
            raise DataError(f"depth {self.depth.shape} does not match rgb {self.rgb.shape}")
        if self.labels is not None and self.labels.shape != (h, w):
            raise DataError(f"labels {self.labels.shape} do not match rgb {self.rgb.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]

    @property
    def has_missing_depth(self) -> bool:
        return self.missing_depth is not None and bool(self.missing_depth.any())


# -- PNG I/O -----------------------------------------------------------------------

def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _write_atomic(path, data: bytes) -> None:
    atomic_write_bytes(path, data)


def write_rgb_png(path, rgb: np.ndarray) -> None:
    """Write a 3xHxW float image in [0, 1] (or HxWx3 uint8) as 8-bit RGB."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(np.moveaxis(rgb, 0, -1) * 255.0), 0, 255).astype(np.uint8)
    _write_atomic(path, _png_bytes(Image.fromarray(rgb)))


def write_depth_png(path, depth: np.ndarray) -> None:
    """Write an HxW uint16 depth map as a 16-bit grayscale PNG (0 = missing)."""
    depth = np.asarray(depth)
    if depth.dtype != np.uint16:
        raise DataError(f"raw depth must be uint16, got {depth.dtype}")
    _write_atomic(path, _png_bytes(Image.fromarray(depth)))


def write_label_png(path, labels: np.ndarray) -> None:
    _write_atomic(path, _png_bytes(Image.fromarray(np.asarray(labels, dtype=np.uint8))))


def read_rgb_png(path) -> np.ndarray:
    img = _open(path)
    if img.mode != "RGB":
        raise DataError(f"{path}: expected 8-bit RGB, got mode {img.mode}")
    return np.asarray(img)


def read_depth_png(path) -> np.ndarray:
    """Raw depth as an HxW integer array (8- or 16-bit single channel)."""
    img = _open(path)
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img).astype(np.int64)
        if arr.min() < 0 or arr.max() > 65535:
            raise DataError(f"{path}: depth values outside 16-bit range")
        return arr.astype(np.uint16)
    if img.mode == "L":
        return np.asarray(img).astype(np.uint16)
    raise DataError(f"{path}: depth must be single-channel 8/16-bit, got mode {img.mode}")


def read_label_png(path) -> np.ndarray:
    img = _open(path)
    if img.mode not in ("L", "P"):
        raise DataError(f"{path}: labels must be 8-bit single-channel, got mode {img.mode}")
    return np.asarray(img, dtype=np.uint8)


# -- normalization ---------------------------------------------------------------

def normalize_depth(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min-max over valid (non-zero) pixels; missing pixels stay 0.

    Returns the normalized map and the missing mask. An all-missing or
    constant map normalizes to zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    missing = raw == 0
    out = np.zeros_like(raw)
    if missing.all():
        return out, missing
    valid = raw[~missing]
    lo, hi = valid.min(), valid.max()
    if hi > lo:
        out[~missing] = (raw[~missing] - lo) / (hi - lo)
    return out, missing


def encode_depth(depth: np.ndarray, missing: np.ndarray | None = None) -> np.ndarray:
    """[0, 1] depth to uint16 with 0 reserved for missing pixels."""
    enc = 1 + np.rint(np.clip(depth, 0.0, 1.0) * 65534.0)
    if missing is not None:
        enc = np.where(missing, 0, enc)
    return enc.astype(np.uint16)


def center_crop_box(h: int, w: int, multiple: int = 16) -> tuple[int, int, int, int]:
    ch, cw = h // multiple * multiple, w // multiple * multiple
    if ch == 0 or cw == 0:
        raise DataError(f"{h}x{w} image cannot be cropped to a multiple of {multiple}")
    top, left = (h - ch) // 2, (w - cw) // 2
    return top, top + ch, left, left + cw


def load_sample(rgb_path, depth_path, label_path=None, crop: bool = True, multiple: int = 16) -> SegSample:
    rgb = read_rgb_png(rgb_path)
    raw = read_depth_png(depth_path)
    h, w = rgb.shape[:2]
    if raw.shape != (h, w):
        raise DataError(f"depth {raw.shape} and rgb {(h, w)} differ in resolution")
    labels = None
    if label_path:
        labels = read_label_png(label_path)
        if labels.shape != (h, w):
            raise DataError(f"labels {labels.shape} and rgb {(h, w)} differ in resolution")
    if h % multiple or w % multiple:
        if not crop:
            raise DataError(f"{h}x{w} is not divisible by {multiple}")
        t, b, l, r = center_crop_box(h, w, multiple)
        rgb, raw = rgb[t:b, l:r], raw[t:b, l:r]
        labels = None if labels is None else labels[t:b, l:r]
    depth, missing = normalize_depth(raw)
    return SegSample(
        rgb=np.moveaxis(rgb, -1, 0).astype(np.float64) / 255.0,
        depth=depth[None],
        labels=labels,
        missing_depth=missing,
    )


# -- manifests -------------------------------------------------------------------

def write_manifest(path, rows: list[tuple[str, str, str]]) -> None:
    text = "".join("\t".join(r) + "\n" for r in rows)
    _write_atomic(path, text.encode("utf-8"))


def read_manifest(path) -> list[tuple[Path, Path, Path | None]]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"no such manifest: {path}") from None
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise DataError(f"{path}:{lineno}: expected rgb<TAB>depth<TAB>label")
        resolved = [path.parent / p if p else None for p in parts] + [None] * (3 - len(parts))
        rows.append(tuple(resolved))
    if not rows:
        raise DataError(f"manifest {path} lists no samples")
    return rows


def load_manifest(path, crop: bool = True) -> list[SegSample]:
    return [load_sample(r, d, l, crop=crop) for r, d, l in read_manifest(path)]


def save_samples(samples: list[SegSample], out_dir, prefix: str = "") -> Path:
    """Write each sample as three PNGs plus ``manifest.tsv``; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        stem = f"{prefix}{i:05d}"
        names = (f"{stem}_rgb.png", f"{stem}_depth.png", f"{stem}_label.png")
        write_rgb_png(out / names[0], s.rgb)
        write_depth_png(out / names[1], encode_depth(s.depth[0], s.missing_depth))
        if s.labels is not None:
            write_label_png(out / names[2], s.labels)
        rows.append(names if s.labels is not None else names[:2] + ("",))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest


def stack(samples: list[SegSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    if not samples:
        raise DataError("cannot stack an empty batch")
    rgb = np.stack([s.rgb for s in samples])
    depth = np.stack([s.depth for s in samples])
    labels = None if samples[0].labels is None else np.stack([s.labels for s in samples])
    return rgb, depth, labels


# -- augmentation ----------------------------------------------------------------

def random_hflip(sample: SegSample, p: float, rng: np.random.Generator) -> SegSample:
    """Flip every modality along the width with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise DataError(f"flip probability {p} outside [0, 1]")
    if not rng.random() < p:
        return sample
    w = sample.size[1]
    return replace(
        sample,
        rgb=sample.rgb[:, :, ::-1].copy(),
        depth=sample.depth[:, :, ::-1].copy(),
        labels=None if sample.labels is None else sample.labels[:, ::-1].copy(),
        missing_depth=None if sample.missing_depth is None else sample.missing_depth[:, ::-1].copy(),
        regions=[(c, y0, y1, w - x1, w - x0) for c, y0, y1, x0, x1 in sample.regions],
    )


# -- synthetic scenes ------------------------------------------------------------

BACKGROUND, ROAD = 0, 1
ROAD_FAR_DEPTH = 0.45
BACKGROUND_DEPTH = 1.0

# flat 8-bit class colors, so PNG round trips are exact
_COLORS = np.array([
    [128, 178, 230], [90, 90, 90], [217, 51, 51], [51, 191, 64],
    [242, 204, 25], [153, 64, 204], [25, 140, 153], [242, 128, 178],
    [140, 102, 38], [204, 204, 204],
]) / 255.0
SHARED_COLOR = np.array([230, 140, 38]) / 255.0


@dataclass(frozen=True)
class SynthSpec:
    image_size: tuple[int, int] = (64, 64)
    n_cls: int = 5
    count: int = 4
    seed: int = 0
    depth_only_class_fraction: float = 1.0
    confusable: tuple[int, int] = (2, 3)
    objects: tuple[int, int] = (2, 4)  # inclusive range of objects per scene

    def __post_init__(self):
        h, w = self.image_size
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise DataError(f"synthetic image size {self.image_size} must be positive multiples of 16")
        if not 4 <= self.n_cls <= len(_COLORS):
            raise DataError(f"n_cls must be in [4, {len(_COLORS)}]")
        if not 0.0 <= self.depth_only_class_fraction <= 1.0:
            raise DataError("depth_only_class_fraction must be in [0, 1]")
        a, b = self.confusable
        if a == b or min(a, b) < 2 or max(a, b) >= self.n_cls:
            raise DataError("confusable classes must be two distinct object classes")
        if self.count < 0 or self.objects[0] < 0 or self.objects[1] < self.objects[0]:
            raise DataError("invalid sample or object counts")

    @property
    def object_classes(self) -> list[int]:
        return list(range(2, self.n_cls))


def object_depths(n_cls: int) -> dict[int, float]:
    """Depth plane of each object class, evenly spread over [0.15, 0.85]."""
    planes = np.linspace(0.15, 0.85, n_cls - 2)
    return {c: float(planes[i]) for i, c in enumerate(range(2, n_cls))}


def class_color(c: int) -> np.ndarray:
    return _COLORS[c]


def rasterize(spec: SynthSpec, horizon: int, objects, colors) -> SegSample:
    """Paint background, road, then objects in order (later ones occlude)."""
    h, w = spec.image_size
    rgb = np.empty((3, h, w))
    depth = np.empty((1, h, w))
    labels = np.full((h, w), BACKGROUND, dtype=np.uint8)
    rgb[:] = class_color(BACKGROUND)[:, None, None]
    depth[:] = BACKGROUND_DEPTH
    rows = np.arange(horizon, h)
    labels[horizon:] = ROAD
    rgb[:, horizon:] = class_color(ROAD)[:, None, None]
    span = max(h - 1 - horizon, 1)
    depth[0, horizon:] = (ROAD_FAR_DEPTH * (h - 1 - rows) / span)[:, None]
    planes = object_depths(spec.n_cls)
    for (c, y0, y1, x0, x1), color in zip(objects, colors):
        labels[y0:y1, x0:x1] = c
        rgb[:, y0:y1, x0:x1] = color[:, None, None]
        depth[0, y0:y1, x0:x1] = planes[c]
    return SegSample(rgb, depth, labels, np.zeros((h, w), bool), list(objects), horizon)


def generate_synthetic(spec: SynthSpec) -> list[SegSample]:
    """Grid-aligned scenes where the confusable pair can share one color.

    Object class, color choice, position and size are drawn independently,
    so once two classes share a color only their depth plane tells them
    apart. Every scene contains a road reaching the bottom row (depth 0) and
    sky (depth 1), which keeps per-image depth normalization the identity.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    gh, gw = h // GRID, w // GRID
    lo_cells, hi_cells = 2, max(3, min(gh, gw) // 3)
    samples = []
    for _ in range(spec.count):
        horizon = GRID * int(rng.integers(gh // 2, 3 * gh // 4 + 1))
        horizon = min(horizon, h - GRID)
        n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
        objects, colors = [], []
        for _ in range(n_obj):
            c = int(rng.choice(spec.object_classes))
            oh = int(rng.integers(lo_cells, hi_cells + 1))
            ow = int(rng.integers(lo_cells, hi_cells + 1))
            y0 = int(rng.integers(0, gh - oh + 1))
            x0 = int(rng.integers(0, gw - ow + 1))
            shared = c in spec.confusable and rng.random() < spec.depth_only_class_fraction
            objects.append((c, GRID * y0, GRID * (y0 + oh), GRID * x0, GRID * (x0 + ow)))
            colors.append(SHARED_COLOR if shared else class_color(c))
        samples.append(rasterize(spec, horizon, objects, colors))
    return samples


def region_label(sample: SegSample, y: int, x: int) -> int:
    """Analytic class at pixel (y, x): last covering object, else road/background."""
    for c, y0, y1, x0, x1 in reversed(sample.regions):
        if y0 <= y < y1 and x0 <= x < x1:
            return c
    return ROAD if y >= sample.horizon else BACKGROUND


# -- RGB-only separability -------------------------------------------------------

def _color_keys(rgb: np.ndarray) -> np.ndarray:
    q = np.rint(np.moveaxis(rgb, 0, -1).reshape(-1, 3) * 255).astype(np.int64)
    return (q[:, 0] << 16) | (q[:, 1] << 8) | q[:, 2]


def color_class_counts(samples: list[SegSample], classes) -> dict[int, dict[int, int]]:
    """Per quantized color, how many pixels of each class in ``classes``."""
    table: dict[int, dict[int, int]] = {}
    classes = set(classes)
    for s in samples:
        keys = _color_keys(s.rgb)
        labels = s.labels.ravel()
        keep = np.isin(labels, list(classes))
        for key, lab in zip(keys[keep], labels[keep]):
            bucket = table.setdefault(int(key), {})
            bucket[int(lab)] = bucket.get(int(lab), 0) + 1
    return table


def rgb_only_bayes_accuracy(samples: list[SegSample], classes) -> float:
    """Best accuracy on ``classes`` pixels of any per-pixel function of color."""
    table = color_class_counts(samples, classes)
    total = sum(sum(b.values()) for b in table.values())
    if total == 0:
        raise DataError("no pixels of the requested classes")
    return sum(max(b.values()) for b in table.values()) / total


def rgb_only_iou_bound(samples: list[SegSample], classes: tuple[int, int], steps: int = 1001) -> float:
    """Upper bound (percent) on the mean IoU over a class pair for predictors
    that cannot see depth.

    Pixels whose color is unique to one class are assumed labelled perfectly;
    the pixels sharing a color are split between the pair with a fraction
    ``q`` that cannot depend on the true class. The bound maximizes the pair's
    mean IoU over ``q``.
    """
    a, b = classes
    table = color_class_counts(samples, classes)
    sure_a = sure_b = amb_a = amb_b = 0
    for bucket in table.values():
        na, nb = bucket.get(a, 0), bucket.get(b, 0)
        if na and nb:
            amb_a, amb_b = amb_a + na, amb_b + nb
        else:
            sure_a, sure_b = sure_a + na, sure_b + nb
    na, nb = sure_a + amb_a, sure_b + amb_b
    if na == 0 or nb == 0:
        raise DataError("both classes must be present")
    q = np.linspace(0.0, 1.0, steps)
    tp_a = sure_a + q * amb_a
    iou_a = tp_a / (na + q * amb_b)
    tp_b = sure_b + (1 - q) * amb_b
    iou_b = tp_b / (nb + (1 - q) * amb_a)
    return float(100.0 * np.max((iou_a + iou_b) / 2))
