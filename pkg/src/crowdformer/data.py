"""Dataset ingestion, preprocessing and the synthetic dataset generator.

Directory layout (and the exact layout ``gen_synthetic_dataset`` emits)::

    root/
      manifest            one entry per line:
                          <relative image path>\t<count>\t[<relative points path>]
      images/*.png        8-bit RGB
      points/*.txt        one "x y" pair per line, original-image pixel coords

Preprocessing follows the training recipe: every image is resized to
3*crop x 2*crop pixels (1152 x 768 for 384-pixel crops) and partitioned
into six non-overlapping crops, three columns by two rows. Per-crop ground
truth is the number of annotated points falling inside each crop, counted
with half-open boxes so the six counts always sum to the image total. For
count-only entries (no points file) the fallback is total/6 per crop, which
is flagged in the load report because exact per-crop counts are
unobtainable without point annotations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

# Matches the full-scale recipe: 1152 x 768 resize, 384-pixel crops.
TILE_COLS = 3
TILE_ROWS = 2

# ITU-R BT.601 luminance weights, used by the grayscale augmentation.
_LUMA = np.array([0.299, 0.587, 0.114])


class DataPipelineError(ValueError):
    pass


class ManifestError(DataPipelineError):
    pass


@dataclass
class AnnotatedImage:
    """RGB pixels in [0, 1] (3, H, W) with a total count and optional head points.

    Points are (x, y) pixel coordinates, 0 <= x < W and 0 <= y < H; when
    present there is exactly one point per counted person.
    """

    pixels: np.ndarray
    total_count: int
    points: np.ndarray | None = None  # (k, 2) or None
    image_id: str = ""

    def validate(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DataPipelineError(f"image {self.image_id}: pixels must be (3, H, W)")
        if self.total_count < 0:
            raise DataPipelineError(f"image {self.image_id}: negative count {self.total_count}")
        if self.points is not None:
            if len(self.points) != self.total_count:
                raise DataPipelineError(
                    f"image {self.image_id}: {len(self.points)} points but count {self.total_count}"
                )
            _, h, w = self.pixels.shape
            if len(self.points) and (
                self.points[:, 0].min() < 0
                or self.points[:, 0].max() >= w
                or self.points[:, 1].min() < 0
                or self.points[:, 1].max() >= h
            ):
                raise DataPipelineError(f"image {self.image_id}: point outside {w}x{h} bounds")


@dataclass
class CropSample:
    pixels: np.ndarray  # (3, crop, crop)
    count: float
    source_image_id: str
    crop_index: int  # row-major, 0..5


@dataclass
class ManifestEntry:
    image_path: str
    count: int
    points_path: str | None
    image_id: str
    lineno: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    split: str = "train"
    preset: str = ""
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def dataset_id(self) -> str:
        return self.root.name or str(self.root)


# -- raster I/O ---------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit RGB image as float64 (3, H, W) in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise DataPipelineError(f"unreadable image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / 255.0


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


# -- geometry ------------------------------------------------------------------


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a (C, H, W) array with half-pixel centers.

    Identity when the size does not change, and constant images stay
    constant under any scale factor.
    """
    c, h, w = pixels.shape
    if h == out_h and w == out_w:
        return pixels.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    wy = (ys - y0f)[None, :, None]
    wx = (xs - x0f)[None, None, :]
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    top = pixels[:, y0][:, :, x0] * (1.0 - wx) + pixels[:, y0][:, :, x1] * wx
    bot = pixels[:, y1][:, :, x0] * (1.0 - wx) + pixels[:, y1][:, :, x1] * wx
    return top * (1.0 - wy) + bot * wy


def resize_image(image: AnnotatedImage, out_w: int = 1152, out_h: int = 768) -> AnnotatedImage:
    """Resize pixels and rescale point coordinates; the count is untouched."""
    _, h, w = image.pixels.shape
    pixels = bilinear_resize(image.pixels, out_h, out_w)
    points = None
    if image.points is not None:
        points = image.points * np.array([out_w / w, out_h / h])
        if len(points):
            # Guard against float rounding pushing a boundary point to exactly W or H.
            points[:, 0] = np.minimum(points[:, 0], np.nextafter(float(out_w), 0.0))
            points[:, 1] = np.minimum(points[:, 1], np.nextafter(float(out_h), 0.0))
    return AnnotatedImage(
        pixels=pixels, total_count=image.total_count, points=points, image_id=image.image_id
    )


def tile_image(image: AnnotatedImage, crop_size: int = 384) -> list:
    """Partition a 3*crop x 2*crop image into six crops, row-major.

    Per-crop counts come from the points (half-open boxes, so every point
    lands in exactly one crop and the six counts sum to the image total).
    Without points, each crop is assigned total/6.
    """
    _, h, w = image.pixels.shape
    if w != TILE_COLS * crop_size or h != TILE_ROWS * crop_size:
        raise DataPipelineError(
            f"tile_image: expected {TILE_COLS * crop_size}x{TILE_ROWS * crop_size} image, got {w}x{h}"
        )
    if image.points is not None:
        counts = np.zeros(TILE_ROWS * TILE_COLS)
        for x, y in image.points:
            col = min(int(x // crop_size), TILE_COLS - 1)
            row = min(int(y // crop_size), TILE_ROWS - 1)
            counts[row * TILE_COLS + col] += 1.0
    else:
        counts = np.full(TILE_ROWS * TILE_COLS, image.total_count / 6.0)
    crops = []
    for row in range(TILE_ROWS):
        for col in range(TILE_COLS):
            idx = row * TILE_COLS + col
            y0, x0 = row * crop_size, col * crop_size
            crops.append(
                CropSample(
                    pixels=image.pixels[:, y0 : y0 + crop_size, x0 : x0 + crop_size].copy(),
                    count=float(counts[idx]),
                    source_image_id=image.image_id,
                    crop_index=idx,
                )
            )
    return crops


def augment(crop: CropSample, rng: np.random.Generator, p_flip: float = 0.5, p_gray: float = 0.1) -> CropSample:
    """Random horizontal flip and grayscaling; the count label never changes."""
    pixels = crop.pixels
    if rng.uniform() < p_flip:
        pixels = pixels[:, :, ::-1].copy()
    if rng.uniform() < p_gray:
        luma = np.tensordot(_LUMA, pixels, axes=(0, 0))
        pixels = np.repeat(luma[None, :, :], 3, axis=0)
    return CropSample(
        pixels=pixels,
        count=crop.count,
        source_image_id=crop.source_image_id,
        crop_index=crop.crop_index,
    )


def normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)[:, None, None]
    std = np.asarray(std, dtype=np.float64)[:, None, None]
    return (pixels - mean) / std


# -- manifest I/O ---------------------------------------------------------------


def load_manifest(root: str | Path, split: str = "train", preset: str = "") -> DatasetManifest:
    """Read and validate ``root/manifest``.

    Raises ManifestError on missing files, malformed lines or negative
    counts; count-only entries are permitted but recorded in the manifest
    warnings (per-crop counts will fall back to total/6).
    """
    root = Path(root)
    manifest_path = root / "manifest"
    if not manifest_path.is_file():
        raise ManifestError(f"no manifest file at {manifest_path}")
    entries = []
    count_only = 0
    for lineno, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) not in (2, 3):
            raise ManifestError(f"manifest line {lineno}: expected 2 or 3 tab-separated fields")
        image_path = parts[0].strip()
        try:
            count = int(parts[1])
        except ValueError as exc:
            raise ManifestError(f"manifest line {lineno}: bad count {parts[1]!r}") from exc
        if count < 0:
            raise ManifestError(f"manifest line {lineno}: negative count {count}")
        points_path = parts[2].strip() if len(parts) == 3 and parts[2].strip() else None
        if not (root / image_path).is_file():
            raise ManifestError(f"manifest line {lineno}: missing image file {image_path!r}")
        if points_path is not None and not (root / points_path).is_file():
            raise ManifestError(f"manifest line {lineno}: missing points file {points_path!r}")
        if points_path is None:
            count_only += 1
        entries.append(
            ManifestEntry(
                image_path=image_path,
                count=count,
                points_path=points_path,
                image_id=Path(image_path).stem,
                lineno=lineno,
            )
        )
    manifest = DatasetManifest(root=root, entries=entries, split=split, preset=preset)
    if count_only:
        msg = (
            f"{count_only}/{len(entries)} entries are count-only (no points file); "
            "per-crop counts fall back to total/6"
        )
        manifest.warnings.append(msg)
        logger.warning("%s: %s", root, msg)
    return manifest


def load_points(path: str | Path) -> np.ndarray:
    pts = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split()
        if len(parts) != 2:
            raise ManifestError(f"points file {path} line {lineno}: expected 'x y'")
        pts.append((float(parts[0]), float(parts[1])))
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def load_annotated_image(manifest: DatasetManifest, entry: ManifestEntry) -> AnnotatedImage:
    pixels = read_image(manifest.root / entry.image_path)
    points = None
    if entry.points_path is not None:
        points = load_points(manifest.root / entry.points_path)
    image = AnnotatedImage(
        pixels=pixels, total_count=entry.count, points=points, image_id=entry.image_id
    )
    image.validate()
    return image


# -- synthetic data ----------------------------------------------------------------


def gen_synthetic_dataset(
    root: str | Path,
    n_images: int,
    count_range: tuple = (5, 50),
    seed: int = 0,
    size_range: tuple = ((360, 720), (270, 540)),
) -> DatasetManifest:
    """Write a synthetic count-labeled dataset under ``root``.

    Each image is a low-frequency textured background with k bright blob
    markers at recorded point positions, k drawn uniformly from
    count_range. Generation is fully determined by the seed: the same call
    produces byte-identical trees.
    """
    lo, hi = count_range
    if lo > hi or lo < 0:
        raise ValueError(f"gen_synthetic_dataset: bad count range {count_range}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "points").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n_images):
        image_id = f"img_{i:05d}"
        w = int(rng.integers(size_range[0][0], size_range[0][1] + 1))
        h = int(rng.integers(size_range[1][0], size_range[1][1] + 1))
        k = int(rng.integers(lo, hi + 1))

        # Low-frequency texture: coarse noise upsampled to full resolution.
        coarse = rng.uniform(0.0, 1.0, size=(1, max(2, h // 16), max(2, w // 16)))
        background = 0.15 + 0.30 * bilinear_resize(coarse, h, w)[0]
        tint = rng.uniform(0.75, 1.0, size=3)
        pixels = background[None, :, :] * tint[:, None, None]

        xs = rng.uniform(0.0, w, size=k)
        ys = rng.uniform(0.0, h, size=k)
        base = min(h, w)
        for x, y in zip(xs, ys):
            sigma = rng.uniform(0.015, 0.025) * base
            amp = rng.uniform(0.45, 0.70)
            r = int(np.ceil(3.0 * sigma))
            x0, x1 = max(0, int(x) - r), min(w, int(x) + r + 1)
            y0, y1 = max(0, int(y) - r), min(h, int(y) + r + 1)
            gy = np.arange(y0, y1) - y
            gx = np.arange(x0, x1) - x
            bump = amp * np.exp(-(gy[:, None] ** 2 + gx[None, :] ** 2) / (2.0 * sigma * sigma))
            pixels[:, y0:y1, x0:x1] += bump[None, :, :]
        np.clip(pixels, 0.0, 1.0, out=pixels)

        write_image(root / "images" / f"{image_id}.png", pixels)
        points_text = "".join(f"{float(x)!r} {float(y)!r}\n" for x, y in zip(xs, ys))
        (root / "points" / f"{image_id}.txt").write_text(points_text, encoding="utf-8")
        lines.append(f"images/{image_id}.png\t{k}\tpoints/{image_id}.txt")
    (root / "manifest").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return load_manifest(root)


# -- training-set assembly -----------------------------------------------------------


class TrainingSet:
    """Resized, tiled and cached training images.

    Resize and tiling are deterministic per entry, so they run once at
    construction; augmentation and normalization happen per batch request
    because they depend on the epoch RNG.
    """

    def __init__(self, manifest: DatasetManifest, crop_size: int, data_cfg):
        self.crop_size = crop_size
        self.data_cfg = data_cfg
        self.images = []  # (image_id, crops (6,3,c,c), counts (6,), total)
        for entry in manifest.entries:
            image = load_annotated_image(manifest, entry)
            image = resize_image(image, out_w=TILE_COLS * crop_size, out_h=TILE_ROWS * crop_size)
            crops = tile_image(image, crop_size)
            stack = np.stack([c.pixels for c in crops])
            counts = np.array([c.count for c in crops])
            self.images.append((entry.image_id, stack, counts, float(entry.count)))

    def __len__(self):
        return len(self.images)

    def batch(self, idx: int, rng: np.random.Generator):
        """The six normalized crops of one image: (6,3,c,c), counts (6,), total."""
        image_id, stack, counts, total = self.images[idx]
        cfg = self.data_cfg
        pixels = []
        for j in range(stack.shape[0]):
            crop = CropSample(stack[j], float(counts[j]), image_id, j)
            if cfg.augment:
                crop = augment(crop, rng, p_flip=cfg.p_flip, p_gray=cfg.p_gray)
            pixels.append(normalize(crop.pixels, cfg.mean, cfg.std))
        return np.stack(pixels), counts.copy(), total
