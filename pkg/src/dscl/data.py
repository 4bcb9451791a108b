"""Synthetic tiny-lesion dataset, image-folder ingestion, splits, augmentation.

Three classes on a shared cluttered background (low-frequency blobs plus
per-pixel speckle, identically distributed across classes, so background
statistics carry no label information):

* class 0 (normal): background only; its red channel is capped below the
  lesion saturation threshold, so no normal pixel ever reaches lesion
  saturation.
* class 1 (vascular-like): a small saturated disc.
* class 2 (inflammatory-like): a small saturated ring (hollow center) with
  a mildly elevated green channel.

Lesions are tiny relative to the field (diameter below resolution/4) and
both lesion classes share the same red saturation, so after aggressive
uniform down-sampling the disc/ring distinction largely washes out while
a zoomed view keeps it trivial.  Intra-class variance comes from the
random background, lesion position, size and intensity jitter.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import DatasetError, IngestionError, ParameterError
from .resampler import SamplingGrid, apply_grid, uniform_grid

N_CLASSES = 3
CLASS_NAMES = ("normal", "vascular", "inflammatory")

LESION_CH0_RANGE = (0.86, 0.97)   # red saturation drawn for lesion pixels
LESION_CH0_THRESHOLD = 0.82       # no class-0 pixel may exceed this in channel 0
BACKGROUND_CH0_MAX = 0.78


@dataclass
class DatasetSpec:
    n_per_class: int = 300
    resolution: int = 64
    lesion_min: float = 4.0       # lesion diameter range, pixels
    lesion_max: float = 8.0
    clutter: float = 0.25         # per-pixel speckle amplitude
    blob_amplitude: float = 0.22  # low-frequency background blob amplitude
    illumination: float = 0.35    # class-independent brightness ramp/vignette amplitude
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ParameterError("n_per_class must be >= 1")
        if self.resolution < 16:
            raise ParameterError("resolution must be >= 16")
        if not (2.0 <= self.lesion_min <= self.lesion_max):
            raise ParameterError(f"bad lesion size range [{self.lesion_min}, {self.lesion_max}]")
        if self.lesion_max >= self.resolution / 4:
            raise ParameterError("lesions must stay tiny: lesion_max < resolution/4")
        if self.clutter < 0 or self.blob_amplitude < 0 or self.illumination < 0:
            raise ParameterError("noise amplitudes must be >= 0")


@dataclass
class LabeledImage:
    image: np.ndarray            # (3, H, W) float64 in [0, 1]
    label: int
    sample_id: str
    lesion_box: tuple | None = None  # (y0, y1, x0, x1) inclusive, None for class 0


def _background(rng, res, clutter, blob_amplitude, illumination):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    img = np.empty((3, res, res))
    base = rng.uniform(0.3, 0.55, size=3)
    chan_scale = rng.uniform(0.55, 1.0, size=3)
    img[:] = base[:, None, None]
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, res - 1, size=2)
        sig = rng.uniform(res / 8, res / 3)
        amp = blob_amplitude * rng.uniform(-1.0, 1.0)
        field = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig ** 2))
        img += (amp * chan_scale)[:, None, None] * field
    # class-independent illumination nuisance: directional ramp + radial vignette
    if illumination > 0:
        theta = rng.uniform(0, 2 * np.pi)
        ramp = ((xx * np.cos(theta) + yy * np.sin(theta)) / res)
        ramp -= ramp.mean()
        vy, vx = rng.uniform(0.25 * res, 0.75 * res, size=2)
        vig = -((xx - vx) ** 2 + (yy - vy) ** 2) / (res * res)
        vig -= vig.mean()
        shade = rng.uniform(0.3, 1.0) * illumination * ramp + \
            rng.uniform(0.0, 1.0) * illumination * vig
        img += shade[None, :, :] * rng.uniform(0.7, 1.0, size=3)[:, None, None]
    img += rng.uniform(-clutter, clutter, size=(3, res, res))
    img = np.clip(img, 0.0, 1.0)
    img[0] = np.minimum(img[0], BACKGROUND_CH0_MAX)
    return img, (yy, xx)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _draw_lesion(img, grids, rng, label, spec):
    """Blend a disc (class 1) or ring (class 2) into the background; returns the box."""
    yy, xx = grids
    res = spec.resolution
    r_out = rng.uniform(spec.lesion_min, spec.lesion_max) / 2.0
    margin = spec.lesion_max / 2.0 + 2.0
    cy, cx = rng.uniform(margin, res - 1 - margin, size=2)
    d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    edge = 0.5
    mask = _sigmoid((r_out - d) / edge)
    if label == 2:
        r_in = r_out * rng.uniform(0.55, 0.72)
        mask = mask * _sigmoid((d - r_in) / edge)
    mask /= mask.max()  # thin rings otherwise never reach full opacity
    # classes 1 and 2 share the red saturation and their green ranges overlap,
    # so shape (solid vs hollow) is the main reliable discriminator
    color = np.array([
        rng.uniform(*LESION_CH0_RANGE),
        rng.uniform(0.14, 0.28) if label == 2 else rng.uniform(0.08, 0.22),
        rng.uniform(0.05, 0.15),
    ])
    img[:] = img * (1.0 - mask) + color[:, None, None] * mask
    y0 = max(0, int(np.floor(cy - r_out)))
    y1 = min(res - 1, int(np.ceil(cy + r_out)))
    x0 = max(0, int(np.floor(cx - r_out)))
    x1 = min(res - 1, int(np.ceil(cx + r_out)))
    return (y0, y1, x0, x1)


def generate_sample(spec: DatasetSpec, label: int, index: int) -> LabeledImage:
    """Pure per-sample generation: (spec.seed, label, index) fixes the image."""
    rng = np.random.default_rng([spec.seed, label, index])
    img, grids = _background(rng, spec.resolution, spec.clutter, spec.blob_amplitude,
                             spec.illumination)
    box = None
    if label > 0:
        box = _draw_lesion(img, grids, rng, label, spec)
    return LabeledImage(image=img, label=label, sample_id=f"c{label}_{index:05d}",
                        lesion_box=box)


def generate_dataset(spec: DatasetSpec) -> list:
    return [generate_sample(spec, label, i)
            for label in range(N_CLASSES) for i in range(spec.n_per_class)]


# ---------------------------------------------------------------------------
# image-folder ingestion / export
# ---------------------------------------------------------------------------

def _resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img
    return apply_grid(img, uniform_grid(out_h, out_w, h, w))


def _center_crop_square(img: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    side = min(h, w)
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    return img[:, y0:y0 + side, x0:x0 + side]


def load_image_folder(root, resolution: int = 64) -> list:
    """Load `root/<class_name>/*.png` as LabeledImages.

    Labels follow lexicographic class-name order. Images are scaled to
    [0,1], center-cropped square and resized to ``resolution``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root is not a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class subdirectories under {root}")
    out = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise DatasetError(f"class directory is empty: {cdir}")
        for f in files:
            if f.suffix.lower() != ".png":
                raise IngestionError(f"not a PNG file: {f}")
            try:
                with PILImage.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError) as e:
                raise IngestionError(f"cannot read image file {f}: {e}") from e
            img = _resize(_center_crop_square(arr.transpose(2, 0, 1)), resolution, resolution)
            out.append(LabeledImage(image=img, label=label,
                                    sample_id=f"{cdir.name}/{f.stem}"))
    return out


def export_dataset(dataset, root) -> None:
    """Write a dataset in the image-folder layout as 8-bit PNGs."""
    root = Path(root)
    for li in dataset:
        cdir = root / f"{li.label}_{CLASS_NAMES[li.label]}"
        cdir.mkdir(parents=True, exist_ok=True)
        arr = np.clip(np.round(li.image * 255.0), 0, 255).astype(np.uint8)
        PILImage.fromarray(arr.transpose(1, 2, 0)).save(cdir / f"{li.sample_id.replace('/', '_')}.png")


# ---------------------------------------------------------------------------
# splits and augmentation
# ---------------------------------------------------------------------------

def kfold_split(dataset, k: int, seed: int) -> list:
    """Stratified k-fold; returns k (train_indices, test_indices) pairs."""
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    labels = np.array([li.label for li in dataset])
    rng = np.random.default_rng([seed, k])
    fold_of = np.empty(len(dataset), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise ParameterError(f"class {cls} has {idx.size} samples, fewer than k={k}")
        rng.shuffle(idx)
        fold_of[idx] = np.arange(idx.size) % k
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, test))
    return folds


def random_flip(img: np.ndarray, rng) -> np.ndarray:
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
    return np.ascontiguousarray(img)


def choose_crop_window(shape_hw, lesion_box, rng, side: int):
    """Pick a side x side window whose interior contains the lesion box.

    The corner is drawn directly from the containing range, so containment
    holds by construction whenever the window is at least box-sized; a
    window smaller than the box falls back to a center crop. Returns the
    (y0, x0) corner.
    """
    h, w = shape_hw
    if lesion_box is None:
        return int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1))
    by0, by1, bx0, bx1 = lesion_box
    ylo, yhi = max(0, by1 - side + 1), min(h - side, by0)
    xlo, xhi = max(0, bx1 - side + 1), min(w - side, bx0)
    if ylo > yhi or xlo > xhi:
        return (h - side) // 2, (w - side) // 2
    return int(rng.integers(ylo, yhi + 1)), int(rng.integers(xlo, xhi + 1))


def random_crop_view(img: np.ndarray, lesion_box, rng, out_size: int,
                     scale_range=(0.4, 1.0)) -> np.ndarray:
    """Random resized crop + flips; the crop window always keeps the lesion,
    so crops preserve the label by construction."""
    c, h, w = img.shape
    s = rng.uniform(*scale_range)
    side = max(out_size // 2, int(round(min(h, w) * np.sqrt(s))))
    side = min(side, h, w)
    y0, x0 = choose_crop_window((h, w), lesion_box, rng, side)
    # sample the crop window straight from the source (no intermediate copy)
    base = uniform_grid(out_size, out_size, side, side)
    grid = SamplingGrid(x=base.x + x0, y=base.y + y0, src_h=h, src_w=w)
    return random_flip(apply_grid(img, grid), rng)
