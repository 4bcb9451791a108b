"""Uniform and grid-driven non-uniform image down-sampling.

Images are (C, H, W) arrays (or Tensors of the same layout) with values
in [0, 1].  Coordinate convention is corner-aligned: (0, 0) is the center
of the top-left pixel and (W-1, H-1) the center of the bottom-right one,
so the uniform grid hits corner pixels exactly and "resample to the same
size" is the identity.

Output pixels are produced by backward mapping: each output cell looks up
its source coordinate in a :class:`SamplingGrid` and bilinearly blends the
four neighboring source pixels.  Out-of-range coordinates are clamped, not
wrapped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import DimensionError, ParameterError
from .ndtensor import Tensor


def check_image(img) -> tuple[int, int, int]:
    """Validate (C,H,W) layout and finite values; returns the shape triple."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim != 3:
        raise DimensionError(f"image must be (C,H,W), got shape {arr.shape}")
    c, h, w = arr.shape
    if h < 2 or w < 2:
        raise DimensionError(f"image spatial dims must be >= 2, got {h}x{w}")
    if not np.isfinite(arr).all():
        raise ParameterError("image contains non-finite values")
    return c, h, w


@dataclass
class SamplingGrid:
    """Per-output-pixel source coordinates into a (src_h, src_w) image.

    ``x`` and ``y`` are (out_h, out_w) arrays (or Tensors) holding column
    and row coordinates in source-pixel units.  The displacement of each
    coordinate from the uniform grid is the learned offset.
    """

    x: object  # np.ndarray or Tensor
    y: object
    src_h: int
    src_w: int

    @property
    def out_h(self) -> int:
        return _coord_array(self.x).shape[0]

    @property
    def out_w(self) -> int:
        return _coord_array(self.x).shape[1]

    def validate(self) -> None:
        xs, ys = _coord_array(self.x), _coord_array(self.y)
        if xs.ndim != 2 or xs.shape != ys.shape:
            raise DimensionError(f"grid coordinate shapes invalid: {xs.shape} vs {ys.shape}")
        if xs.min() < 0 or xs.max() > self.src_w - 1 or ys.min() < 0 or ys.max() > self.src_h - 1:
            raise DimensionError("grid coordinates outside the source image bounds")


def _coord_array(c) -> np.ndarray:
    return c.data if isinstance(c, Tensor) else np.asarray(c)


def uniform_grid(out_h: int, out_w: int, src_h: int, src_w: int, dtype=np.float64) -> SamplingGrid:
    """Corner-aligned uniform grid: cell (x,y) -> (x*(W-1)/(out_w-1), y*(H-1)/(out_h-1))."""
    if out_h < 2 or out_w < 2:
        raise ParameterError(f"grid dims must be >= 2, got {out_h}x{out_w}")
    dt = np.dtype(dtype).type
    xs = np.arange(out_w, dtype=dt) * ((dt(src_w) - 1) / dt(out_w - 1))
    ys = np.arange(out_h, dtype=dt) * ((dt(src_h) - 1) / dt(out_h - 1))
    gx = np.broadcast_to(xs, (out_h, out_w)).copy()
    gy = np.broadcast_to(ys[:, None], (out_h, out_w)).copy()
    return SamplingGrid(x=gx, y=gy, src_h=src_h, src_w=src_w)


def bilinear_sample(img, x: float, y: float) -> np.ndarray:
    """Per-channel bilinear blend of the four pixels around (x, y).

    Exact at integer coordinates; the caller is responsible for sensible
    (in-range) coordinates, clamping is only a safety net.
    """
    check_image(img)
    t = img if isinstance(img, Tensor) else nd.constant(np.asarray(img, dtype=np.float64))
    out = nd.grid_sample(t, np.array([[float(x)]]), np.array([[float(y)]]))
    return out.numpy().reshape(-1) if not isinstance(img, Tensor) else out


def apply_grid(img_high, grid: SamplingGrid):
    """Backward-map an image through a sampling grid.

    Returns a (C, out_h, out_w) image of the same kind as the input
    (ndarray in, ndarray out; Tensor in, Tensor out). Differentiable with
    respect to both the image and Tensor-valued grid coordinates, so
    saliency gradients can flow when enabled.
    """
    c, h, w = check_image(img_high)
    if (h, w) != (grid.src_h, grid.src_w):
        raise DimensionError(
            f"grid was built for a {grid.src_h}x{grid.src_w} source but image is {h}x{w}")
    xs, ys = _coord_array(grid.x), _coord_array(grid.y)
    if xs.shape != ys.shape or xs.ndim != 2:
        raise DimensionError(f"grid coordinate shapes invalid: {xs.shape} vs {ys.shape}")
    assert xs.min() >= -1e-6 and xs.max() <= w - 1 + 1e-6, "grid x coordinates out of range"
    assert ys.min() >= -1e-6 and ys.max() <= h - 1 + 1e-6, "grid y coordinates out of range"
    tensor_in = isinstance(img_high, Tensor)
    t = img_high if tensor_in else nd.constant(np.asarray(img_high))
    out = nd.grid_sample(t, grid.x, grid.y)
    return out if tensor_in or isinstance(grid.x, Tensor) else out.numpy()


def uniform_downsample(img, out_h: int, out_w: int):
    """Resample to (out_h, out_w) through the uniform grid (bilinear, corner-aligned)."""
    c, h, w = check_image(img)
    if out_h < 2 or out_w < 2:
        raise ParameterError(f"output dims must be >= 2, got {out_h}x{out_w}")
    if out_h > h or out_w > w:
        raise ParameterError(f"output dims {out_h}x{out_w} exceed source {h}x{w}")
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    return apply_grid(img, uniform_grid(out_h, out_w, h, w, dtype=arr.dtype))
