"""Saliency maps and the kernel-weighted sampling grids they induce.

A backbone stage's feature map is squeezed to one channel by a 1x1
convolution and normalized with a temperature softmax over all spatial
positions; temperatures below 1 sharpen the map and enlarge the grid
offsets.  The map then attracts sampling coordinates through a distance
kernel: each output cell's source coordinate is the saliency-and-kernel
weighted mean of the uniform-grid coordinates inside the kernel window,

    x'(x,y) = sum_{u,v} S(u,v) k((x,y),(u,v)) u_src / sum_{u,v} S(u,v) k((x,y),(u,v))

computed here as separable Gaussian convolutions of S, S*U and S*V.  The
window is truncated at map borders (no padding of S), so the ratio
renormalizes itself; with a uniform map, interior cells reproduce the
uniform grid and border cells pull slightly inward.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .errors import DimensionError, ParameterError
from .ndtensor import Tensor
from .resampler import SamplingGrid, uniform_grid


@dataclass
class DistanceKernel:
    """Unnormalized isotropic Gaussian weights on a (2r+1)^2 window.

    Normalization is irrelevant: it cancels in the grid ratio. ``factor``
    is the 1-d Gaussian whose outer product equals ``matrix``, used for
    separable convolution.
    """

    sigma: float
    radius: int
    matrix: np.ndarray = field(repr=False)
    factor: np.ndarray = field(repr=False)


def make_kernel(sigma: float, radius: int) -> DistanceKernel:
    """Gaussian distance kernel: entry (dx, dy) = exp(-(dx^2+dy^2)/(2 sigma^2))."""
    if sigma <= 0:
        raise ParameterError(f"kernel sigma must be > 0, got {sigma}")
    if radius < 1:
        raise ParameterError(f"kernel radius must be >= 1, got {radius}")
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    factor = np.exp(-(d ** 2) / (2.0 * sigma ** 2))
    return DistanceKernel(sigma=float(sigma), radius=int(radius),
                          matrix=np.outer(factor, factor), factor=factor)


def default_kernel(out_size: int) -> DistanceKernel:
    """Default bandwidth out_size/9 with a 3-sigma radius."""
    sigma = out_size / 9.0
    return make_kernel(sigma, int(np.ceil(3.0 * sigma)))


def saliency_from_features(features: Tensor, proj_weight: Tensor, tau_o: float) -> Tensor:
    """(C,h,w) features -> (h,w) probability map via 1x1 conv + tau_o softmax."""
    if features.data.ndim != 3:
        raise DimensionError(f"features must be (C,h,w), got {features.shape}")
    c, h, w = features.shape
    maps = saliency_maps_batched(nd.reshape(features, (1, c, h, w)), proj_weight, tau_o)
    return nd.reshape(maps, (h, w))


def saliency_maps_batched(features: Tensor, proj_weight: Tensor, tau_o: float) -> Tensor:
    """(N,C,h,w) features -> (N,h,w) maps, each summing to 1 over all cells."""
    if tau_o <= 0:
        raise ParameterError(f"tau_o must be > 0, got {tau_o}")
    if proj_weight.data.ndim != 4 or proj_weight.shape[0] != 1 or proj_weight.shape[2:] != (1, 1):
        raise DimensionError(f"projection weight must be (1,C,1,1), got {proj_weight.shape}")
    n, c, h, w = features.shape
    logits = nd.conv2d(features, proj_weight)           # (N,1,h,w)
    flat = nd.reshape(logits, (n, h * w))
    probs = nd.softmax_temp(flat, axis=1, temperature=tau_o)
    return nd.reshape(probs, (n, h, w))


def _resize_bilinear(maps: Tensor, out_h: int, out_w: int) -> Tensor:
    """(N,h,w) -> (N,out_h,out_w); maps are resized as channels of one image."""
    n, h, w = maps.shape
    if (h, w) == (out_h, out_w):
        return maps
    grid = uniform_grid(out_h, out_w, h, w, dtype=maps.dtype)
    return nd.grid_sample(maps, grid.x, grid.y)


def grid_coords_batched(maps: Tensor, kernel: DistanceKernel,
                        out_h: int, out_w: int, src_h: int, src_w: int) -> tuple[Tensor, Tensor]:
    """Kernel-weighted coordinate ratio for a stack of saliency maps.

    ``maps`` is (N,h,w), resized here to the grid resolution if needed.
    Returns (gx, gy) of shape (N,out_h,out_w) in source-pixel units; each
    coordinate is a convex combination of in-bounds uniform-grid
    coordinates, so no clamping is ever required.
    """
    if kernel.radius >= min(out_h, out_w):
        raise ParameterError(
            f"kernel radius {kernel.radius} must be < min grid dim {min(out_h, out_w)}")
    maps = _resize_bilinear(maps, out_h, out_w)
    n = maps.shape[0]
    dt = maps.dtype
    s4 = nd.reshape(maps, (n, 1, out_h, out_w))

    uni = uniform_grid(out_h, out_w, src_h, src_w, dtype=dt)
    u = nd.constant(np.broadcast_to(uni.x, (n, 1, out_h, out_w)).copy())
    v = nd.constant(np.broadcast_to(uni.y, (n, 1, out_h, out_w)).copy())
    r = kernel.radius
    krow = nd.constant(kernel.factor.reshape(1, 1, 1, -1).astype(dt))
    kcol = nd.constant(kernel.factor.reshape(1, 1, -1, 1).astype(dt))

    def blur(t: Tensor) -> Tensor:
        return nd.conv2d(nd.conv2d(t, krow, padding=(0, r)), kcol, padding=(r, 0))

    den = blur(s4)
    gx = nd.div(blur(nd.mul(s4, u)), den)
    gy = nd.div(blur(nd.mul(s4, v)), den)
    return nd.reshape(gx, (n, out_h, out_w)), nd.reshape(gy, (n, out_h, out_w))


def grid_from_saliency(s, kernel: DistanceKernel, out_h: int, out_w: int,
                       src_h: int, src_w: int) -> SamplingGrid:
    """Turn one saliency map into a SamplingGrid over a (src_h, src_w) image.

    Accepts an (h,w) array or Tensor; Tensor input keeps the grid
    differentiable with respect to the saliency values.
    """
    tensor_in = isinstance(s, Tensor)
    t = s if tensor_in else nd.constant(np.asarray(s))
    if t.data.ndim != 2:
        raise DimensionError(f"saliency map must be 2-d, got {t.shape}")
    h, w = t.shape
    gx, gy = grid_coords_batched(nd.reshape(t, (1, h, w)), kernel, out_h, out_w, src_h, src_w)
    gx = nd.reshape(gx, (out_h, out_w))
    gy = nd.reshape(gy, (out_h, out_w))
    if not tensor_in:
        return SamplingGrid(x=gx.numpy(), y=gy.numpy(), src_h=src_h, src_w=src_w)
    return SamplingGrid(x=gx, y=gy, src_h=src_h, src_w=src_w)


# ---------------------------------------------------------------------------
# debug dumps
# ---------------------------------------------------------------------------

def write_pfm(path, arr: np.ndarray) -> None:
    """Write a 2-d array as a grayscale PFM (little-endian, bottom-up rows)."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim != 2:
        raise DimensionError(f"PFM dump expects a 2-d array, got {a.shape}")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{a.shape[1]} {a.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(a[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ParameterError(f"not a grayscale PFM: {path}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w)[::-1].copy()


def dump_debug_maps(prefix, maps, grids) -> list:
    """Write saliency maps and grid coordinate fields as PFM files."""
    written = []
    for i, m in enumerate(maps):
        p = f"{prefix}_saliency{i}.pfm"
        write_pfm(p, m.numpy() if isinstance(m, Tensor) else m)
        written.append(p)
    for i, g in enumerate(grids):
        for name, cc in (("x", g.x), ("y", g.y)):
            p = f"{prefix}_grid{i}{name}.pfm"
            write_pfm(p, cc.numpy() if isinstance(cc, Tensor) else cc)
            written.append(p)
    return written
