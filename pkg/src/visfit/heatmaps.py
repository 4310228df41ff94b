"""Camera, heatmap grid and the 1D-heatmap coordinate codec.

Coordinates live on a ``D``-bin grid per axis: x and y cover the crop box,
z covers a root-relative depth window of ``+-depth_half_range`` metres.
Bin ``d`` is centred at ``d + 0.5``.  Nothing is clamped; values outside
``[0, D)`` mean truncation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PerspectiveCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got ({self.width}, {self.height})")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"focal": [self.fx, self.fy], "principal": [self.cx, self.cy],
                "image_size": [self.width, self.height]}

    @classmethod
    def from_dict(cls, d: dict) -> "PerspectiveCamera":
        (fx, fy), (cx, cy), (w, h) = d["focal"], d["principal"], d["image_size"]
        return cls(float(fx), float(fy), float(cx), float(cy), int(w), int(h))


@dataclass(frozen=True)
class HeatmapGrid:
    D: int = 64
    depth_half_range: float = 1.0

    def __post_init__(self):
        if self.D < 2:
            raise ValueError(f"grid needs D >= 2, got {self.D}")
        if not self.depth_half_range > 0:
            raise ValueError("depth_half_range must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.arange(self.D) + 0.5

    def to_dict(self) -> dict:
        return {"D": self.D, "depth_half_range": self.depth_half_range}

    @classmethod
    def from_dict(cls, d: dict) -> "HeatmapGrid":
        return cls(int(d.get("D", 64)), float(d.get("depth_half_range", 1.0)))


@dataclass(frozen=True)
class CropBox:
    """Human bounding box in image pixels; resized to the network input."""

    x0: float
    y0: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"degenerate crop box ({self.width} x {self.height})")

    @property
    def center(self):
        return self.x0 + self.width / 2.0, self.y0 + self.height / 2.0

    def scaled(self, factor: float) -> "CropBox":
        cx, cy = self.center
        w, h = self.width * factor, self.height * factor
        return CropBox(cx - w / 2.0, cy - h / 2.0, w, h)

    def to_list(self) -> list:
        return [self.x0, self.y0, self.width, self.height]

    @classmethod
    def from_list(cls, v) -> "CropBox":
        x0, y0, w, h = (float(a) for a in v)
        return cls(x0, y0, w, h)


def project(camera: PerspectiveCamera, points) -> np.ndarray:
    """Pinhole projection of camera-space points (metres) to pixels."""
    P = np.asarray(points, dtype=np.float64)
    if np.any(P[..., 2] <= 1e-6):
        raise ValueError("behind camera: point depth must exceed 1e-6 m")
    px = camera.fx * P[..., 0] / P[..., 2] + camera.cx
    py = camera.fy * P[..., 1] / P[..., 2] + camera.cy
    return np.stack([px, py], axis=-1)


def to_grid(camera: PerspectiveCamera, grid: HeatmapGrid, crop: CropBox, points,
            root_depth: float, return_jacobian: bool = False):
    """Map camera-space points to heatmap grid coordinates.

    Accepts ``(3,)`` or ``(N, 3)``.  With ``return_jacobian`` the per-point
    3x3 Jacobian with respect to the point is returned as well (the
    ``root_depth`` derivative of z is ``-dz/dZ``).
    """
    P = np.asarray(points, dtype=np.float64)
    pix = project(camera, P)
    D = grid.D
    gx = (pix[..., 0] - crop.x0) * (D / crop.width)
    gy = (pix[..., 1] - crop.y0) * (D / crop.height)
    zscale = D / (2.0 * grid.depth_half_range)
    gz = (P[..., 2] - root_depth) * zscale + D / 2.0
    out = np.stack([gx, gy, gz], axis=-1)
    if not return_jacobian:
        return out
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    sx = camera.fx * D / crop.width
    sy = camera.fy * D / crop.height
    jac = np.zeros(P.shape[:-1] + (3, 3))
    jac[..., 0, 0] = sx / Z
    jac[..., 0, 2] = -sx * X / Z ** 2
    jac[..., 1, 1] = sy / Z
    jac[..., 1, 2] = -sy * Y / Z ** 2
    jac[..., 2, 2] = zscale
    return out, jac


def from_grid(camera: PerspectiveCamera, grid: HeatmapGrid, crop: CropBox, coords,
              root_depth: float) -> np.ndarray:
    """Back-project grid coordinates to camera space (inverse of :func:`to_grid`)."""
    g = np.asarray(coords, dtype=np.float64)
    D = grid.D
    Z = root_depth + (g[..., 2] - D / 2.0) * (2.0 * grid.depth_half_range / D)
    px = g[..., 0] * crop.width / D + crop.x0
    py = g[..., 1] * crop.height / D + crop.y0
    X = (px - camera.cx) * Z / camera.fx
    Y = (py - camera.cy) * Z / camera.fy
    return np.stack([X, Y, Z], axis=-1)


def encode_target(coord, sigma: float = 2.0, D: int = 64) -> np.ndarray:
    """Discrete Gaussian heatmaps over bin centres, one row per axis.

    ``coord`` is ``(3,)`` or ``(N, 3)``; the result is ``(3, D)`` or
    ``(N, 3, D)``, each row summing to one.  The Gaussian centre is shifted so
    that the heatmap's expected bin centre equals the coordinate; without the
    shift, mass cut off at the grid ends biases the decoded value by up to a
    full bin.  Coordinates beyond the reachable range ``[0.5, D - 0.5]`` give
    heatmaps massed on the boundary bin.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    c = np.asarray(coord, dtype=np.float64)
    centers = np.arange(D) + 0.5
    lo = np.full(c.shape, -10.0 * sigma - 1.0)
    hi = np.full(c.shape, D + 10.0 * sigma + 1.0)
    # the heatmap mean is strictly increasing in the Gaussian centre
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        below = _gaussian_bins(mid, sigma, centers) @ centers < c
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return _gaussian_bins(0.5 * (lo + hi), sigma, centers)


def _gaussian_bins(mu, sigma, centers):
    logits = -((centers - np.asarray(mu)[..., None]) ** 2) / (2.0 * sigma ** 2)
    logits -= logits.max(axis=-1, keepdims=True)
    h = np.exp(logits)
    return h / h.sum(axis=-1, keepdims=True)


def soft_argmax(h, temperature: float = 1.0, logits: bool = False):
    """Expected bin centre under a temperature-sharpened distribution.

    By default ``h`` is a non-negative heatmap and the distribution is
    ``h ** (1 / T)`` renormalised, i.e. a softmax over ``log(h) / T``; an
    all-zero row decodes to the grid centre.  With ``logits=True`` the input
    is treated as unnormalised scores and the softmax acts on ``h / T``
    directly, as for raw network outputs.  Any leading batch shape works.
    """
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise ValueError("heatmap entries must be finite")
    D = h.shape[-1]
    centers = np.arange(D) + 0.5
    if logits:
        z = h / temperature
    else:
        if np.any(h < 0):
            raise ValueError("heatmap entries must be non-negative (pass logits=True for scores)")
        with np.errstate(divide="ignore"):
            z = np.log(h) / temperature
        empty = np.all(h == 0, axis=-1, keepdims=True)
        z = np.where(empty, 0.0, z)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ centers


def decode_visibility(scores, threshold: float = 0.5) -> np.ndarray:
    """Threshold post-sigmoid visibility scores; the boundary counts as visible."""
    return np.asarray(scores, dtype=np.float64) >= threshold
