"""Image and depth signal operators used to build the adaptation losses.

* instance-aware depth gating (``mask_depth``)
* channel-mean grayscale and weighted 4-neighbour Laplacian edge maps
* clipped-window median filtering for pseudo-labels
* the projective relation between two views (``project``), used to check
  that an identity pose leaves pixels where they are
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DimensionError, ParameterError
from .tensor import Tensor, abs_, as_tensor, make_result, mul

WEIGHT_MODES = ("constant", "inverse-mean")


@dataclass(frozen=True)
class MedianConfig:
    window: int = 5
    support_only: bool = False

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ParameterError(f"median window must be a positive odd int, got {self.window}")

    @property
    def radius(self):
        return self.window // 2


@dataclass
class EdgeMap:
    values: Tensor
    weights: np.ndarray


def mask_depth(depth, masks):
    """Gate the depth map with each binary instance mask.

    Returns one tensor per mask; gradients reach ``depth`` only on the mask
    support.
    """
    depth = as_tensor(depth)
    out = []
    for m in _mask_arrays(masks):
        if m.shape != depth.shape:
            raise DimensionError(f"mask shape {m.shape} does not match depth {depth.shape}")
        out.append(mul(depth, Tensor(m, dtype=depth.dtype)))
    return out


def _mask_arrays(masks):
    return masks.masks if hasattr(masks, "masks") else list(masks)


def gray_mean(image):
    """Per-pixel mean over channels of an ``H x W x C`` image."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64, copy=True)
    if image.ndim != 3 or image.shape[2] < 1:
        raise DimensionError(f"expected HxWxC image, got {image.shape}")
    return image.mean(axis=2)


def _neighbour_index(h, w):
    rows = np.arange(h)
    cols = np.arange(w)
    down = np.minimum(rows + 1, h - 1)
    up = np.maximum(rows - 1, 0)
    right = np.minimum(cols + 1, w - 1)
    left = np.maximum(cols - 1, 0)
    return down, up, right, left


def clamped_laplacian(field):
    """5-point Laplacian with replicate-border (clamped index) handling."""
    field = as_tensor(field)
    if field.data.ndim != 2:
        raise DimensionError(f"laplacian expects an HxW field, got {field.shape}")
    f = field.data
    h, w = f.shape
    down, up, right, left = _neighbour_index(h, w)
    out = f[down, :] + f[up, :] + f[:, right] + f[:, left] - 4 * f

    def rule(g):
        gf = -4 * g
        np.add.at(gf, (down, slice(None)), g)
        np.add.at(gf, (up, slice(None)), g)
        np.add.at(gf, (slice(None), right), g)
        np.add.at(gf, (slice(None), left), g)
        return (gf,)

    return make_result(out, (field,), rule, "laplacian")


def edge_weights(field, mode="constant"):
    """Non-negative per-pixel weights for an edge map.

    ``constant`` gives 1 everywhere; ``inverse-mean`` gives ``1 / mean(|field|)``
    so edge magnitudes of differently-scaled maps become comparable.
    """
    shape = np.shape(field)
    if mode == "constant":
        return np.ones(shape)
    if mode == "inverse-mean":
        m = float(np.abs(np.asarray(field)).mean())
        return np.full(shape, 1.0 / m if m > 0 else 1.0)
    raise ParameterError(f"unknown weight mode {mode!r}; choose from {WEIGHT_MODES}")


def edge_map(field, weights=None):
    """Weighted absolute Laplacian ``weights * |lap(field)|``.

    ``weights`` are treated as constants; gradients flow into ``field`` only.
    """
    field = as_tensor(field)
    if weights is None:
        weights = np.ones(field.shape)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != field.shape:
        raise DimensionError(f"weights {weights.shape} do not match field {field.shape}")
    if (weights < 0).any():
        raise ParameterError("edge weights must be non-negative")
    values = mul(abs_(clamped_laplacian(field)), Tensor(weights, dtype=field.dtype))
    return EdgeMap(values=values, weights=weights)


def median_filter(masked, cfg=None, support=None):
    """Clipped-window median of a 2-D map.

    Each output pixel is the median of all in-bounds values in the
    ``s x s`` window around it; the window shrinks at the borders. Even-sized
    windows take the lower median. With ``cfg.support_only`` only pixels in
    ``support`` take part (pixels whose window holds none become 0).

    The result is a plain array: it is a fixed target, not differentiated.
    """
    cfg = cfg or MedianConfig()
    arr = masked.data if isinstance(masked, Tensor) else np.asarray(masked)
    if arr.ndim != 2:
        raise DimensionError(f"median_filter expects an HxW map, got {arr.shape}")
    r = cfg.radius
    if r == 0 and not cfg.support_only:
        return arr.copy()
    h, w = arr.shape
    work = arr.astype(np.float64)
    if cfg.support_only:
        if support is None:
            support = arr != 0
        work = np.where(np.asarray(support, dtype=bool), work, np.nan)
    padded = np.pad(work, r, constant_values=np.nan)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (2 * r + 1, 2 * r + 1))
    flat = np.sort(windows.reshape(h, w, -1), axis=-1)  # NaNs sort last
    count = np.sum(~np.isnan(flat), axis=-1)
    idx = np.maximum((count - 1) // 2, 0)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = np.where(count > 0, out, 0.0)
    return out.astype(arr.dtype)


# --------------------------------------------------------------- geometry


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K):
        K = np.asarray(K, dtype=float)
        if K.shape != (3, 3) or K[0, 1] != 0 or K[1, 0] != 0 or tuple(K[2]) != (0, 0, 1):
            raise ParameterError("intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]")
        return cls(K[0, 0], K[1, 1], K[0, 2], K[1, 2])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


def project(pixel, depth, K, R=None, t=None):
    """Map pixel ``(x, y)`` with depth into a second view.

    Evaluates ``K (R K^-1 [x, y, 1]^T depth + t) = z' [x', y', 1]^T`` and
    returns ``((x', y'), z')``. With the identity pose (``R = I``, ``t = 0``,
    also the default) the pixel does not move and this returns the inputs
    unchanged without a floating-point round trip through ``K^-1``.
    """
    if not depth > 0:
        raise ParameterError(f"depth must be positive, got {depth}")
    if isinstance(K, CameraIntrinsics):
        K = K.K
    K = np.asarray(K, dtype=np.float64)
    x, y = pixel
    R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64)
    t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64).reshape(3)
    if np.array_equal(R, np.eye(3)) and not t.any():
        return (x, y), depth
    point = R @ np.linalg.solve(K, np.array([x, y, 1.0])) * depth + t
    hom = K @ point
    z = hom[2]
    if not z > 0:
        raise BehindCameraError(f"projected depth {z} is not in front of the camera")
    return (hom[0] / z, hom[1] / z), z
