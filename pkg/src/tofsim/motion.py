"""Motion augmentation and the deterministic halves of flow and kernel modules.

Pixel coordinates are (x, y) = (row, column), matching array axes 1 and 2 of
(n_ch, n_x, n_y) tensors. All resampling is bilinear; samples falling
outside the image are zero and reported invalid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import C, ConfigError, DepthMap, RangeError
from .simulate import RawFrames
from .transient import SceneResponse

_EDGE_EPS = 1e-9


def center_channel(n_ch: int) -> int:
    """0-based index of the unwarped middle channel (4 for nine channels)."""
    return (n_ch - 1) // 2


@dataclass(frozen=True)
class Affine2D:
    linear: tuple = ((1.0, 0.0), (0.0, 1.0))
    translation: tuple = (0.0, 0.0)

    def __post_init__(self):
        A = np.asarray(self.linear, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if A.shape != (2, 2) or t.shape != (2,):
            raise ConfigError("affine transform needs a 2x2 matrix and a 2-vector")
        if abs(np.linalg.det(A)) <= 1e-9:
            raise ConfigError("affine transform is singular")
        object.__setattr__(self, "linear", tuple(map(tuple, A.tolist())))
        object.__setattr__(self, "translation", tuple(t.tolist()))

    @classmethod
    def shift(cls, dx, dy):
        return cls(translation=(dx, dy))

    @property
    def A(self):
        return np.asarray(self.linear)

    @property
    def t(self):
        return np.asarray(self.translation)

    def inverse(self) -> "Affine2D":
        Ainv = np.linalg.inv(self.A)
        return Affine2D(Ainv, -Ainv @ self.t)

    def apply(self, x, y):
        A, t = self.A, self.t
        return A[0, 0] * x + A[0, 1] * y + t[0], A[1, 0] * x + A[1, 1] * y + t[1]

    def power_apply(self, n: int, x, y):
        """Apply the transform ``n`` times (its inverse ``-n`` times if n < 0)."""
        T = self if n >= 0 else self.inverse()
        for _ in range(abs(int(n))):
            x, y = T.apply(x, y)
        return x, y


@dataclass(frozen=True)
class Velocity3D:
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.vx, self.vy, self.vz)):
            raise ConfigError("velocity must be finite")


@dataclass
class FlowField:
    """Per-pixel sampling offsets for each non-reference channel.

    ``data`` has shape (n_ch - 1, 2, n_x, n_y); entry ``m`` belongs to the
    m-th channel in order once the reference channel is skipped.
    """

    data: np.ndarray
    reference: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 4 or self.data.shape[1] != 2:
            raise ConfigError("flow field must be (n_ch - 1, 2, n_x, n_y)")
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("flow field contains non-finite values")
        if not 0 <= self.reference <= self.data.shape[0]:
            raise ConfigError("reference channel out of range")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0] + 1

    def for_channel(self, ch: int):
        if ch == self.reference:
            return None
        return self.data[ch if ch < self.reference else ch - 1]

    @classmethod
    def zeros(cls, n_ch, shape, reference=None):
        ref = center_channel(n_ch) if reference is None else reference
        return cls(np.zeros((n_ch - 1, 2) + tuple(shape)), ref)


@dataclass
class KernelMap:
    """Per-pixel kernels.

    kind ``"cross"``: data (n_x, n_y, n_ch, n_ch), a 1x1xn_ch kernel per output
    channel mixing the channel vector at that pixel.
    kind ``"spatial"``: data (n_ch, n_x, n_y, k, k), a kxkx1 kernel per channel.
    """

    kind: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.kind == "cross":
            if self.data.ndim != 4 or self.data.shape[2] != self.data.shape[3]:
                raise ConfigError("cross kernels must be (n_x, n_y, n_ch, n_ch)")
        elif self.kind == "spatial":
            if self.data.ndim != 5 or self.data.shape[3] != self.data.shape[4]:
                raise ConfigError("spatial kernels must be (n_ch, n_x, n_y, k, k)")
            if self.data.shape[3] % 2 != 1:
                raise ConfigError("spatial kernel size must be odd")
        else:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")

    @property
    def spatial_shape(self):
        return self.data.shape[:2] if self.kind == "cross" else self.data.shape[1:3]

    @property
    def size(self) -> int:
        return 1 if self.kind == "cross" else self.data.shape[3]


# -- resampling ----------------------------------------------------------------

def bilinear_sample(img, xs, ys):
    """Sample ``img[..., n_x, n_y]`` at fractional (xs, ys).

    Returns (values, valid); values outside [0, n-1] are zero.
    """
    img = np.asarray(img, dtype=float)
    n_x, n_y = img.shape[-2:]
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    valid = ((xs >= -_EDGE_EPS) & (xs <= n_x - 1 + _EDGE_EPS)
             & (ys >= -_EDGE_EPS) & (ys <= n_y - 1 + _EDGE_EPS))
    xc = np.clip(xs, 0, n_x - 1)
    yc = np.clip(ys, 0, n_y - 1)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(n_x - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(n_y - 2, 0))
    x1 = np.minimum(x0 + 1, n_x - 1)
    y1 = np.minimum(y0 + 1, n_y - 1)
    fx = xc - x0
    fy = yc - y0
    v = (img[..., x0, y0] * ((1 - fx) * (1 - fy)) + img[..., x1, y0] * (fx * (1 - fy))
         + img[..., x0, y1] * ((1 - fx) * fy) + img[..., x1, y1] * (fx * fy))
    return np.where(valid, v, 0.0), valid


def _warp_depth(depth, xs, ys):
    """Bilinear depth that stays +inf unless every contributing neighbour is finite."""
    finite = np.isfinite(depth)
    d, ok = bilinear_sample(np.where(finite, depth, 0.0), xs, ys)
    cover, _ = bilinear_sample(finite.astype(float), xs, ys)
    return np.where(ok & (cover > 1 - 1e-9), d, np.inf)


def translate_frames(frames: RawFrames, dx, dy, channels=None):
    """Resample selected channels at (x + dx, y + dy); returns (frames, valid)."""
    n_x, n_y = frames.spatial_shape
    gx, gy = np.indices((n_x, n_y), dtype=float)
    out = frames.data.copy()
    valid = np.ones((n_x, n_y), dtype=bool)
    for ch in (range(frames.n_channels) if channels is None else channels):
        out[ch], ok = bilinear_sample(frames.data[ch], gx + dx, gy + dy)
        valid &= ok
    return frames.replace(out), valid


# -- motion augmentation ---------------------------------------------------------

def motion_method1(layers, transforms, return_depth=False):
    """Per-channel affine motion of depth-composited layers.

    Channel j (0-based) of each layer is resampled at ``T**(j - m)(x, y)``
    with ``m`` the middle channel, so the middle channel never moves and the
    first and last channels move most. Layers are composited per pixel and
    channel by nearest warped depth; ties go to the lowest layer index.
    Pixels no layer covers are zero with depth +inf.

    layers : list of (RawFrames, DepthMap or array); use +inf depth where a
        layer is empty.
    transforms : one Affine2D per layer.
    """
    if len(layers) == 0 or len(layers) != len(transforms):
        raise ConfigError("need exactly one transform per layer")
    first = layers[0][0]
    n_ch = first.n_channels
    shape = first.spatial_shape
    for fr, dm in layers:
        d = dm.depth if isinstance(dm, DepthMap) else np.asarray(dm, dtype=float)
        if fr.data.shape != first.data.shape or d.shape != tuple(shape):
            raise ConfigError("all layers must share dimensions")
    m = center_channel(n_ch)
    gx, gy = np.indices(shape, dtype=float)
    out = np.zeros((n_ch,) + tuple(shape))
    out_depth = np.full((n_ch,) + tuple(shape), np.inf)
    for (fr, dm), T in zip(layers, transforms):
        depth = dm.depth if isinstance(dm, DepthMap) else np.asarray(dm, dtype=float)
        for j in range(n_ch):
            xs, ys = T.power_apply(j - m, gx, gy)
            vals, ok = bilinear_sample(fr.data[j], xs, ys)
            dj = _warp_depth(depth, xs, ys)
            closer = ok & (dj < out_depth[j])
            out[j] = np.where(closer, vals, out[j])
            out_depth[j] = np.where(closer, dj, out_depth[j])
    frames = RawFrames(out, first.channels)
    if return_depth:
        return frames, out_depth
    return frames


def motion_method2(sr: SceneResponse, v: Velocity3D, steps, c=C):
    """Shifted copies a'(tau, x, y) = a(tau + s*vz/c, x + s*vx, y + s*vy).

    The temporal shift is rounded to whole bins; the spatial shift is
    bilinear with zeros outside the image. Step 0 returns the input.
    """
    out = []
    n_x, n_y = sr.spatial_shape
    gx, gy = np.indices((n_x, n_y), dtype=float)
    for s in steps:
        if s == 0:
            out.append(sr)
            continue
        k = int(np.rint(s * v.vz / c / sr.bin_width))
        if abs(k) >= sr.n_tau:
            raise RangeError("temporal motion shift exceeds the time axis")
        data = np.zeros_like(sr.data)
        if k >= 0:
            data[: sr.n_tau - k] = sr.data[k:]
        else:
            data[-k:] = sr.data[: sr.n_tau + k]
        if s * v.vx != 0 or s * v.vy != 0:
            data, _ = bilinear_sample(data, gx + s * v.vx, gy + s * v.vy)
            data = np.clip(data, 0.0, None)
        out.append(SceneResponse(data, sr.bin_width, sr.t0))
    return out


def correlate_with_motion(sr: SceneResponse, v: Velocity3D, config):
    """Channel j is correlated against the response displaced by (j - m) steps."""
    from .simulate import correlate

    m = center_channel(config.n_channels)
    steps = [j - m for j in range(config.n_channels)]
    shifted = motion_method2(sr, v, steps, c=config.c)
    data = np.empty((config.n_channels,) + tuple(sr.spatial_shape))
    for j, s in enumerate(shifted):
        single = correlate(s, config).data
        data[j] = single[j]
    return RawFrames(data, config.channels)


# -- flow warping and kernels ------------------------------------------------

def warp_by_flow(frames: RawFrames, flow: FlowField):
    """Backward warp: channel c at (x, y) takes its value from (x, y) + flow_c(x, y).

    Returns (frames, valid) where ``valid`` is False at pixels where any
    channel sampled outside the image.
    """
    if flow.n_channels != frames.n_channels:
        raise ConfigError("flow field and frames differ in channel count")
    if tuple(flow.data.shape[2:]) != tuple(frames.spatial_shape):
        raise ConfigError("flow field and frames differ in size")
    gx, gy = np.indices(frames.spatial_shape, dtype=float)
    out = frames.data.copy()
    valid = np.ones(frames.spatial_shape, dtype=bool)
    for ch in range(frames.n_channels):
        f = flow.for_channel(ch)
        if f is None:
            continue
        out[ch], ok = bilinear_sample(frames.data[ch], gx + f[0], gy + f[1])
        valid &= ok
    return frames.replace(out), valid


def inverse_flow(transform: Affine2D, n_ch: int, shape) -> FlowField:
    """Flow that undoes :func:`motion_method1` for a single moving layer."""
    m = center_channel(n_ch)
    gx, gy = np.indices(shape, dtype=float)
    fields = []
    for j in range(n_ch):
        if j == m:
            continue
        xs, ys = transform.power_apply(-(j - m), gx, gy)
        fields.append(np.stack([xs - gx, ys - gy]))
    return FlowField(np.stack(fields), m)


def apply_pixel_kernels(frames: RawFrames, kmap: KernelMap) -> RawFrames:
    """Apply spatially varying kernels.

    cross:   out[ch, x, y] = sum_c K[x, y, ch, c] * in[c, x, y]
    spatial: out[ch, x, y] = sum_{i,j} K[ch, x, y, i, j] * in[ch, x+i-r, y+j-r],
             with coordinates clamped at the border (r = k // 2).
    """
    if tuple(kmap.spatial_shape) != tuple(frames.spatial_shape):
        raise ConfigError("kernel map and frames differ in size")
    x = frames.data
    if kmap.kind == "cross":
        if kmap.data.shape[2] != frames.n_channels:
            raise ConfigError("cross kernel width does not match channel count")
        return frames.replace(np.einsum("xyoc,cxy->oxy", kmap.data, x))
    if kmap.data.shape[0] != frames.n_channels:
        raise ConfigError("spatial kernel count does not match channel count")
    k = kmap.size
    r = k // 2
    padded = np.pad(x, ((0, 0), (r, r), (r, r)), mode="edge")
    n_x, n_y = frames.spatial_shape
    out = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            out += kmap.data[..., i, j] * padded[:, i:i + n_x, j:j + n_y]
    return frames.replace(out)
