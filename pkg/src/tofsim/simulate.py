"""Raw correlation frames from scene responses, plus sensor effects."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CameraConfig, ConfigError, RangeError
from .rng import uniform_grid
from .transient import SceneResponse


@dataclass
class RawFrames:
    """Raw correlation measurements, shape (n_ch, n_x, n_y).

    ``channels`` is the ordered CameraFunction tuple the frames were taken with.
    """

    data: np.ndarray
    channels: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.channels = tuple(self.channels)
        if self.data.ndim != 3:
            raise ConfigError("raw frames must be (n_ch, n_x, n_y)")
        if self.data.shape[0] != len(self.channels):
            raise ConfigError("channel count does not match metadata")
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("raw frames contain non-finite values")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple:
        return self.data.shape[1:]

    def replace(self, data) -> "RawFrames":
        return RawFrames(data, self.channels)

    def select(self, sl) -> "RawFrames":
        """Channel subset; ``sl`` is a slice or index list."""
        idx = np.arange(self.n_channels)[sl]
        return RawFrames(self.data[idx], tuple(self.channels[i] for i in idx))


def correlate(sr: SceneResponse, config: CameraConfig, check_resolution=True) -> RawFrames:
    """i = sum_k a[k] f(tau_k) for every channel; linear in ``sr``."""
    if check_resolution and tuple(sr.spatial_shape) != tuple(config.resolution):
        raise ConfigError(f"scene is {sr.spatial_shape}, camera is {config.resolution}")
    F = config.channel_matrix(sr.taus)
    n_tau = sr.n_tau
    flat = sr.data.reshape(n_tau, -1)
    out = F @ flat
    return RawFrames(out.reshape((config.n_channels,) + sr.spatial_shape), config.channels)


def apply_gain_map(frames: RawFrames, gain) -> RawFrames:
    """Multiply every channel by a per-pixel gain (vignetting, texture)."""
    g = np.asarray(gain, dtype=float)
    if g.ndim == 0:
        g = np.full(frames.spatial_shape, float(g))
    if g.shape != frames.spatial_shape:
        raise ConfigError(f"gain map {g.shape} does not match frames {frames.spatial_shape}")
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ConfigError("gain must be finite and nonnegative")
    return frames.replace(frames.data * g[None])


def tile_texture(tile, shape):
    """Repeat a small texture patch to cover ``shape``."""
    tile = np.asarray(tile, dtype=float)
    reps = (-(-shape[0] // tile.shape[0]), -(-shape[1] // tile.shape[1]))
    return np.tile(tile, reps)[: shape[0], : shape[1]]


def vignetting(shape, strength=0.3, power=2.0):
    """Radial falloff ``1 - strength * r**power``, r normalised to the half-diagonal."""
    n_x, n_y = shape
    x = (np.arange(n_x) - (n_x - 1) / 2)[:, None]
    y = (np.arange(n_y) - (n_y - 1) / 2)[None, :]
    r = np.hypot(x, y) / np.hypot((n_x - 1) / 2 or 1, (n_y - 1) / 2 or 1)
    return np.clip(1.0 - strength * r**power, 0.0, None)


def apply_pixel_delay(sr: SceneResponse, delay) -> SceneResponse:
    """Shift each pixel's time axis by ``round(delay / bin_width)`` bins.

    Positive delays move energy to later bins; bins pushed past either end
    are dropped and vacated bins are zero.
    """
    d = np.asarray(delay, dtype=float)
    if d.ndim == 0:
        d = np.full(sr.spatial_shape, float(d))
    if d.shape != tuple(sr.spatial_shape):
        raise ConfigError("delay map does not match scene response")
    if np.any(np.abs(d) >= sr.n_tau * sr.bin_width) or not np.all(np.isfinite(d)):
        raise RangeError("delay exceeds the time axis")
    shift = np.rint(d / sr.bin_width).astype(np.int64)
    n_tau = sr.n_tau
    k = np.arange(n_tau)[:, None, None]
    src = k - shift[None]
    ok = (src >= 0) & (src < n_tau)
    ix, iy = np.indices(sr.spatial_shape)
    out = np.where(ok, sr.data[np.clip(src, 0, n_tau - 1), ix[None], iy[None]], 0.0)
    return SceneResponse(out, sr.bin_width, sr.t0)


@dataclass
class NoiseLUT:
    """Empirical noise lookup keyed on expected raw value.

    Each bin stores the deviations ``sample - expected`` of the calibration
    pairs whose expected value fell in it; sampling re-centres a bootstrap
    draw on the requested clean value.
    """

    edges: np.ndarray
    tables: list
    source_counts: np.ndarray | None = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.tables = [np.asarray(t, dtype=float) for t in self.tables]
        if self.edges.ndim != 1 or self.edges.size < 3:
            raise ConfigError("noise LUT needs at least two bins")
        if np.any(np.diff(self.edges) <= 0):
            raise ConfigError("LUT bin edges must be strictly increasing")
        if len(self.tables) != self.edges.size - 1:
            raise ConfigError("one table per bin required")
        if any(t.size == 0 for t in self.tables):
            raise ConfigError("every LUT bin must be nonempty")
        if self.source_counts is None:
            self.source_counts = np.array([t.size for t in self.tables])
        self._flat = np.concatenate(self.tables)
        counts = np.array([t.size for t in self.tables], dtype=np.int64)
        self._counts = counts
        self._offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])

    @property
    def n_bins(self) -> int:
        return self.edges.size - 1

    def bin_of(self, values):
        lo, hi = self.edges[0], self.edges[-1]
        width = (hi - lo) / self.n_bins
        idx = np.floor((np.asarray(values, dtype=float) - lo) / width).astype(np.int64)
        return np.clip(idx, 0, self.n_bins - 1)

    def bin_mean(self, b: int) -> float:
        return float(self.tables[b].mean())

    def draw(self, values, uniforms):
        """Deviation drawn for each value given matching uniforms in [0, 1)."""
        b = self.bin_of(values)
        pick = np.minimum((uniforms * self._counts[b]).astype(np.int64), self._counts[b] - 1)
        return self._flat[self._offsets[b] + pick]


def build_noise_lut(expected, samples, n_bins=64) -> NoiseLUT:
    """Bin (expected, noisy sample) pairs by expected value.

    Bins span [min, max] of ``expected`` uniformly. Bins that received no
    pairs reuse the table of the nearest nonempty bin (lower bin on ties).
    """
    e = np.asarray(expected, dtype=float).ravel()
    s = np.asarray(samples, dtype=float).ravel()
    if e.size == 0:
        raise ConfigError("cannot build a noise LUT from no samples")
    if e.shape != s.shape:
        raise ConfigError("expected values and samples differ in length")
    if int(n_bins) < 2:
        raise ConfigError("noise LUT needs at least two bins")
    n_bins = int(n_bins)
    lo, hi = float(e.min()), float(e.max())
    if hi <= lo:
        pad = max(abs(lo), 1.0) * 1e-6
        lo, hi = lo - pad, hi + pad
    edges = np.linspace(lo, hi, n_bins + 1)
    width = (hi - lo) / n_bins
    idx = np.clip(np.floor((e - lo) / width).astype(np.int64), 0, n_bins - 1)
    order = np.argsort(idx, kind="stable")
    dev = (s - e)[order]
    counts = np.bincount(idx, minlength=n_bins)
    splits = np.split(dev, np.cumsum(counts)[:-1])
    filled = np.flatnonzero(counts)
    tables = []
    for b in range(n_bins):
        if counts[b]:
            tables.append(splits[b])
        else:
            nearest = filled[np.argmin(np.abs(filled - b))]
            tables.append(splits[nearest])
    return NoiseLUT(edges, tables, counts)


def sample_noise(lut: NoiseLUT, clean: RawFrames, seed: int) -> RawFrames:
    """Add LUT noise; element (ch, x, y) depends only on (seed, ch, x, y)."""
    u = uniform_grid(seed, clean.data.shape)
    return clean.replace(clean.data + lut.draw(clean.data, u))


def synthetic_shot_noise_pairs(levels, repeats=100, gain=0.05, offset=None, seed=0):
    """Synthetic calibration pairs for tests and demos (not Kinect data).

    Each level is observed ``repeats`` times with Gaussian noise whose
    variance grows linearly with the photon count ``offset + level``; the
    expected value is the mean of the repeats, as in a capture-and-average
    calibration.
    """
    levels = np.asarray(levels, dtype=float).ravel()
    if offset is None:
        offset = float(np.abs(levels).max()) if levels.size else 0.0
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(gain * np.maximum(offset + levels, 0.0))
    noisy = levels[:, None] + sigma[:, None] * rng.standard_normal((levels.size, repeats))
    expected = np.repeat(noisy.mean(axis=1), repeats)
    return expected, noisy.ravel()
