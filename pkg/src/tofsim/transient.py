"""Analytic scene responses a(tau, x, y).

Two generators are provided: an impulse-per-pixel response for arbitrary
depth maps and a two-wall corner with one diffuse interreflection, which is
the smallest scene that produces the corner lobes typical of multipath.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import C, CameraConfig, ConfigError, DepthMap, RangeError

DEFAULT_BIN_WIDTH = 5e-11


@dataclass
class SceneResponse:
    """Discretised transient, shape (n_tau, n_x, n_y).

    Bin ``k`` holds the energy arriving at ``t0 + k * bin_width``.
    """

    data: np.ndarray
    bin_width: float = DEFAULT_BIN_WIDTH
    t0: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ConfigError("scene response must be a non-empty 3-D tensor")
        if not self.bin_width > 0:
            raise ConfigError("bin width must be positive")
        if np.any(self.data < 0):
            raise ConfigError("scene response entries must be nonnegative")

    @property
    def n_tau(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple:
        return self.data.shape[1:]

    @property
    def taus(self) -> np.ndarray:
        return self.t0 + self.bin_width * np.arange(self.n_tau)

    def __add__(self, other):
        _check_compatible(self, other)
        return SceneResponse(self.data + other.data, self.bin_width, self.t0)

    def scaled(self, s: float) -> "SceneResponse":
        return SceneResponse(self.data * s, self.bin_width, self.t0)


def _check_compatible(a: SceneResponse, b: SceneResponse):
    if a.data.shape != b.data.shape or a.bin_width != b.bin_width or a.t0 != b.t0:
        raise ConfigError("scene responses have different layouts")


def depth_to_bin(depth, bin_width=DEFAULT_BIN_WIDTH, t0=0.0, c=C):
    return np.rint((np.asarray(depth, dtype=float) / c - t0) / bin_width).astype(np.int64)


def quantized_depth(depth, bin_width=DEFAULT_BIN_WIDTH, c=C):
    """The range actually encoded by :func:`single_bounce_response`."""
    return c * bin_width * depth_to_bin(depth, bin_width, c=c)


def single_bounce_response(depth, albedo=1.0, n_tau=1000,
                           bin_width=DEFAULT_BIN_WIDTH, c=C) -> SceneResponse:
    """One impulse per pixel at bin ``round(d / c / bin_width)``, value ``albedo / d**2``."""
    if isinstance(depth, DepthMap):
        depth = depth.depth
    d = np.asarray(depth, dtype=float)
    if d.ndim != 2:
        raise ConfigError("depth map must be 2-D")
    albedo = np.broadcast_to(np.asarray(albedo, dtype=float), d.shape)
    if np.any(albedo < 0):
        raise ConfigError("albedo must be nonnegative")
    t_max = n_tau * bin_width
    if np.any(~np.isfinite(d)) or np.any(d <= 0) or np.any(d / c >= t_max):
        raise RangeError(f"depths must lie in (0, {c * t_max:.4g}) m")
    k = depth_to_bin(d, bin_width, c=c)
    if np.any(k >= n_tau):
        raise RangeError("depth rounds past the last time bin")
    data = np.zeros((n_tau,) + d.shape)
    ix, iy = np.indices(d.shape)
    data[k, ix, iy] = albedo / d**2
    return SceneResponse(data, bin_width)


# -- corner scene --------------------------------------------------------------

@dataclass(frozen=True)
class CornerScene:
    """Two Lambertian walls meeting along a vertical line in front of the camera.

    The corner line is parallel to the image's x axis (rows), centred in the
    view at ``distance`` meters. The walls open toward the camera with
    dihedral ``angle``. ``albedo`` is (left wall, right wall); ``patches`` is
    the number of gather patches per wall.
    """

    angle: float = math.pi / 2
    albedo: tuple = (0.5, 0.5)
    distance: float = 3.0
    patches: int = 1024

    def __post_init__(self):
        if not 0 < self.angle < math.pi:
            raise ConfigError("dihedral angle must lie in (0, pi)")
        alb = tuple(float(a) for a in np.broadcast_to(self.albedo, (2,)))
        object.__setattr__(self, "albedo", alb)
        if any(not 0 <= a <= 1 for a in alb):
            raise ConfigError("albedo must lie in [0, 1]")
        if int(self.patches) < 1:
            raise ConfigError("need at least one patch per wall")


@dataclass
class CornerGeometry:
    """Per-pixel direct-path quantities of a corner scene.

    ``points`` and ``normals`` are (n_x, n_y, 3) in camera coordinates
    (x: image rows / vertical, y: image columns / horizontal, z: optical axis).
    ``shading`` is albedo times the incidence cosine, the per-pixel gain that
    multiplies ``depth**-2`` in the direct response.
    """

    depth: np.ndarray
    wall: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    cos_in: np.ndarray
    shading: np.ndarray
    wall_length: float
    wall_height: float


def _wall_frames(scene: CornerScene):
    half = 0.5 * scene.angle
    corner = np.array([0.0, 0.0, scene.distance])
    # along-wall directions away from the corner, and normals facing the camera
    u = [np.array([0.0, -math.sin(half), -math.cos(half)]),
         np.array([0.0, math.sin(half), -math.cos(half)])]
    n = [np.array([0.0, math.cos(half), -math.sin(half)]),
         np.array([0.0, -math.cos(half), -math.sin(half)])]
    return corner, u, n


def pixel_rays(config: CameraConfig):
    """Unit-free pinhole ray directions (n_x, n_y, 3) with z component 1."""
    n_x, n_y = config.resolution
    f = 0.5 * n_y / math.tan(math.radians(config.fov_deg) / 2)
    vx = (np.arange(n_x) - (n_x - 1) / 2) / f
    vy = (np.arange(n_y) - (n_y - 1) / 2) / f
    rays = np.empty((n_x, n_y, 3))
    rays[..., 0] = vx[:, None]
    rays[..., 1] = vy[None, :]
    rays[..., 2] = 1.0
    return rays, f


def corner_geometry(scene: CornerScene, config: CameraConfig) -> CornerGeometry:
    if not scene.distance > 0:
        raise RangeError("degenerate geometry: camera lies on a wall")
    corner, u, n = _wall_frames(scene)
    rays, f = pixel_rays(config)
    n_x, n_y = config.resolution
    best_t = np.full((n_x, n_y), np.inf)
    wall = np.full((n_x, n_y), -1, dtype=np.int64)
    for w in (0, 1):
        denom = rays @ n[w]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (corner @ n[w]) / denom
        pts = rays * t[..., None]
        s = (pts - corner) @ u[w]
        hit = (denom < 0) & (t > 0) & (s >= -1e-12)
        closer = hit & (t < best_t)
        best_t[closer] = t[closer]
        wall[closer] = w
    if np.any(wall < 0):
        raise RangeError("degenerate geometry: some pixels see no wall")
    points = rays * best_t[..., None]
    normals = np.where((wall == 0)[..., None], n[0], n[1])
    depth = np.linalg.norm(points, axis=-1)
    cos_in = -np.einsum("xyk,xyk->xy", points, normals) / depth
    albedo = np.where(wall == 0, scene.albedo[0], scene.albedo[1])

    # walls are truncated to the region the frustum can see
    half_w = 0.5 * n_y / f
    half_h = 0.5 * n_x / f
    half = 0.5 * scene.angle
    wall_length = half_w * scene.distance / (math.sin(half) + half_w * math.cos(half))
    wall_height = half_h * scene.distance
    return CornerGeometry(depth, wall, points, normals, cos_in, albedo * cos_in,
                          wall_length, wall_height)


def _patch_grid(m: int, length: float, height: float):
    """Split ``m`` into (along, up) counts with cells closest to square."""
    best = None
    for a in range(1, m + 1):
        if m % a:
            continue
        b = m // a
        aspect = (length / a) / (2 * height / b)
        score = abs(math.log(aspect))
        if best is None or score < best[0]:
            best = (score, a, b)
    return best[1], best[2]


def wall_patches(scene: CornerScene, geom: CornerGeometry, wall: int):
    """Patch centres, corner vertices (ccw seen from the front) and areas."""
    corner, u, n = _wall_frames(scene)
    a, b = _patch_grid(int(scene.patches), geom.wall_length, geom.wall_height)
    ds = geom.wall_length / a
    dv = 2 * geom.wall_height / b
    s0 = (np.arange(a) * ds)[:, None]
    v0 = (-geom.wall_height + np.arange(b) * dv)[None, :]
    s0, v0 = np.broadcast_arrays(s0, v0)
    s0, v0 = s0.ravel(), v0.ravel()
    up = np.array([1.0, 0.0, 0.0])

    def at(s, v):
        return corner + s[:, None] * u[wall] + v[:, None] * up

    verts = np.stack([at(s0, v0), at(s0 + ds, v0), at(s0 + ds, v0 + dv), at(s0, v0 + dv)],
                     axis=1)
    centres = at(s0 + ds / 2, v0 + dv / 2)
    return centres, verts, np.full(centres.shape[0], ds * dv), n[wall]


def polygon_form_factor(points, normals, verts):
    """Differential-area to polygon form factor (Lambert's contour formula).

    points, normals: (P, 3); verts: (Q, V, 3). Returns (P, Q). The polygon
    is assumed fully visible and in front of each receiving point.
    """
    R = verts[None, :, :, :] - points[:, None, None, :]
    R /= np.linalg.norm(R, axis=-1, keepdims=True)
    R_next = np.roll(R, -1, axis=2)
    cross = np.cross(R, R_next)
    sin_g = np.linalg.norm(cross, axis=-1)
    cos_g = np.clip(np.einsum("pqvk,pqvk->pqv", R, R_next), -1.0, 1.0)
    gamma = np.arctan2(sin_g, cos_g)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(sin_g[..., None] > 0, cross / sin_g[..., None], 0.0)
    proj = np.einsum("pqvk,pk->pqv", unit, normals)
    return np.abs((gamma * proj).sum(axis=-1)) / (2 * math.pi)


def corner_two_bounce_response(scene: CornerScene, config: CameraConfig, n_tau=None,
                               bin_width=DEFAULT_BIN_WIDTH, threads=1, chunk=None,
                               return_parts=False):
    """Direct plus one-bounce diffuse interreflection for a two-wall corner.

    Pixel values are scaled so the direct term equals ``shading / depth**2``,
    matching :func:`single_bounce_response`. Each patch of the opposite wall
    contributes ``shading_p * albedo_q * cos_q / r_q**2 * F(p, q)`` at
    ``tau = (r_q + |q - p| + r_p) / (2 c)``, with ``F`` the exact
    point-to-patch form factor.

    ``threads`` only changes speed; per-pixel sums never cross chunks.
    """
    c = config.c
    geom = corner_geometry(scene, config)
    n_x, n_y = config.resolution
    n_pix = n_x * n_y
    P = geom.points.reshape(-1, 3)
    N = geom.normals.reshape(-1, 3)
    wall = geom.wall.ravel()
    r_p = geom.depth.ravel()
    shade = geom.shading.ravel()

    walls = []
    for w in (0, 1):
        centres, verts, area, normal = wall_patches(scene, geom, w)
        r_q = np.linalg.norm(centres, axis=1)
        cos_q = np.clip(-(centres @ normal) / r_q, 0.0, None)
        irradiance = scene.albedo[w] * cos_q / r_q**2
        walls.append((centres, verts, r_q, irradiance))

    # longest path <= r_q + |q - p| + r_p, and |q - p| <= 2 * scene radius
    direct_bin = np.rint((r_p / c) / bin_width).astype(np.int64)
    if n_tau is None:
        radius = max(r_p.max(), max(np.linalg.norm(wl[1], axis=-1).max() for wl in walls))
        longest = 4.0 * radius
        n_tau = int(math.ceil(longest / (2 * c) / bin_width)) + 2
    if np.any(direct_bin >= n_tau):
        raise RangeError("direct path falls past the last time bin")

    direct = np.zeros(n_tau * n_pix)
    direct[direct_bin * n_pix + np.arange(n_pix)] = shade / r_p**2

    def gather(lo):
        hi = min(lo + chunk, n_pix)
        idx = np.arange(lo, hi)
        out = np.zeros((hi - lo, n_tau))
        for w in (0, 1):
            sel = idx[wall[idx] != w]
            if sel.size == 0:
                continue
            centres, verts, r_q, irr = walls[w]
            F = polygon_form_factor(P[sel], N[sel], verts)
            dist = np.linalg.norm(centres[None, :, :] - P[sel, None, :], axis=-1)
            tau = (r_q[None, :] + dist + r_p[sel, None]) / (2 * c)
            k = np.rint(tau / bin_width).astype(np.int64)
            if np.any(k >= n_tau):
                raise RangeError("indirect path falls past the last time bin; raise n_tau")
            val = shade[sel, None] * irr[None, :] * F
            rows = np.repeat(sel - lo, k.shape[1])
            flat = rows * n_tau + k.ravel()
            out += np.bincount(flat, weights=val.ravel(),
                               minlength=out.size).reshape(out.shape)
        return lo, out

    if chunk is None:
        chunk = max(8, 2**18 // int(scene.patches))
    starts = range(0, n_pix, chunk)
    indirect = np.zeros((n_pix, n_tau))
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(gather, starts))
    else:
        results = [gather(lo) for lo in starts]
    for lo, out in results:
        indirect[lo:lo + out.shape[0]] = out

    direct = direct.reshape(n_tau, n_x, n_y)
    indirect = indirect.T.reshape(n_tau, n_x, n_y)
    sr = SceneResponse(direct + indirect, bin_width)
    if return_parts:
        return sr, SceneResponse(direct, bin_width), SceneResponse(indirect, bin_width), geom
    return sr
