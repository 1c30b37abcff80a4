"""Depth recovery from raw correlation frames."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import TWO_PI, CameraConfig, ConfigError, DepthMap, ToFError
from .simulate import RawFrames
from .transient import DEFAULT_BIN_WIDTH

_EPS = np.finfo(float).eps


class IncommensurateError(ToFError, ValueError):
    """Frequencies have no small rational ratio, so no closed-form unwrap exists."""


# -- single frequency --------------------------------------------------------------

def phase_estimator(channels) -> np.ndarray:
    """(2, K) matrix mapping K raw values to (alpha, beta).

    Least-squares fit of ``i_k = alpha * b_k cos(psi_k) + beta * b_k sin(psi_k)``.
    For equally spaced phases and equal ``b`` this reduces to
    ``(2 / (K b)) * (cos(psi) . i, sin(psi) . i)``.
    """
    psi = np.array([cf.phase for cf in channels])
    b = np.array([cf.amplitude for cf in channels])
    basis = np.stack([b * np.cos(psi), b * np.sin(psi)], axis=1)
    if np.linalg.matrix_rank(basis) < 2:
        raise ConfigError("phases do not span a full circle")
    return np.linalg.solve(basis.T @ basis, basis.T)


def _alpha_beta(frames_l: np.ndarray, channels):
    W = phase_estimator(channels)
    ab = np.tensordot(W, frames_l, axes=(1, 0))
    return ab[0], ab[1], W


def phase_and_amplitude(frames_l, channels):
    """Wrapped phase in [0, 2 pi), amplitude and validity for one frequency.

    frames_l : (K, ...) raw values of one frequency.
    """
    frames_l = np.asarray(frames_l, dtype=float)
    alpha, beta, _ = _alpha_beta(frames_l, channels)
    scale = np.sqrt((frames_l**2).sum(axis=0))
    valid = np.hypot(alpha, beta) > _EPS * scale
    valid &= scale > 0
    phase = np.mod(np.arctan2(beta, alpha), TWO_PI)
    phase = np.where(phase >= TWO_PI, 0.0, phase)
    return phase, np.hypot(alpha, beta), valid


def phase_depth_single(frames: RawFrames, c=None):
    """Depth c / (2 omega) * atan2 in [0, pi c / omega) for single-frequency frames.

    Returns (DepthMap, valid).
    """
    omegas = {cf.omega for cf in frames.channels}
    if len(omegas) != 1:
        raise ConfigError("phase_depth_single needs frames of exactly one frequency")
    if frames.n_channels < 2:
        raise ConfigError("need at least two phases")
    c = c or 299_792_458.0
    omega = omegas.pop()
    phase, amp, valid = phase_and_amplitude(frames.data, frames.channels)
    depth = c / (2 * omega) * phase
    return DepthMap(np.where(valid, depth, np.nan), amp), valid


# -- multi-frequency unwrapping ----------------------------------------------------

def _lll(basis, delta=Fraction(3, 4)):
    """LLL reduction of integer row vectors (exact arithmetic, small dimensions)."""
    b = [list(map(int, row)) for row in basis]
    n = len(b)

    def dot(u, v):
        return sum(x * y for x, y in zip(u, v))

    def gram_schmidt():
        bs, mu = [], [[Fraction(0)] * n for _ in range(n)]
        for i in range(n):
            v = [Fraction(x) for x in b[i]]
            for j in range(i):
                mu[i][j] = Fraction(dot(b[i], bs[j])) / dot(bs[j], bs[j])
                v = [x - mu[i][j] * y for x, y in zip(v, bs[j])]
            bs.append(v)
        return bs, mu

    bs, mu = gram_schmidt()
    k = 1
    while k < n:
        for j in range(k - 1, -1, -1):
            q = round(mu[k][j])
            if q:
                b[k] = [x - q * y for x, y in zip(b[k], b[j])]
                bs, mu = gram_schmidt()
        if dot(bs[k], bs[k]) >= (delta - mu[k][k - 1] ** 2) * dot(bs[k - 1], bs[k - 1]):
            k += 1
        else:
            b[k], b[k - 1] = b[k - 1], b[k]
            bs, mu = gram_schmidt()
            k = max(k - 1, 1)
    return b


def integer_ratios(omegas, max_denominator=1000, rtol=1e-9):
    """Smallest integers p_l with omega_l = p_l * omega_g; returns (p, omega_g)."""
    omegas = [float(w) for w in omegas]
    fracs = []
    for w in omegas:
        r = w / omegas[0]
        f = Fraction(r).limit_denominator(max_denominator)
        if abs(float(f) - r) > rtol * r:
            raise IncommensurateError(f"frequency ratio {r!r} is not a small rational")
        fracs.append(f)
    q = math.lcm(*(f.denominator for f in fracs))
    ints = [int(f * q) for f in fracs]
    g = math.gcd(*ints)
    p = [i // g for i in ints]
    return np.array(p, dtype=np.int64), omegas[0] * g / q


@dataclass(frozen=True)
class UnwrapConstants:
    """Everything the closed-form unwrap needs for one frequency set.

    ``ratios`` are the coprime integers p_l with omega_l = p_l * omega_g and
    ``max_range`` = pi c / omega_g the common unambiguous range. ``C`` (L-1, L)
    spans the integer vectors orthogonal to ``ratios``; ``S`` (L, L-1)
    satisfies ``C @ S = I``. Depth is ``sum_l A_l phi_l + B`` where ``B``
    collects the wrap terms and the constant ``offset``.
    """

    omegas: tuple
    ratios: tuple
    max_range: float
    C: tuple
    S: tuple
    weights: tuple
    A: tuple
    offset: float = 0.0
    c: float = 299_792_458.0

    @classmethod
    def from_omegas(cls, omegas, weighting="equal", offset=0.0, c=299_792_458.0,
                    max_denominator=1000):
        """``weighting`` is ``"equal"`` (plain mean of per-frequency unwrapped
        depths, as libfreenect2 does) or ``"variance"`` (weights p_l**2)."""
        p, omega_g = integer_ratios(omegas, max_denominator)
        L = len(p)
        D = math.pi * c / omega_g
        if L == 1:
            C = np.zeros((0, 1), dtype=np.int64)
            S = np.zeros((1, 0), dtype=np.int64)
        else:
            U = np.eye(L, dtype=object)
            v = [int(x) for x in p]
            while sum(1 for x in v if x) > 1:
                i = min((j for j in range(L) if v[j]), key=lambda j: abs(v[j]))
                for j in range(L):
                    if j != i and v[j]:
                        q = v[j] // v[i]
                        v[j] -= q * v[i]
                        U[j] = U[j] - q * U[i]
            pivot = next(j for j in range(L) if v[j])
            w = U[pivot] * v[pivot]
            rows = [U[j] for j in range(L) if j != pivot]
            C = np.array(_lll(rows), dtype=np.int64)
            full = np.vstack([C, np.array(w, dtype=np.int64)])
            inv = np.linalg.inv(full.astype(float))
            Uinv = np.rint(inv).astype(np.int64)
            if not np.array_equal(full @ Uinv, np.eye(L, dtype=np.int64)):
                raise IncommensurateError("failed to build an integer unwrap basis")
            S = Uinv[:, : L - 1]
        if weighting == "equal":
            wts = np.ones(L)
        elif weighting == "variance":
            wts = p.astype(float) ** 2
        else:
            raise ConfigError(f"unknown weighting {weighting!r}")
        wts = wts / wts.sum()
        A = D * wts / (TWO_PI * p)
        return cls(tuple(float(w) for w in omegas), tuple(int(x) for x in p), D,
                   tuple(map(tuple, C.tolist())), tuple(map(tuple, S.tolist())),
                   tuple(wts.tolist()), tuple(A.tolist()), float(offset), c)

    @property
    def p(self):
        return np.array(self.ratios, dtype=np.int64)

    @property
    def n_freqs(self) -> int:
        return len(self.ratios)


def _finish(r, n, consts: UnwrapConstants):
    """Canonical wraps and depth given fractional phases r and wrap counts n."""
    p = consts.p.reshape((-1,) + (1,) * (r.ndim - 1))
    w = np.asarray(consts.weights).reshape(p.shape)
    u_l = (r + n) / p
    u = (w * u_l).sum(axis=0)
    m = np.floor(u)
    n = n - m.astype(np.int64)[None] * p
    u = u - m
    u = np.where(u >= 1.0, 0.0, u)
    depth = np.mod(consts.max_range * u + consts.offset, consts.max_range)
    per_freq = consts.max_range * (r + n) / p
    return depth, n, per_freq


def unwrap_crt(phases, consts: UnwrapConstants):
    """Closed-form multi-frequency unwrap.

    phases : (L, ...) wrapped phases in [0, 2 pi).
    Returns (depth, wraps, per_frequency_depths); depth lies in
    [0, consts.max_range).
    """
    phi = np.asarray(phases, dtype=float)
    if phi.shape[0] != consts.n_freqs:
        raise ConfigError("phase count does not match the unwrap constants")
    r = phi / TWO_PI
    shape = r.shape[1:]
    flat = r.reshape(consts.n_freqs, -1)
    if consts.n_freqs == 1:
        n = np.zeros_like(flat, dtype=np.int64)
    else:
        C = np.array(consts.C, dtype=float)
        S = np.array(consts.S, dtype=np.int64)
        k = np.rint(C @ flat).astype(np.int64)
        n = -(S @ k)
    depth, n, per = _finish(flat, n, consts)
    return depth.reshape(shape), n.reshape(r.shape), per.reshape(r.shape)


def unwrap_oracle(phases, consts: UnwrapConstants, chunk=None):
    """Exhaustive wrap-count search minimising the phase disagreement.

    Minimises ``min_u sum_l (p_l u - r_l - n_l)**2`` over every n with
    n_l in [-1, p_l], then reports depth with the same weights as
    :func:`unwrap_crt`. Cost grows like prod(p_l + 2).
    """
    phi = np.asarray(phases, dtype=float)
    r_all = (phi / TWO_PI).reshape(consts.n_freqs, -1)
    p = consts.p.astype(float)
    cands = np.array(list(itertools.product(*[range(-1, int(q) + 1) for q in consts.ratios])),
                     dtype=np.int64)
    pn = p / np.sqrt((p**2).sum())
    if chunk is None:
        chunk = max(256, 4_000_000 // (cands.size))
    depth_out, n_out, per_out = [], [], []
    for lo in range(0, r_all.shape[1], chunk):
        r = r_all[:, lo:lo + chunk]
        y = r[None, :, :] + cands[:, :, None]
        # residual of projecting y onto the direction p
        proj = np.einsum("l,clN->cN", pn, y)
        cost = (y**2).sum(axis=1) - proj**2
        best = np.argmin(cost, axis=0)
        n = cands[best].T
        d, n, per = _finish(r, n, consts)
        depth_out.append(d)
        n_out.append(n)
        per_out.append(per)
    shape = phi.shape[1:]
    return (np.concatenate(depth_out).reshape(shape),
            np.concatenate(n_out, axis=1).reshape(phi.shape),
            np.concatenate(per_out, axis=1).reshape(phi.shape))


def frequency_phases(frames: RawFrames, config: CameraConfig):
    """Per-frequency (phases, amplitudes, valid), each shaped (L, n_x, n_y)."""
    phases, amps, valids = [], [], []
    for l in range(config.n_freqs):
        sl = config.frequency_slice(l)
        ph, amp, ok = phase_and_amplitude(frames.data[sl], config.channels[sl])
        phases.append(ph)
        amps.append(amp)
        valids.append(ok)
    return np.stack(phases), np.stack(amps), np.stack(valids)


def grad_depth_wrt_raw(frames: RawFrames, config: CameraConfig,
                       consts: UnwrapConstants | None = None):
    """Analytic Jacobian of the unwrapped depth with respect to every raw channel.

    Wrap counts are treated as locally constant. Returns (J, valid) with J
    shaped (n_ch, n_x, n_y); entries at invalid pixels are NaN.
    """
    consts = consts or UnwrapConstants.from_omegas(config.omegas, c=config.c)
    J = np.empty_like(frames.data)
    valid = np.ones(frames.spatial_shape, dtype=bool)
    for l in range(config.n_freqs):
        sl = config.frequency_slice(l)
        alpha, beta, W = _alpha_beta(frames.data[sl], config.channels[sl])
        norm2 = alpha**2 + beta**2
        _, _, ok = phase_and_amplitude(frames.data[sl], config.channels[sl])
        valid &= ok
        with np.errstate(divide="ignore", invalid="ignore"):
            dphi = (alpha[None] * W[1][:, None, None] - beta[None] * W[0][:, None, None]) / norm2
        J[sl] = consts.A[l] * dphi
    J[:, ~valid] = np.nan
    return J, valid


# -- masking and filtering -------------------------------------------------------

@dataclass(frozen=True)
class MaskParams:
    """Reliability thresholds. ``amplitude_fraction`` is relative to the
    median per-pixel amplitude; ``consistency`` is in meters."""

    amplitude_fraction: float = 0.01
    consistency: float = 0.1
    amplitude_threshold: float | None = None


def mask_unreliable(amplitudes, per_freq_depths, max_range, params: MaskParams = MaskParams(),
                    valid=None):
    """Valid where the weakest frequency is bright enough and the per-frequency
    unwrapped depths agree (circularly, modulo ``max_range``)."""
    amps = np.asarray(amplitudes, dtype=float)
    per = np.asarray(per_freq_depths, dtype=float)
    weakest = amps.min(axis=0)
    thr = params.amplitude_threshold
    if thr is None:
        thr = params.amplitude_fraction * float(np.median(weakest))
    mask = (weakest >= thr) & (weakest > 0)
    if per.shape[0] > 1:
        worst = np.zeros(per.shape[1:])
        for a, b in itertools.combinations(range(per.shape[0]), 2):
            diff = np.mod(per[a] - per[b] + max_range / 2, max_range) - max_range / 2
            worst = np.maximum(worst, np.abs(diff))
        mask &= worst <= params.consistency
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    return mask


def bilateral_filter(depth, guide=None, sigma_spatial=1.0, sigma_range=0.05, valid=None):
    """Edge-preserving smoothing over a ceil(3 sigma_spatial) window.

    Neighbour weights are exp(-dist**2 / 2 sigma_s**2) * exp(-dd**2 / 2 sigma_r**2),
    multiplied by ``guide`` (e.g. amplitude) at the neighbour when given.
    Invalid pixels and pixels outside the image get no weight; invalid
    pixels keep their input value. ``sigma_range=np.inf`` gives a
    normalised Gaussian blur.
    """
    if not (sigma_spatial > 0 and sigma_range > 0):
        raise ConfigError("bilateral sigmas must be positive")
    d = np.asarray(depth, dtype=float)
    ok = np.isfinite(d) if valid is None else (np.asarray(valid, bool) & np.isfinite(d))
    g = np.ones_like(d) if guide is None else np.asarray(guide, dtype=float)
    r = int(math.ceil(3 * sigma_spatial))
    n_x, n_y = d.shape
    dz = np.where(ok, d, 0.0)
    src_w = np.where(ok, g, 0.0)
    pad_d = np.pad(dz, r)
    pad_w = np.pad(src_w, r)
    num = np.zeros_like(d)
    den = np.zeros_like(d)
    for i in range(-r, r + 1):
        for j in range(-r, r + 1):
            ws = math.exp(-(i * i + j * j) / (2 * sigma_spatial**2))
            nd = pad_d[r + i:r + i + n_x, r + j:r + j + n_y]
            nw = pad_w[r + i:r + i + n_x, r + j:r + j + n_y]
            if math.isinf(sigma_range):
                wr = 1.0
            else:
                wr = np.exp(-((nd - dz) ** 2) / (2 * sigma_range**2))
            w = ws * wr * nw
            num += w * nd
            den += w
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    return np.where(ok & (den > 0), out, d)


# -- phasor ----------------------------------------------------------------------

def phasor_reconstruct(frames: RawFrames, config: CameraConfig, working_min=1.5, refine=False):
    """Two-high-frequency reconstruction from the phase difference.

    Depth is ``c * wrap(phi_hi - phi_lo) / (2 (omega_hi - omega_lo))`` moved
    into ``[working_min, working_min + width)`` with width
    ``pi c / |omega_hi - omega_lo|``. ``refine`` then re-unwraps the highest
    frequency against that coarse estimate.

    Returns (DepthMap, valid, width).
    """
    if config.n_freqs != 2:
        raise ConfigError("phasor reconstruction needs exactly two frequencies")
    w1, w2 = config.omegas
    if w1 == w2:
        raise ConfigError("phasor frequencies must differ")
    phases, amps, ok = frequency_phases(frames, config)
    hi, lo = (0, 1) if w1 > w2 else (1, 0)
    dw = abs(w1 - w2)
    width = math.pi * config.c / dw
    dphi = np.mod(phases[hi] - phases[lo], TWO_PI)
    coarse = config.c * dphi / (2 * dw)
    depth = working_min + np.mod(coarse - working_min, width)
    if refine:
        wh = config.omegas[hi]
        n = np.rint((depth * 2 * wh / config.c - phases[hi]) / TWO_PI)
        depth = config.c * (phases[hi] + TWO_PI * n) / (2 * wh)
    valid = ok.all(axis=0)
    return DepthMap(np.where(valid, depth, np.nan), amps.min(axis=0)), valid, width


# -- one-bounce manifold projection -------------------------------------------------

@dataclass
class Projection:
    amplitude: np.ndarray
    tau: np.ndarray
    projected: np.ndarray
    residual: np.ndarray
    converged: np.ndarray


def project_one_bounce(vectors, config: CameraConfig, consts: UnwrapConstants | None = None,
                       grid_step=DEFAULT_BIN_WIDTH, max_iter=200, xtol=1e-10, chunk=4096):
    """Closest single-bounce measurement a * f(tau) to each channel vector.

    vectors : (N, n_ch) array.
    tau is searched on a grid of ``grid_step`` over the unambiguous range with
    the optimal amplitude per candidate, then refined by damped Gauss-Newton.
    """
    X = np.atleast_2d(np.asarray(vectors, dtype=float))
    if X.shape[1] != config.n_channels:
        raise ConfigError("vector length does not match channel count")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ConfigError("cannot project a zero vector")
    consts = consts or UnwrapConstants.from_omegas(config.omegas, c=config.c)
    t_max = consts.max_range / config.c
    grid = np.arange(0.0, t_max, grid_step)
    F = config.channel_matrix(grid)
    fn2 = (F**2).sum(axis=0)

    N = X.shape[0]
    a = np.empty(N)
    t = np.empty(N)
    for lo in range(0, N, chunk):
        G = X[lo:lo + chunk] @ F
        score = G**2 / fn2
        best = np.argmax(score, axis=1)
        t[lo:lo + chunk] = grid[best]
        a[lo:lo + chunk] = G[np.arange(G.shape[0]), best] / fn2[best]

    scale = grid_step

    def cost_of(a_, t_):
        R = X - a_[:, None] * config.channel_matrix(t_).T
        return (R**2).sum(axis=1)

    cost = cost_of(a, t)
    lam = np.full(N, 1e-3)
    active = np.ones(N, dtype=bool)
    converged = np.zeros(N, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        f = config.channel_matrix(t[idx]).T
        df = config.channel_derivatives(t[idx]).T * scale
        R = X[idx] - a[idx, None] * f
        J0, J1 = -f, -a[idx, None] * df
        h00 = (J0 * J0).sum(1)
        h01 = (J0 * J1).sum(1)
        h11 = (J1 * J1).sum(1)
        g0 = (J0 * R).sum(1)
        g1 = (J1 * R).sum(1)
        l = lam[idx]
        m00 = h00 * (1 + l) + 1e-300
        m11 = h11 * (1 + l) + 1e-300
        det = m00 * m11 - h01**2
        s0 = -(m11 * g0 - h01 * g1) / det
        s1 = -(m00 * g1 - h01 * g0) / det
        a_new = a[idx] + s0
        t_new = t[idx] + s1 * scale
        c_new = cost_of(a_new, t_new) if idx.size == N else \
            ((X[idx] - a_new[:, None] * config.channel_matrix(t_new).T) ** 2).sum(1)
        better = c_new <= cost[idx]
        up = idx[better]
        a[up], t[up], cost[up] = a_new[better], t_new[better], c_new[better]
        lam[up] = np.maximum(lam[up] / 10, 1e-12)
        lam[idx[~better]] *= 10
        step = np.hypot(s0 / np.maximum(np.abs(a[idx]), 1e-300), s1 * scale / max(t_max, 1e-300))
        done = (better & (step < xtol)) | (cost[idx] == 0) | (lam[idx] > 1e16)
        converged[idx[done]] = True
        active[idx[done]] = False
    t = np.mod(t, t_max)
    proj = a[:, None] * config.channel_matrix(t).T
    resid = np.linalg.norm(X - proj, axis=1)
    return Projection(a, t, proj, resid, converged)


def project_frames(frames: RawFrames, config: CameraConfig, valid=None, **kw):
    """Apply :func:`project_one_bounce` to every nonzero pixel of a frame stack."""
    X = frames.data.reshape(frames.n_channels, -1).T
    nz = np.linalg.norm(X, axis=1) > 0
    if valid is not None:
        nz &= np.asarray(valid, bool).ravel()
    out = X.copy()
    depth = np.full(X.shape[0], np.nan)
    if nz.any():
        pr = project_one_bounce(X[nz], config, **kw)
        out[nz] = pr.projected
        depth[nz] = config.c * pr.tau
    return (RawFrames(out.T.reshape(frames.data.shape), frames.channels),
            depth.reshape(frames.spatial_shape))


# -- pipelines ---------------------------------------------------------------------

@dataclass
class Reconstruction:
    depth: DepthMap
    mask: np.ndarray
    per_frequency: np.ndarray | None = None


def lf2_reconstruct(frames: RawFrames, config: CameraConfig, bilateral=True,
                    consts: UnwrapConstants | None = None, mask_params=MaskParams(),
                    sigma_spatial=1.0, sigma_range=0.05, weighting="equal"):
    """Per-frequency phases, closed-form unwrap, reliability mask, optional bilateral."""
    consts = consts or UnwrapConstants.from_omegas(config.omegas, weighting=weighting,
                                                   c=config.c)
    phases, amps, ok = frequency_phases(frames, config)
    depth, _, per = unwrap_crt(phases, consts)
    valid = ok.all(axis=0)
    mask = mask_unreliable(amps, per, consts.max_range, mask_params, valid)
    amp = amps.min(axis=0)
    if bilateral:
        depth = bilateral_filter(depth, amp, sigma_spatial, sigma_range, mask)
    depth = np.where(mask, depth, np.nan)
    return Reconstruction(DepthMap(depth, amp), mask, per)


def phasor_pipeline(frames, config, working_range=(1.5, 5.0), bilateral=True,
                    sigma_spatial=1.0, sigma_range=0.05, refine=False):
    """Phasor depth, bilateral post-filter, and exclusion of out-of-window depths."""
    dm, valid, _ = phasor_reconstruct(frames, config, working_range[0], refine)
    depth = dm.depth
    if bilateral:
        depth = bilateral_filter(depth, dm.amplitude, sigma_spatial, sigma_range, valid)
    mask = valid & (depth >= working_range[0]) & (depth <= working_range[1])
    return Reconstruction(DepthMap(np.where(mask, depth, np.nan), dm.amplitude), mask)


def onebounce_pipeline(frames, config, **kw):
    projected, _ = project_frames(frames, config)
    return lf2_reconstruct(projected, config, bilateral=False, **kw)


PIPELINES = {
    "lf2": lambda fr, cfg, **kw: lf2_reconstruct(fr, cfg, bilateral=True, **kw),
    "lf2star": lambda fr, cfg, **kw: lf2_reconstruct(fr, cfg, bilateral=False, **kw),
    "phasor": phasor_pipeline,
    "onebounce+lf2star": onebounce_pipeline,
}


def run_pipeline(name: str, frames: RawFrames, config: CameraConfig, **kw) -> Reconstruction:
    try:
        fn = PIPELINES[name]
    except KeyError:
        raise ConfigError(f"unknown pipeline {name!r}; valid: {', '.join(PIPELINES)}") from None
    return fn(frames, config, **kw)
