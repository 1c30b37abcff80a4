"""Camera model primitives shared by every other module.

Time convention: the delay argument ``tau`` of camera functions and scene
responses is half the total optical path time, so a one-bounce surface at
range ``d`` sits at ``tau = d / c`` and a path of total length ``L`` sits at
``tau = L / (2 c)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

C = 299_792_458.0
TWO_PI = 2.0 * math.pi

SINUSOID = "sinusoid"
CLIPPED = "clipped-sinusoid"


class ToFError(Exception):
    """Base class for errors raised by tofsim."""


class ConfigError(ToFError, ValueError):
    pass


class RangeError(ToFError, ValueError):
    """A quantity falls outside the representable time or space range."""


class UnderdeterminedError(ToFError, ValueError):
    pass


@dataclass(frozen=True)
class CameraFunction:
    """Correlation response of one raw channel.

    ``amplitude`` is ``b`` for the sinusoid kind and the inner amplitude
    ``b1`` for the clipped kind, whose output is clamped to ``[-clip, clip]``.
    """

    kind: str
    amplitude: float
    phase: float
    omega: float
    clip: float | None = None

    def __post_init__(self):
        if self.kind not in (SINUSOID, CLIPPED):
            raise ConfigError(f"unknown camera function kind {self.kind!r}")
        if not self.amplitude > 0:
            raise ConfigError("camera function amplitude must be > 0")
        if not self.omega > 0:
            raise ConfigError("modulation frequency must be > 0")
        if not 0.0 <= self.phase < TWO_PI:
            raise ConfigError("phase must lie in [0, 2*pi)")
        if self.kind == CLIPPED:
            if self.clip is None or not self.clip > 0:
                raise ConfigError("clipped camera function needs clip > 0")
        elif self.clip is not None:
            raise ConfigError("clip level only applies to the clipped kind")

    @classmethod
    def make(cls, kind, amplitude, phase, omega, clip=None):
        """Build with ``phase`` wrapped into [0, 2*pi)."""
        return cls(kind, float(amplitude), float(phase) % TWO_PI, float(omega),
                   None if clip is None else float(clip))

    @property
    def bound(self) -> float:
        return self.clip if self.kind == CLIPPED else self.amplitude

    def __call__(self, tau):
        return eval_camera_function(self, tau)

    def derivative(self, tau):
        """d f / d tau, zero on the clamped plateaus."""
        arg = self.phase - 2.0 * self.omega * np.asarray(tau, dtype=float)
        slope = 2.0 * self.omega * self.amplitude * np.sin(arg)
        if self.kind == CLIPPED:
            inner = self.amplitude * np.cos(arg)
            slope = np.where(np.abs(inner) < self.clip, slope, 0.0)
        return slope

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "amplitude": self.amplitude,
             "phase": self.phase, "omega": self.omega}
        if self.clip is not None:
            d["clip"] = self.clip
        return d

    @classmethod
    def from_dict(cls, d) -> "CameraFunction":
        return cls.make(d.get("kind", SINUSOID), d["amplitude"], d["phase"],
                        d["omega"], d.get("clip"))


def eval_camera_function(cf: CameraFunction, tau):
    """Evaluate ``b cos(psi - 2 omega tau)``, clamped for the clipped kind."""
    arg = cf.phase - 2.0 * cf.omega * np.asarray(tau, dtype=float)
    value = cf.amplitude * np.cos(arg)
    if cf.kind == CLIPPED:
        value = np.clip(value, -cf.clip, cf.clip)
    return value


@dataclass(frozen=True)
class CameraConfig:
    """Multi-frequency, multi-phase acquisition layout.

    Channels are ordered frequency-major: all phases of ``omegas[0]``, then
    all phases of ``omegas[1]``, and so on.
    """

    channels: tuple
    omegas: tuple
    phases: tuple
    resolution: tuple = (424, 512)
    fov_deg: float = 70.0
    exposure: float = 1e-3
    c: float = C

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "omegas", tuple(float(w) for w in self.omegas))
        object.__setattr__(self, "phases", tuple(float(p) for p in self.phases))
        object.__setattr__(self, "resolution", tuple(int(n) for n in self.resolution))
        K, L = len(self.phases), len(self.omegas)
        if L < 1:
            raise ConfigError("need at least one modulation frequency")
        if K < 2:
            raise ConfigError("need at least two phases per frequency")
        if len(self.channels) != K * L:
            raise ConfigError(f"expected {K * L} channels, got {len(self.channels)}")
        for n, cf in enumerate(self.channels):
            if cf.omega != self.omegas[n // K]:
                raise ConfigError(f"channel {n} frequency does not match layout")
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ConfigError("resolution must be two positive integers")
        if not 0 < self.fov_deg < 180:
            raise ConfigError("field of view must lie in (0, 180) degrees")

    @classmethod
    def from_frequencies(cls, freqs_hz: Sequence[float], phases=None, amplitude=1.0,
                         resolution=(424, 512), fov_deg=70.0, exposure=1e-3,
                         kinds=None, clips=None) -> "CameraConfig":
        """Uniform-phase sinusoidal layout from frequencies in Hz.

        ``kinds`` and ``clips`` optionally give one entry per frequency.
        """
        omegas = [TWO_PI * f for f in freqs_hz]
        if phases is None:
            phases = 3
        if np.isscalar(phases):
            phases = [TWO_PI * k / int(phases) for k in range(int(phases))]
        channels = []
        for l, w in enumerate(omegas):
            kind = SINUSOID if kinds is None else kinds[l]
            clip = None if clips is None else clips[l]
            for psi in phases:
                channels.append(CameraFunction.make(kind, amplitude, psi, w, clip))
        return cls(tuple(channels), tuple(omegas), tuple(phases), tuple(resolution),
                   fov_deg, exposure)

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    @property
    def n_freqs(self) -> int:
        return len(self.omegas)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def frequency_slice(self, l: int) -> slice:
        K = self.n_phases
        return slice(l * K, (l + 1) * K)

    def channel_matrix(self, taus) -> np.ndarray:
        """Camera function values, shape (n_channels, len(taus))."""
        taus = np.asarray(taus, dtype=float)
        return np.stack([eval_camera_function(cf, taus) for cf in self.channels])

    def channel_derivatives(self, taus) -> np.ndarray:
        taus = np.asarray(taus, dtype=float)
        return np.stack([cf.derivative(taus) for cf in self.channels])

    def subset(self, freq_indices) -> "CameraConfig":
        freq_indices = list(freq_indices)
        chans = []
        for l in freq_indices:
            chans.extend(self.channels[self.frequency_slice(l)])
        return CameraConfig(tuple(chans), tuple(self.omegas[l] for l in freq_indices),
                            self.phases, self.resolution, self.fov_deg, self.exposure, self.c)

    def with_resolution(self, resolution) -> "CameraConfig":
        return CameraConfig(self.channels, self.omegas, self.phases, tuple(resolution),
                            self.fov_deg, self.exposure, self.c)

    def to_dict(self) -> dict:
        return {
            "channels": [cf.to_dict() for cf in self.channels],
            "omegas": list(self.omegas),
            "phases": list(self.phases),
            "resolution": list(self.resolution),
            "fov_deg": self.fov_deg,
            "exposure": self.exposure,
        }

    @classmethod
    def from_dict(cls, d) -> "CameraConfig":
        """Accept either an explicit channel list or a ``frequencies_hz`` shorthand."""
        try:
            if "channels" in d:
                chans = tuple(CameraFunction.from_dict(c) for c in d["channels"])
                return cls(chans, d["omegas"], d["phases"],
                           tuple(d.get("resolution", (424, 512))),
                           d.get("fov_deg", 70.0), d.get("exposure", 1e-3))
            return cls.from_frequencies(
                d["frequencies_hz"], d.get("phases", 3), d.get("amplitude", 1.0),
                tuple(d.get("resolution", (424, 512))), d.get("fov_deg", 70.0),
                d.get("exposure", 1e-3), d.get("kinds"), d.get("clips"))
        except KeyError as exc:
            raise ConfigError(f"camera config missing field {exc}") from None


@dataclass
class DepthMap:
    """Per-pixel range in meters plus optional amplitude."""

    depth: np.ndarray
    amplitude: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        if self.amplitude is not None:
            self.amplitude = np.asarray(self.amplitude, dtype=float)
            if self.amplitude.shape != self.depth.shape:
                raise ConfigError("amplitude and depth shapes differ")

    @property
    def shape(self):
        return self.depth.shape


# -- calibration fit ---------------------------------------------------------

@dataclass
class FitResult:
    camera_function: CameraFunction
    residual: float
    converged: bool
    iterations: int = 0
    starts: list = field(default_factory=list)


def _model(params, kind, omega, taus):
    if kind == SINUSOID:
        b, psi = params
        return b * np.cos(psi - 2.0 * omega * taus)
    b1, b2, psi = params
    return np.clip(b1 * np.cos(psi - 2.0 * omega * taus), -b2, b2)


def _jacobian(params, kind, omega, taus):
    if kind == SINUSOID:
        b, psi = params
        arg = psi - 2.0 * omega * taus
        return np.stack([np.cos(arg), -b * np.sin(arg)], axis=1)
    b1, b2, psi = params
    arg = psi - 2.0 * omega * taus
    inner = b1 * np.cos(arg)
    free = np.abs(inner) < b2
    J = np.zeros((taus.size, 3))
    J[:, 0] = np.where(free, np.cos(arg), 0.0)
    J[:, 1] = np.where(free, 0.0, np.sign(inner))
    J[:, 2] = np.where(free, -b1 * np.sin(arg), 0.0)
    return J


def levenberg_marquardt(residual_fn, jac_fn, x0, max_iter=200, xtol=1e-10, lam0=1e-3):
    """Damped Gauss-Newton minimisation of ``sum(residual_fn(x)**2)``.

    Returns ``(x, cost, converged, iterations)``.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = residual_fn(x)
    cost = float(r @ r)
    lam = lam0
    for it in range(1, max_iter + 1):
        J = jac_fn(x)
        g = J.T @ r
        H = J.T @ J
        diag = np.diag(H).copy()
        diag[diag == 0] = 1.0
        improved = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            r_new = residual_fn(x_new)
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            return x, cost, True, it
        rel = np.linalg.norm(step) / max(np.linalg.norm(x_new), 1e-300)
        x, r, cost = x_new, r_new, cost_new
        lam = max(lam / 10.0, 1e-12)
        if rel < xtol or cost == 0.0:
            return x, cost, True, it
    return x, cost, False, max_iter


def fit_camera_function(distances, values, kind=SINUSOID, omega=None, c=C,
                        max_iter=200, xtol=1e-10) -> FitResult:
    """Fit a camera function to calibration-plane samples.

    Parameters
    ----------
    distances : array_like
        Plane distances d_j in meters, positive and distinct.
    values : array_like
        Raw values i_j measured at those distances. The inverse-square
        falloff is removed internally by multiplying with d_j**2.
    kind : str
        ``"sinusoid"`` (b, psi) or ``"clipped-sinusoid"`` (b1, b2, psi).
    omega : float
        Known angular modulation frequency in rad/s.

    Returns
    -------
    FitResult
        Best fit over a small multi-start grid. ``converged`` is False when
        the best start hit the iteration cap.
    """
    if omega is None or not omega > 0:
        raise ConfigError("fit_camera_function needs a positive omega")
    d = np.asarray(distances, dtype=float).ravel()
    i = np.asarray(values, dtype=float).ravel()
    if d.shape != i.shape:
        raise ConfigError("distances and values differ in length")
    n_params = 2 if kind == SINUSOID else 3
    if kind not in (SINUSOID, CLIPPED):
        raise ConfigError(f"unknown camera function kind {kind!r}")
    if d.size < n_params:
        raise UnderdeterminedError(f"{d.size} samples for {n_params} parameters")
    if np.any(d <= 0) or np.unique(d).size != d.size:
        raise ConfigError("distances must be positive and distinct")

    y = i * d**2
    taus = d / c
    peak = float(np.max(np.abs(y)))
    if peak == 0:
        raise UnderdeterminedError("all calibration samples are zero")

    starts = []
    for psi0 in (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi):
        if kind == SINUSOID:
            starts.append(np.array([peak, psi0]))
        else:
            for frac in (0.5, 1.0):
                starts.append(np.array([1.5 * peak, frac * peak, psi0]))

    best = None
    for x0 in starts:
        x, cost, ok, its = levenberg_marquardt(
            lambda p: _model(p, kind, omega, taus) - y,
            lambda p: _jacobian(p, kind, omega, taus),
            x0, max_iter=max_iter, xtol=xtol)
        if best is None or cost < best[1]:
            best = (x, cost, ok, its)

    x, cost, ok, its = best
    if kind == SINUSOID:
        b, psi = x
        if b < 0:
            b, psi = -b, psi + math.pi
        cf = CameraFunction.make(SINUSOID, b, psi, omega)
    else:
        b1, b2, psi = x
        if b1 < 0:
            b1, psi = -b1, psi + math.pi
        cf = CameraFunction.make(CLIPPED, b1, psi, omega, abs(b2))
    return FitResult(cf, cost, ok, its, [s.tolist() for s in starts])
