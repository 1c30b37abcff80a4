import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from tofsim.core import C, TWO_PI, CameraConfig, CameraFunction, ConfigError, SINUSOID
from tofsim.motion import Affine2D, motion_method1
from tofsim.reconstruct import (IncommensurateError, MaskParams, UnwrapConstants,
                                bilateral_filter, frequency_phases, grad_depth_wrt_raw,
                                lf2_reconstruct, mask_unreliable, phase_and_amplitude,
                                phase_depth_single, phase_estimator, phasor_reconstruct,
                                project_one_bounce, run_pipeline, unwrap_crt, unwrap_oracle)
from tofsim.simulate import RawFrames, apply_gain_map, correlate
from tofsim.transient import DEFAULT_BIN_WIDTH, quantized_depth, single_bounce_response

W40 = TWO_PI * 40e6


def omegas(*mhz):
    return [TWO_PI * f * 1e6 for f in mhz]


def wrapped(d, oms):
    return np.mod(2 * np.asarray(oms)[:, None] * np.atleast_1d(d)[None] / C, TWO_PI)


# -- single frequency ----------------------------------------------------------------

def test_three_phase_worked_example():
    cfg = CameraConfig.from_frequencies([40e6], phases=3, resolution=(1, 1))
    fr = RawFrames(np.array([0.5, 0.5, -1.0]).reshape(3, 1, 1), cfg.channels)
    dm, ok = phase_depth_single(fr)
    assert ok.all()
    assert dm.depth[0, 0] == pytest.approx(C * math.pi / (6 * W40), rel=1e-14)
    assert dm.amplitude[0, 0] == pytest.approx(1.0, rel=1e-14)


def test_phase_wraps_past_two_pi():
    cfg = CameraConfig.from_frequencies([40e6], phases=4, resolution=(1, 1))
    eps = 0.01
    tau = (TWO_PI + eps) / (2 * W40)
    fr = RawFrames(cfg.channel_matrix([tau]).reshape(4, 1, 1), cfg.channels)
    dm, _ = phase_depth_single(fr)
    assert dm.depth[0, 0] == pytest.approx(C * eps / (2 * W40), rel=1e-8)


def test_zero_vector_is_invalid():
    cfg = CameraConfig.from_frequencies([40e6], resolution=(1, 2))
    fr = RawFrames(np.zeros((3, 1, 2)), cfg.channels)
    dm, ok = phase_depth_single(fr)
    assert not ok.any() and np.isnan(dm.depth).all()


@pytest.mark.parametrize("K", [2, 3, 4, 7])
def test_estimator_reduces_to_uniform_formula(K):
    cfg = CameraConfig.from_frequencies([40e6], phases=K, amplitude=1.7)
    psi = np.array(cfg.phases)
    ref = (2 / K) / 1.7 * np.stack([np.cos(psi), np.sin(psi)])
    if K == 2:
        # two opposite phases cannot resolve the quadrature term
        with pytest.raises(ConfigError):
            phase_estimator(cfg.channels)
        return
    np.testing.assert_allclose(phase_estimator(cfg.channels), ref, atol=1e-14)


def test_nonuniform_phases_exact():
    chans = [CameraFunction(SINUSOID, b, p, W40) for b, p in [(1.0, 0.1), (0.8, 1.3), (1.2, 4.0)]]
    theta, a = 2.2, 0.6
    i = np.array([a * cf.amplitude * math.cos(cf.phase - theta) for cf in chans])
    ph, amp, ok = phase_and_amplitude(i, chans)
    assert ph == pytest.approx(theta, abs=1e-12)
    assert amp == pytest.approx(a, abs=1e-12)


# -- unwrap constants ----------------------------------------------------------------

@pytest.mark.parametrize("mhz,p,dmax", [
    ((40, 50), (4, 5), C / (2 * 10e6)),
    ((16, 80, 120), (2, 10, 15), C / (2 * 8e6)),
    ((10, 11, 12), (10, 11, 12), C / (2 * 1e6)),
    ((40,), (1,), C / (2 * 40e6)),
])
def test_unwrap_constants(mhz, p, dmax):
    k = UnwrapConstants.from_omegas(omegas(*mhz))
    assert k.ratios == p
    assert k.max_range == pytest.approx(dmax, rel=1e-12)
    if len(p) > 1:
        Cm, S = np.array(k.C), np.array(k.S)
        assert not (Cm @ np.array(p)).any()
        assert np.array_equal(Cm @ S, np.eye(len(p) - 1, dtype=int))
    assert sum(k.weights) == pytest.approx(1.0)


def test_incommensurate_refused():
    with pytest.raises(IncommensurateError):
        UnwrapConstants.from_omegas([W40, W40 * math.sqrt(2)])


def test_single_frequency_unwrap_matches_phase_depth():
    d = np.linspace(0.1, 3.7, 9)
    k = UnwrapConstants.from_omegas([W40])
    depth, _, _ = unwrap_crt(wrapped(d, [W40]), k)
    np.testing.assert_allclose(depth, C / (2 * W40) * wrapped(d, [W40])[0], atol=1e-12)


def test_forty_fifty_five_meters():
    k = UnwrapConstants.from_omegas(omegas(40, 50))
    depth, n, _ = unwrap_crt(wrapped(5.0, k.omegas), k)
    od, on, _ = unwrap_oracle(wrapped(5.0, k.omegas), k)
    assert depth[0] == pytest.approx(5.0, abs=1e-9)
    assert np.array_equal(n, on)


def test_perturbed_phases_keep_wraps():
    rng = np.random.default_rng(5)
    k = UnwrapConstants.from_omegas(omegas(40, 50))
    d = rng.uniform(0.2, k.max_range - 0.2, 5000)
    ph = wrapped(d, k.omegas) + rng.choice([-0.005, 0.005], (2, d.size))
    depth, n, _ = unwrap_crt(np.mod(ph, TWO_PI), k)
    _, on, _ = unwrap_oracle(np.mod(ph, TWO_PI), k)
    assert np.array_equal(n, on)
    assert np.abs(depth - d).max() <= C * 0.005 / (2 * min(k.omegas))


@settings(max_examples=40, deadline=None)
@given(p=st.lists(st.integers(1, 9), min_size=2, max_size=3),
       seed=st.integers(0, 2**32 - 1), variance=st.booleans())
def test_closed_form_equals_oracle(p, seed, variance):
    assume(math.gcd(*p) == 1 and len(set(p)) == len(p))
    k = UnwrapConstants.from_omegas([TWO_PI * 1e6 * q for q in p],
                                    weighting="variance" if variance else "equal")
    d = np.random.default_rng(seed).uniform(0, k.max_range, 300)
    ph = wrapped(d, k.omegas)
    a, n, _ = unwrap_crt(ph, k)
    b, m, _ = unwrap_oracle(ph, k)
    assert np.array_equal(n, m)
    np.testing.assert_allclose(a, b, atol=1e-9)


# -- Jacobian ------------------------------------------------------------------------

def kinect(res=(1, 1), phases=3):
    return CameraConfig.from_frequencies([16e6, 80e6, 120e6], phases=phases, resolution=res)


def test_jacobian_finite_differences_and_scale():
    cfg = kinect((10, 10))
    rng = np.random.default_rng(0)
    d = rng.uniform(0.5, 8.0, (10, 10))
    fr = correlate(single_bounce_response(d, rng.uniform(0.3, 1, (10, 10)), n_tau=600), cfg)
    k = UnwrapConstants.from_omegas(cfg.omegas)
    J, ok = grad_depth_wrt_raw(fr, cfg, k)
    assert ok.all()
    x = fr.data
    np.testing.assert_allclose(np.einsum("cxy,cxy->xy", J, x), 0, atol=1e-9)

    def depth_of(data):
        ph, _, _ = frequency_phases(fr.replace(data), cfg)
        return unwrap_crt(ph, k)[0]

    h = 1e-6 * np.linalg.norm(x, axis=0)
    for ch in range(9):
        e = np.zeros_like(x)
        e[ch] = h
        fd = (depth_of(x + e) - depth_of(x - e)) / (2 * h)
        np.testing.assert_allclose(J[ch], fd, rtol=1e-4, atol=1e-4 * np.abs(J).max())


def test_jacobian_symbolic_single_frequency():
    sympy = pytest.importorskip("sympy")
    K = 3
    cfg = CameraConfig.from_frequencies([40e6], phases=K, resolution=(1, 1))
    psi = np.array(cfg.phases)
    theta = math.pi / 4
    i_val = np.cos(psi - theta)
    syms = sympy.symbols("i0:3")
    s = sum(sympy.sin(p) * v for p, v in zip(psi, syms))
    c = sum(sympy.cos(p) * v for p, v in zip(psi, syms))
    d = C / (2 * W40) * sympy.atan2(s, c)
    subs = dict(zip(syms, i_val))
    oracle = [float(sympy.diff(d, v).subs(subs)) for v in syms]
    J, _ = grad_depth_wrt_raw(RawFrames(i_val.reshape(3, 1, 1), cfg.channels), cfg)
    np.testing.assert_allclose(J[:, 0, 0], oracle, rtol=1e-12)


def test_jacobian_flags_invalid():
    cfg = kinect((1, 2))
    data = np.zeros((9, 1, 2))
    data[:, 0, 1] = cfg.channel_matrix([1e-8])[:, 0]
    J, ok = grad_depth_wrt_raw(RawFrames(data, cfg.channels), cfg)
    assert ok.tolist() == [[False, True]]
    assert np.isnan(J[:, 0, 0]).all() and np.isfinite(J[:, 0, 1]).all()


# -- mask and bilateral -------------------------------------------------------------

def test_mask_noise_free_and_zero_amplitude():
    cfg = kinect((6, 6))
    d = np.linspace(0.5, 15, 36).reshape(6, 6)
    fr = correlate(single_bounce_response(d, n_tau=1300), cfg)
    fr.data[:, 0, 0] = 0
    rec = lf2_reconstruct(fr, cfg, bilateral=False)
    assert not rec.mask[0, 0]
    assert rec.mask.sum() == 35


def test_mask_disagreement_rule():
    amps = np.ones((2, 1, 3))
    per = np.array([[[1.0, 1.0, 0.02]], [[1.05, 1.2, 9.98]]])
    m = mask_unreliable(amps, per, max_range=10.0, params=MaskParams(consistency=0.1))
    # the last pixel agrees modulo the unambiguous range
    assert m.tolist() == [[True, False, True]]


def test_motion_at_edges_drops_density():
    n = (24, 80)
    cfg = kinect(n)
    d = np.full(n, 3.5)
    d[:, 30:40] = 2.0
    fr = correlate(single_bounce_response(d, n_tau=600), cfg)
    static = lf2_reconstruct(fr, cfg, bilateral=False).mask
    moved = motion_method1([(fr, d)], [Affine2D.shift(0, 4)])
    dyn = lf2_reconstruct(moved, cfg, bilateral=False).mask
    assert static.all()
    assert dyn.sum() < static.sum()
    # channels reach at most 4 * 4 px: columns further than that from a
    # depth edge or the image border keep every pixel
    cols = np.arange(n[1])
    reach = np.min(np.abs(cols[:, None] - np.array([0, 30, 40, n[1]])[None]), axis=1)
    assert dyn[:, reach > 16].all()


def test_bilateral_constant_unchanged():
    d = np.full((9, 11), 2.5)
    np.testing.assert_allclose(bilateral_filter(d, sigma_spatial=1.3), d, atol=1e-15)


@pytest.mark.parametrize("sigma", [0.7, 1.0, 1.6])
def test_bilateral_infinite_range_is_gaussian(sigma):
    ndimage = pytest.importorskip("scipy.ndimage")
    rng = np.random.default_rng(0)
    d = rng.uniform(1, 3, (17, 19))
    r = math.ceil(3 * sigma)
    num = ndimage.gaussian_filter(d, sigma, mode="constant", cval=0.0, radius=r)
    den = ndimage.gaussian_filter(np.ones_like(d), sigma, mode="constant", cval=0.0, radius=r)
    out = bilateral_filter(d, sigma_spatial=sigma, sigma_range=np.inf)
    np.testing.assert_allclose(out, num / den, atol=1e-9)


def test_bilateral_preserves_step():
    d = np.full((15, 16), 2.0)
    d[:, 8:] = 3.0
    out = bilateral_filter(d, sigma_spatial=1.0, sigma_range=0.05)
    assert np.abs(out - d).max() < 1e-3


def test_bilateral_skips_invalid():
    d = np.full((7, 7), 2.0)
    d[3, 3] = 50.0
    valid = np.ones_like(d, bool)
    valid[3, 3] = False
    out = bilateral_filter(d, sigma_range=np.inf, valid=valid)
    assert out[3, 3] == 50.0
    np.testing.assert_allclose(np.delete(out.ravel(), 24), 2.0)
    with pytest.raises(ConfigError):
        bilateral_filter(d, sigma_spatial=0)


# -- phasor ----------------------------------------------------------------------

PHASOR = CameraConfig.from_frequencies([1063.3e6, 1034.1e6], resolution=(1, 1))


def test_phasor_width():
    _, _, width = phasor_reconstruct(
        RawFrames(PHASOR.channel_matrix([1e-8]).reshape(6, 1, 1), PHASOR.channels), PHASOR)
    assert width == pytest.approx(C / (2 * 29.2e6), rel=1e-9)
    assert width == pytest.approx(5.13, abs=0.01)


@pytest.mark.parametrize("d", [1.6, 3.0, 4.9])
def test_phasor_round_trip(d):
    fr = RawFrames(PHASOR.channel_matrix([d / C]).reshape(6, 1, 1), PHASOR.channels)
    for refine in (False, True):
        dm, ok, _ = phasor_reconstruct(fr, PHASOR, refine=refine)
        assert dm.depth[0, 0] == pytest.approx(d, abs=1e-6)


def test_phasor_pipeline_excludes_out_of_range():
    cfg = PHASOR.with_resolution((1, 3))
    d = np.array([[1.0, 3.0, 6.5]])
    fr = correlate(single_bounce_response(d, n_tau=1000), cfg)
    rec = run_pipeline("phasor", fr, cfg, bilateral=False)
    assert rec.mask.tolist() == [[False, True, False]]


def test_phasor_needs_two_distinct_frequencies():
    with pytest.raises(ConfigError):
        phasor_reconstruct(RawFrames(np.ones((9, 1, 1)), kinect().channels), kinect())


# -- one-bounce projection -------------------------------------------------------------

def test_projection_fixed_point():
    cfg = kinect()
    taus = np.array([0.7e-8, 2.345e-8, 5.5e-8])
    a = np.array([0.3, 1.0, 2.5])
    X = (cfg.channel_matrix(taus) * a).T
    pr = project_one_bounce(X, cfg)
    np.testing.assert_allclose(pr.tau, taus, rtol=1e-9)
    np.testing.assert_allclose(pr.amplitude, a, rtol=1e-9)
    assert np.all(pr.residual < 1e-10) and pr.converged.all()


def test_projection_two_path_against_grid():
    cfg = kinect()
    k = UnwrapConstants.from_omegas(cfg.omegas)
    t1 = 200 * DEFAULT_BIN_WIDTH
    t2 = t1 + 20 * DEFAULT_BIN_WIDTH
    x = cfg.channel_matrix([t1])[:, 0] + 0.5 * cfg.channel_matrix([t2])[:, 0]
    pr = project_one_bounce(x[None], cfg)
    assert t1 < pr.tau[0] < t2
    assert pr.residual[0] > 0
    step = DEFAULT_BIN_WIDTH / 10
    grid = np.arange(0, k.max_range / C, step)
    F = cfg.channel_matrix(grid)
    best = grid[np.argmax((x @ F) ** 2 / (F**2).sum(0))]
    assert abs(pr.tau[0] - best) <= step


def test_projection_rejects_zero():
    with pytest.raises(ConfigError):
        project_one_bounce(np.zeros((1, 9)), kinect())


# -- pipelines -------------------------------------------------------------------

def test_unknown_pipeline_lists_names():
    with pytest.raises(ConfigError, match="lf2star"):
        run_pipeline("foo", None, kinect())


def test_gain_does_not_move_depth():
    cfg = kinect((8, 8))
    rng = np.random.default_rng(1)
    d = rng.uniform(0.5, 15, (8, 8))
    fr = correlate(single_bounce_response(d, n_tau=1300), cfg)
    a = run_pipeline("lf2star", fr, cfg)
    b = run_pipeline("lf2star", apply_gain_map(fr, rng.uniform(0.1, 3, (8, 8))), cfg)
    np.testing.assert_allclose(b.depth.depth, a.depth.depth, atol=1e-9)
    np.testing.assert_allclose(a.depth.depth, quantized_depth(d), atol=1e-6)
