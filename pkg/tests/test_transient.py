import math

import numpy as np
import pytest

from tofsim.core import C, CameraConfig, ConfigError, RangeError
from tofsim.transient import (DEFAULT_BIN_WIDTH, CornerScene, SceneResponse, corner_geometry,
                              corner_two_bounce_response, polygon_form_factor,
                              single_bounce_response)

BW = DEFAULT_BIN_WIDTH


def small_camera(n=16):
    return CameraConfig.from_frequencies([16e6, 80e6, 120e6], resolution=(n, n))


def test_impulse_lands_in_exact_bin():
    d = np.full((2, 3), C * BW * 100)
    sr = single_bounce_response(d)
    nz = np.argwhere(sr.data != 0)
    assert set(nz[:, 0]) == {100}
    assert len(nz) == 6


def test_inverse_square():
    d = np.array([[1.2, 2.4]])
    sr = single_bounce_response(d, n_tau=400)
    v = sr.data.sum(axis=0)[0]
    assert v[1] / v[0] == pytest.approx(0.25, abs=1e-12)


def test_out_of_range():
    with pytest.raises(RangeError):
        single_bounce_response(np.array([[C * 1000 * BW * 2]]), n_tau=1000)
    with pytest.raises(RangeError):
        single_bounce_response(np.array([[0.0]]))


def test_scene_response_validation():
    with pytest.raises(ConfigError):
        SceneResponse(-np.ones((3, 2, 2)))
    a = single_bounce_response(np.full((2, 2), 2.0), n_tau=300)
    assert np.array_equal((a + a).data, 2 * a.data)


def rect_form_factor(a, b, h):
    """Differential area facing a parallel a x b rectangle above one corner."""
    X, Y = a / h, b / h
    sx, sy = math.sqrt(1 + X * X), math.sqrt(1 + Y * Y)
    return (X / sx * math.atan(Y / sx) + Y / sy * math.atan(X / sy)) / (2 * math.pi)


@pytest.mark.parametrize("a,b,h", [(1.0, 1.0, 1.0), (0.3, 2.0, 0.7), (5.0, 0.1, 0.2)])
def test_form_factor_against_closed_form(a, b, h):
    verts = np.array([[[0, 0, h], [a, 0, h], [a, b, h], [0, b, h]]], dtype=float)
    F = polygon_form_factor(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), verts)
    assert F[0, 0] == pytest.approx(rect_form_factor(a, b, h), rel=1e-12)


def test_form_factor_disk_limit():
    # many-sided polygon approximates a disk: F = R^2 / (R^2 + h^2)
    R, h, n = 0.8, 1.3, 4000
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    verts = np.stack([R * np.cos(t), R * np.sin(t), np.full(n, h)], axis=1)[None]
    F = polygon_form_factor(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), verts)
    assert F[0, 0] == pytest.approx(R**2 / (R**2 + h**2), rel=1e-5)


@pytest.fixture(scope="module")
def corner16():
    cfg = small_camera()
    return cfg, corner_two_bounce_response(CornerScene(patches=256), cfg, return_parts=True)


def test_first_bin_is_direct_path(corner16):
    cfg, (sr, direct, indirect, geom) = corner16
    first = np.argmax(sr.data > 0, axis=0)
    assert np.array_equal(first, np.rint(geom.depth / C / BW).astype(int))
    # oracle: no indirect path is shorter than the direct one
    lit = indirect.data.sum(0) > 0
    assert np.all(np.argmax(indirect.data > 0, axis=0)[lit] >= first[lit])


def test_nonnegative_and_energy_bound(corner16):
    cfg, (sr, direct, indirect, geom) = corner16
    assert np.all(sr.data >= 0)
    rho = 0.5
    assert np.all(indirect.data.sum(0) <= rho / (1 - rho) * direct.data.sum(0))
    assert indirect.data.sum() > 0


def test_zero_albedo_removes_interreflection():
    cfg = small_camera(12)
    scene = CornerScene(albedo=(0.5, 0.0), patches=64)
    sr = corner_two_bounce_response(scene, cfg)
    geom = corner_geometry(scene, cfg)
    ref = single_bounce_response(geom.depth, geom.shading, n_tau=sr.n_tau)
    np.testing.assert_array_equal(sr.data, ref.data)


def test_threads_do_not_change_result():
    cfg = small_camera(12)
    scene = CornerScene(patches=64)
    a = corner_two_bounce_response(scene, cfg, threads=1)
    b = corner_two_bounce_response(scene, cfg, threads=4, chunk=7)
    assert np.array_equal(a.data, b.data)


def test_patch_refinement_converges():
    cfg = small_camera(16)
    totals = {}
    for m in [4, 16, 64, 256, 1024, 2048, 4096]:
        _, _, ind, _ = corner_two_bounce_response(CornerScene(patches=m), cfg, return_parts=True)
        totals[m] = ind.data.sum()
    seq = [totals[m] for m in sorted(totals)]
    steps = np.abs(np.diff(seq))
    assert np.all(np.diff(steps) < 0)
    assert abs(totals[2048] - totals[4096]) / totals[4096] < 0.05


def test_degenerate_geometry():
    with pytest.raises((ConfigError, RangeError)):
        corner_two_bounce_response(CornerScene(distance=0.0), small_camera(4))
