import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transfield import synth
from transfield.synth import (GaussianParams, ToySequenceConfig, WaveParams, gaussian_perturb, generate_sequence,
                              rotate_coords, schwefel, schwefel_grad, warp_coords, wave_perturb)

finite = st.floats(-500, 500, allow_nan=False)


def test_schwefel_origin():
    assert schwefel(0.0, 0.0) == pytest.approx(837.9658, abs=1e-12)


def test_schwefel_minimizer():
    assert abs(schwefel(420.9687, 420.9687)) < 1e-3


@given(a=finite, b=finite)
def test_schwefel_symmetric(a, b):
    assert schwefel(a, b) == schwefel(b, a)


def test_schwefel_grad_at_zero():
    g1, g2 = schwefel_grad(0.0, 0.0)
    assert g1 == 0.0 and g2 == 0.0


def test_schwefel_grad_pi_squared():
    g1, _ = schwefel_grad(np.pi**2, 1.0)
    assert g1 == pytest.approx(np.pi / 2, rel=1e-12)


def test_schwefel_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    x1, x2 = rng.uniform(-500, 500, size=(2, 10_000))
    h = 1e-4
    fd1 = (schwefel(x1 + h, x2) - schwefel(x1 - h, x2)) / (2 * h)
    fd2 = (schwefel(x1, x2 + h) - schwefel(x1, x2 - h)) / (2 * h)
    g1, g2 = schwefel_grad(x1, x2)
    assert np.max(np.abs(g1 - fd1) / (np.abs(fd1) + 1e-12)) < 1e-5
    assert np.max(np.abs(g2 - fd2) / (np.abs(fd2) + 1e-12)) < 1e-5


def test_rotation_examples():
    assert rotate_coords(3.0, -2.0, 0.0) == (3.0, -2.0)
    a, b = rotate_coords(1.0, 0.0, np.pi / 2)
    assert a == pytest.approx(0.0, abs=1e-15) and b == pytest.approx(1.0)


@given(x=finite, y=finite, th=st.floats(-7, 7))
def test_rotation_preserves_norm(x, y, th):
    a, b = rotate_coords(x, y, th)
    assert np.hypot(a, b) == pytest.approx(np.hypot(x, y), rel=1e-12, abs=1e-9)


def test_warp_examples():
    assert warp_coords(4.0, 5.0, 0.0) == (4.0, 5.0)
    a, b = warp_coords(50 * np.pi, 0.0, 2.0)
    assert a == pytest.approx(50 * np.pi)
    assert b == pytest.approx(2.0)


@given(x=finite, y=finite, alpha=st.floats(-50, 50))
def test_warp_bounded_displacement(x, y, alpha):
    a, b = warp_coords(x, y, alpha)
    assert max(abs(a - x), abs(b - y)) <= abs(alpha) + 1e-9


def test_gaussian_peak_and_e_fold():
    p = GaussianParams(amplitude=100.0, sigma=5000.0, c1=30.0, c2=-20.0)
    assert gaussian_perturb(30.0, -20.0, params=p) == pytest.approx(100.0)
    r = np.sqrt(5000.0)
    assert gaussian_perturb(30.0 + r, -20.0, params=p) == pytest.approx(100.0 / np.e)
    assert gaussian_perturb(30.0 + 10 * r, -20.0, params=p) < 1e-12 * 100.0


def test_wave_examples():
    p = WaveParams(amplitude=100.0, sigma=20000.0, center=(0.0, 0.0), phase=0.0)
    assert wave_perturb(0.0, 0.0, params=p) == pytest.approx(0.0, abs=1e-12)
    p2 = dataclasses.replace(p, phase=np.pi / 2)
    assert wave_perturb(0.0, 0.0, params=p2) == pytest.approx(100.0)


@given(x=finite, y=finite, ph=st.floats(0, 7))
def test_wave_bounded_by_window(x, y, ph):
    p = WaveParams(phase=ph)
    w = np.exp(-((x - p.center[0]) ** 2 + (y - p.center[1]) ** 2) / p.sigma)
    assert abs(wave_perturb(x, y, params=p)) <= p.amplitude * w + 1e-12


def small(transform, **kw):
    return ToySequenceConfig(transform=transform, grid=(64, 64), **kw)


@pytest.mark.parametrize("transform", synth.TRANSFORMS)
def test_first_step_is_plain_schwefel(transform):
    seq = generate_sequence(small(transform))
    x1, x2 = np.meshgrid(*seq.axes, indexing="ij")
    base = schwefel(x1, x2)
    if transform in ("rotation", "warp"):
        np.testing.assert_array_equal(seq.fields[0], base)
    else:
        # perturbation is present from t=0 but the underlying field is unchanged
        assert np.all(np.isfinite(seq.fields[0]))
        assert np.max(np.abs(seq.fields[0] - base)) <= 100.0 + 1e-9


def test_unknown_transform():
    with pytest.raises(ValueError):
        ToySequenceConfig(transform="shear")


def test_invalid_config():
    with pytest.raises(ValueError):
        ToySequenceConfig(T=1)
    with pytest.raises(ValueError):
        ToySequenceConfig(grid=(0, 4))


def test_rotation_range_drift_small():
    # rotation maps the inscribed disk onto itself, so compare value ranges there
    seq = generate_sequence(ToySequenceConfig(transform="rotation", grid=(400, 400)))
    x1, x2 = np.meshgrid(*seq.axes, indexing="ij")
    disk = np.hypot(x1, x2) <= 500.0
    f0 = seq.fields[0][disk]
    for t in range(1, seq.config.T):
        ft = seq.fields[t][disk]
        span = f0.max() - f0.min()
        assert abs(ft.max() - f0.max()) / span < 0.01
        assert abs(ft.min() - f0.min()) / span < 0.01


@pytest.mark.parametrize("transform", synth.TRANSFORMS)
def test_analytic_gradients_match_grid_differences(transform):
    # 4th-order differences on a fine grid; spacing ~0.5 domain units keeps truncation well under 2%
    cfg = ToySequenceConfig(transform=transform, grid=(401, 401), domain=(-100.0, 100.0))
    seq = generate_sequence(cfg)
    h = 200.0 / 400
    for t in (0, cfg.T - 1):
        f = seq.fields[t]
        d1 = (-f[4:, 2:-2] + 8 * f[3:-1, 2:-2] - 8 * f[1:-3, 2:-2] + f[:-4, 2:-2]) / (12 * h)
        d2 = (-f[2:-2, 4:] + 8 * f[2:-2, 3:-1] - 8 * f[2:-2, 1:-3] + f[2:-2, :-4]) / (12 * h)
        g = seq.analytic_grads[t, 2:-2, 2:-2]
        # exclude the |d| kink lines where the field is not differentiable
        x1, x2 = np.meshgrid(*seq.axes, indexing="ij")
        if transform == "rotation":
            u1, u2 = rotate_coords(x1, x2, cfg.theta(t, cfg.T))
        elif transform == "warp":
            u1, u2 = warp_coords(x1, x2, cfg.alpha(t, cfg.T))
        else:
            u1, u2 = x1, x2
        smooth = (np.abs(u1) > 3) & (np.abs(u2) > 3)
        smooth = smooth[2:-2, 2:-2]
        num = np.stack([d1, d2], -1)[smooth]
        ana = g[smooth]
        rel = np.linalg.norm(num - ana, axis=-1) / (np.linalg.norm(ana, axis=-1) + 1e-12)
        big = np.linalg.norm(ana, axis=-1) > 1e-2
        assert np.all(rel[big] < 0.02)


@pytest.mark.parametrize("transform", ["rotation", "warp"])
@settings(max_examples=30, deadline=None)
@given(x=finite, y=finite, t=st.integers(0, 5))
def test_geometric_chain_rule_identity(transform, x, y, t):
    cfg = ToySequenceConfig(transform=transform)
    _, (g1, g2) = synth.evaluate_step(cfg, t, np.float64(x), np.float64(y))
    if transform == "rotation":
        th = cfg.theta(t, cfg.T)
        u1, u2 = rotate_coords(x, y, th)
        J = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    else:
        a = cfg.alpha(t, cfg.T)
        u1, u2 = warp_coords(x, y, a)
        J = np.array([[1.0, a * 0.01 * np.cos(0.01 * y)], [a * 0.01 * np.cos(0.01 * x), 1.0]])
    expected = J.T @ np.array(schwefel_grad(u1, u2))
    np.testing.assert_allclose([g1, g2], expected, rtol=1e-13, atol=1e-12)


@pytest.mark.parametrize("transform", synth.TRANSFORMS)
def test_deformation_grows_with_t(transform):
    # fine enough that the wave's ~90-unit wavelength is not aliased
    seq = generate_sequence(ToySequenceConfig(transform=transform, grid=(256, 256)))
    d = [np.abs(seq.fields[t] - seq.fields[0]).sum() for t in range(seq.config.T)]
    assert all(b >= a for a, b in zip(d, d[1:]))


def test_generate_is_deterministic():
    a = generate_sequence(small("wave"))
    b = generate_sequence(small("wave"))
    assert a.fields.tobytes() == b.fields.tobytes()
    assert a.analytic_grads.tobytes() == b.analytic_grads.tobytes()


def test_config_round_trip():
    cfg = small("gaussian", T=4)
    assert ToySequenceConfig.from_dict(cfg.to_dict()) == cfg


def test_normalized_gradients_scale():
    seq = generate_sequence(small("warp"))
    g = synth.normalized_gradients(seq, 2)
    f = seq.fields[2]
    scale = 2.0 / (f.max() - f.min()) * 500.0
    np.testing.assert_allclose(g[:, 0, :], seq.analytic_grads[2].reshape(-1, 2) * scale)


def test_instance_windows_layout():
    a = generate_sequence(ToySequenceConfig(transform="warp", grid=(8, 6), T=5))
    b = generate_sequence(ToySequenceConfig(transform="warp", grid=(8, 6), T=5, alpha=synth.Ramp(0.0, 60.0)))
    wins = synth.instance_windows([a, b], 3)
    assert len(wins) == 3
    assert wins[1].shape == (8, 6, 3, 2)
    np.testing.assert_array_equal(wins[1][:, :, 0, 1], b.fields[1])
    np.testing.assert_array_equal(wins[2][:, :, 2, 0], a.fields[4])
    with pytest.raises(ValueError):
        synth.instance_windows([a], 6)
