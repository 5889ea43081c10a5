"""Reconstruction and derivative-fidelity metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .io import GridSignal

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check_shapes(name, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def psnr(pred, truth, peak: float | None = None) -> float:
    """``10 log10(peak^2 / MSE)``; peak defaults to the range of ``truth``.

    Returns ``inf`` for an exact reconstruction.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_shapes("psnr", pred, truth)
    if peak is None:
        peak = float(truth.max() - truth.min())
    mse = float(np.mean((pred - truth) ** 2))
    if mse == 0.0:
        return math.inf
    if peak <= 0:
        return -math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-(r**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable correlation over the last two axes, valid positions only
    rows = sliding_window_view(img, len(w), axis=-2) @ w
    return sliding_window_view(rows, len(w), axis=-1) @ w


def _ssim_slices(x: np.ndarray, y: np.ndarray, peak: float) -> np.ndarray:
    w = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    smap = num / den
    return smap.reshape(-1, *smap.shape[-2:]).mean(axis=(1, 2))


def ssim(pred, truth, peak: float | None = None) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), averaged over valid window positions.

    Inputs with more than two axes are treated as a stack of 2D slices over
    the last two axes; the result is the mean over slices.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_shapes("ssim", pred, truth)
    if pred.ndim < 2:
        raise ValueError("ssim needs at least 2D input")
    if min(pred.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim: slices {pred.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if peak is None:
        peak = float(truth.max() - truth.min())
    return float(np.mean(_ssim_slices(pred, truth, peak)))


def iterations_to_threshold(trace, threshold: float):
    """First iteration whose value reaches ``threshold``; None if never."""
    trace = list(trace)
    if not trace:
        raise ValueError("empty trace")
    for it, value in trace:
        if value is not None and value >= threshold:
            return it
    return None


def gradient_rmse(pred_grad, truth_grad) -> float:
    pred_grad = np.asarray(pred_grad, dtype=np.float64)
    truth_grad = np.asarray(truth_grad, dtype=np.float64)
    _check_shapes("gradient_rmse", pred_grad, truth_grad)
    return float(np.sqrt(np.mean((pred_grad - truth_grad) ** 2)))


def fd_derivative(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """First derivative along ``axis``.

    Fourth-order central differences where two neighbours exist on each
    side, second-order central one step in from the edge, second-order
    one-sided on the boundary samples.
    """
    f = np.asarray(f, dtype=np.float64)
    n = f.shape[axis]
    if n < 5:
        raise ValueError(f"fd_derivative needs >= 5 samples along axis {axis}, got {n}")
    g = np.moveaxis(f, axis, 0)
    d = np.empty_like(g)
    d[2:-2] = (-g[4:] + 8 * g[3:-1] - 8 * g[1:-3] + g[:-4]) / (12 * h)
    d[1] = (g[2] - g[0]) / (2 * h)
    d[-2] = (g[-1] - g[-3]) / (2 * h)
    d[0] = (-3 * g[0] + 4 * g[1] - g[2]) / (2 * h)
    d[-1] = (3 * g[-1] - 4 * g[-2] + g[-3]) / (2 * h)
    return np.moveaxis(d, 0, axis)


def fd_gradient(field, variable: str | None = None, spacing=None, axes=None) -> np.ndarray:
    """Gradient of a gridded field along ``axes`` (default all); trailing axis indexes direction."""
    if isinstance(field, GridSignal):
        variable = variable or field.variables[0]
        arr = field.data[variable]
        spacing = field.spacing if spacing is None else spacing
    else:
        arr = np.asarray(field)
        spacing = (1.0,) * arr.ndim if spacing is None else spacing
    if np.isscalar(spacing):
        spacing = (float(spacing),) * arr.ndim
    axes = range(arr.ndim) if axes is None else axes
    return np.stack([fd_derivative(arr, a, spacing[a]) for a in axes], axis=-1)


def _velocity(v, spacing):
    if isinstance(v, GridSignal):
        if len(v.variables) != 3:
            raise ValueError(f"curl needs 3 velocity channels, got {len(v.variables)}")
        if v.ndim != 3:
            raise ValueError(f"curl needs a 3D spatial grid, got {v.ndim} axes")
        return [v.data[n] for n in v.variables], v.spacing if spacing is None else spacing
    v = np.asarray(v)
    if v.ndim != 4 or v.shape[-1] != 3:
        raise ValueError(f"curl needs an (X, Y, Z, 3) array, got {v.shape}")
    return [v[..., i] for i in range(3)], (1.0, 1.0, 1.0) if spacing is None else spacing


def curl(v, spacing=None) -> np.ndarray:
    """Vorticity of a 3-component field on a 3D grid, shape (X, Y, Z, 3)."""
    (vx, vy, vz), spacing = _velocity(v, spacing)
    if np.isscalar(spacing):
        spacing = (float(spacing),) * 3
    hx, hy, hz = spacing
    d = fd_derivative
    return np.stack([
        d(vz, 1, hy) - d(vy, 2, hz),
        d(vx, 2, hz) - d(vz, 0, hx),
        d(vy, 0, hx) - d(vx, 1, hy),
    ], axis=-1)


def divergence(v, spacing=None) -> np.ndarray:
    (vx, vy, vz), spacing = _velocity(v, spacing)
    if np.isscalar(spacing):
        spacing = (float(spacing),) * 3
    return fd_derivative(vx, 0, spacing[0]) + fd_derivative(vy, 1, spacing[1]) + fd_derivative(vz, 2, spacing[2])


@dataclass
class MetricReport:
    variables: list[str]
    psnr: list[float]
    ssim: list[float | None]
    rmse: list[float]
    grad_rmse: float | None = None
    curl_rmse: float | None = None
    iteration: int | None = None
    notes: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float | None:
        vals = [s for s in self.ssim if s is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))

    def to_dict(self) -> dict:
        def num(x):
            return "inf" if isinstance(x, float) and math.isinf(x) else x

        return {
            "iteration": self.iteration,
            "variables": self.variables,
            "psnr": [num(p) for p in self.psnr],
            "ssim": self.ssim,
            "rmse": self.rmse,
            "mean_psnr": num(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "mean_rmse": self.mean_rmse,
            "grad_rmse": self.grad_rmse,
            "curl_rmse": self.curl_rmse,
            "units": {"grad_rmse": "normalized field per normalized [-1,1] coordinate"},
            **({"notes": self.notes} if self.notes else {}),
        }


def report(pred: np.ndarray, truth: np.ndarray, dims, variables, iteration=None, peak=None) -> MetricReport:
    """Per-variable metrics for (N, C) predictions against (N, C) truth on a grid of ``dims``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _check_shapes("report", pred, truth)
    ps, ss, rs = [], [], []
    for c in range(truth.shape[1]):
        p = pred[:, c].reshape(dims)
        t = truth[:, c].reshape(dims)
        ps.append(psnr(p, t, peak))
        rs.append(float(np.sqrt(np.mean((p.astype(np.float64) - t) ** 2))))
        if len(dims) >= 2 and min(dims[-2:]) >= SSIM_WINDOW:
            ss.append(ssim(p, t, peak))
        else:
            ss.append(None)
    return MetricReport(list(variables), ps, ss, rs, iteration=iteration)
