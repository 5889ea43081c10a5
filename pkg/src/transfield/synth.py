"""Time-evolving Schwefel fields with closed-form gradients.

Geometric transforms (rotation, warp) evaluate the base field on moved
coordinates, ``f_t(x) = f(T_t(x))``; local transforms add a windowed
perturbation, ``f_t = f + P_t``.  Gradients follow by the chain rule and are
exact, which is what makes the sequence useful as a derivative-fidelity
oracle.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

SCHWEFEL_CONST = 418.9829
TRANSFORMS = ("rotation", "warp", "gaussian", "wave")


def schwefel(x1, x2):
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    return (SCHWEFEL_CONST - x1 * np.sin(np.sqrt(np.abs(x1)))) + (
        SCHWEFEL_CONST - x2 * np.sin(np.sqrt(np.abs(x2)))
    )


def _schwefel_term_grad(d):
    r = np.sqrt(np.abs(d))
    # d * sign(d) / (2 sqrt|d|) == sqrt|d| / 2, which also gives the d -> 0 limit
    return -np.sin(r) - 0.5 * r * np.cos(r)


def schwefel_grad(x1, x2):
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    return _schwefel_term_grad(x1), _schwefel_term_grad(x2)


def rotate_coords(x1, x2, theta):
    c, s = np.cos(theta), np.sin(theta)
    return c * x1 - s * x2, s * x1 + c * x2


def warp_coords(x1, x2, alpha):
    return x1 + alpha * np.sin(0.01 * x2), x2 + alpha * np.sin(0.01 * x1)


@dataclass(frozen=True)
class GaussianParams:
    amplitude: float = 100.0
    sigma: float = 5000.0
    c1: float = 0.0
    c2: float = 0.0


@dataclass(frozen=True)
class WaveParams:
    amplitude: float = 100.0
    sigma: float = 20000.0
    center: tuple[float, float] = (0.0, 0.0)
    phase: float = 0.0


def gaussian_perturb(x1, x2, t=None, params: GaussianParams = GaussianParams()):
    """``A exp(-((x1-c1)^2 + (x2-c2)^2) / sigma)``; ``t`` is carried by ``params.c1``."""
    if params.sigma <= 0:
        raise ValueError("sigma must be positive")
    r2 = (x1 - params.c1) ** 2 + (x2 - params.c2) ** 2
    return params.amplitude * np.exp(-r2 / params.sigma)


def _gaussian_perturb_grad(x1, x2, params):
    p = gaussian_perturb(x1, x2, params=params)
    return -2.0 * (x1 - params.c1) / params.sigma * p, -2.0 * (x2 - params.c2) / params.sigma * p


def wave_perturb(x1, x2, t=None, params: WaveParams = WaveParams()):
    if params.sigma <= 0:
        raise ValueError("sigma must be positive")
    w = gaussian_perturb(x1, x2, params=GaussianParams(1.0, params.sigma, *params.center))
    return params.amplitude * w * np.sin(0.05 * x1 + 0.05 * x2 + params.phase)


def _wave_perturb_grad(x1, x2, params):
    g = GaussianParams(1.0, params.sigma, *params.center)
    w = gaussian_perturb(x1, x2, params=g)
    wx1, wx2 = _gaussian_perturb_grad(x1, x2, g)
    arg = 0.05 * x1 + 0.05 * x2 + params.phase
    s, c = np.sin(arg), np.cos(arg)
    a = params.amplitude
    return a * (wx1 * s + 0.05 * w * c), a * (wx2 * s + 0.05 * w * c)


@dataclass(frozen=True)
class Ramp:
    start: float
    end: float

    def __call__(self, t: int, T: int) -> float:
        if T <= 1:
            return self.start
        return self.start + (self.end - self.start) * t / (T - 1)


@dataclass(frozen=True)
class ToySequenceConfig:
    transform: str = "warp"
    grid: tuple[int, int] = (500, 500)
    T: int = 6
    domain: tuple[float, float] = (-500.0, 500.0)
    theta: Ramp = Ramp(0.0, np.deg2rad(30.0))
    alpha: Ramp = Ramp(0.0, 30.0)
    c1: Ramp = Ramp(-250.0, 250.0)
    phase: Ramp = Ramp(0.0, np.pi)
    gaussian: GaussianParams = GaussianParams()
    wave: WaveParams = WaveParams()

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; expected one of {TRANSFORMS}")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if min(self.grid) < 1:
            raise ValueError("grid must be positive")
        if self.domain[1] <= self.domain[0]:
            raise ValueError("domain must be increasing")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ToySequenceConfig":
        data = dict(data)
        for key in ("theta", "alpha", "c1", "phase"):
            if key in data and not isinstance(data[key], Ramp):
                v = data[key]
                data[key] = Ramp(**v) if isinstance(v, dict) else Ramp(*v)
        if "gaussian" in data and isinstance(data["gaussian"], dict):
            data["gaussian"] = GaussianParams(**data["gaussian"])
        if "wave" in data and isinstance(data["wave"], dict):
            w = dict(data["wave"])
            if "center" in w:
                w["center"] = tuple(w["center"])
            data["wave"] = WaveParams(**w)
        for key in ("grid", "domain"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class ToySequence:
    fields: np.ndarray  # (T, H, W)
    analytic_grads: np.ndarray  # (T, H, W, 2), d/dx1 and d/dx2 in domain units
    config: ToySequenceConfig = field(repr=False)

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        return grid_axes(self.config)


def grid_axes(config: ToySequenceConfig):
    lo, hi = config.domain
    return np.linspace(lo, hi, config.grid[0]), np.linspace(lo, hi, config.grid[1])


def evaluate_step(config: ToySequenceConfig, t: int, x1, x2):
    """Field value and gradient of timestep ``t`` at arbitrary points."""
    kind = config.transform
    T = config.T
    if kind == "rotation":
        theta = config.theta(t, T)
        u1, u2 = rotate_coords(x1, x2, theta)
        g1, g2 = schwefel_grad(u1, u2)
        c, s = np.cos(theta), np.sin(theta)
        # J = [[c, -s], [s, c]]; grad = J^T grad f
        return schwefel(u1, u2), (c * g1 + s * g2, -s * g1 + c * g2)
    if kind == "warp":
        alpha = config.alpha(t, T)
        u1, u2 = warp_coords(x1, x2, alpha)
        g1, g2 = schwefel_grad(u1, u2)
        j12 = alpha * 0.01 * np.cos(0.01 * x2)  # du1/dx2
        j21 = alpha * 0.01 * np.cos(0.01 * x1)  # du2/dx1
        return schwefel(u1, u2), (g1 + j21 * g2, j12 * g1 + g2)
    g1, g2 = schwefel_grad(x1, x2)
    if kind == "gaussian":
        params = dataclasses.replace(config.gaussian, c1=config.c1(t, T))
        p = gaussian_perturb(x1, x2, t, params)
        p1, p2 = _gaussian_perturb_grad(x1, x2, params)
    else:
        params = dataclasses.replace(config.wave, phase=config.phase(t, T))
        p = wave_perturb(x1, x2, t, params)
        p1, p2 = _wave_perturb_grad(x1, x2, params)
    return schwefel(x1, x2) + p, (g1 + p1, g2 + p2)


def generate_sequence(config: ToySequenceConfig) -> ToySequence:
    a1, a2 = grid_axes(config)
    x1, x2 = np.meshgrid(a1, a2, indexing="ij")
    H, W = config.grid
    fields = np.empty((config.T, H, W))
    grads = np.empty((config.T, H, W, 2))
    for t in range(config.T):
        f, (d1, d2) = evaluate_step(config, t, x1, x2)
        fields[t] = f
        grads[t, ..., 0] = d1
        grads[t, ..., 1] = d2
    return ToySequence(fields, grads, config)


def normalized_gradients(seq: ToySequence, t: int, coord_range=(-1.0, 1.0)) -> np.ndarray:
    """Analytic gradient of min-max normalised ``f_t`` w.r.t. normalised coordinates.

    Returns (H*W, 1, 2), ordered like the flattened grid.
    """
    f = seq.fields[t]
    fmin, fmax = f.min(), f.max()
    lo, hi = seq.config.domain
    value_scale = 2.0 / (fmax - fmin)
    coord_scale = (hi - lo) / (coord_range[1] - coord_range[0])
    g = seq.analytic_grads[t] * value_scale * coord_scale
    return g.reshape(-1, 1, 2)


def instance_windows(seqs: list[ToySequence], window: int) -> list[np.ndarray]:
    """Stack several sequences into (H, W, window, S) volumes over sliding time windows.

    Each sequence plays the role of one simulation instance; the instance index
    becomes the last coordinate axis. Window ``k`` covers timesteps ``k .. k+window-1``.
    """
    if not seqs:
        raise ValueError("need at least one sequence")
    T = seqs[0].config.T
    if any(s.fields.shape != seqs[0].fields.shape for s in seqs):
        raise ValueError("all sequences must share grid and T")
    if not 1 <= window <= T:
        raise ValueError(f"window must be in 1..{T}")
    stacked = np.stack([s.fields for s in seqs], -1)  # (T, H, W, S)
    return [np.moveaxis(stacked[k:k + window], 0, 2) for k in range(T - window + 1)]
