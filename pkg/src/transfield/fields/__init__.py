"""Coordinate networks split into a transferable encoder and a per-signal decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .. import autodiff as ad
from .base import Architecture, mlp_param_count
from .hashgrid import HashGrid, HashGridConfig, spatial_hash
from .kplanes import KPlanes, KPlanesConfig
from .siren import Siren, SirenConfig

ARCHITECTURES: dict[str, tuple[type, type]] = {
    "siren": (Siren, SirenConfig),
    "hashgrid": (HashGrid, HashGridConfig),
    "kplanes": (KPlanes, KPlanesConfig),
}

BUDGET_TOLERANCE = 0.05


class BudgetError(ValueError):
    def __init__(self, message, target=None, achieved=None):
        self.target = target
        self.achieved = achieved
        super().__init__(message)


class CoordinateRangeError(ValueError):
    pass


def _lookup(arch: str):
    try:
        return ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}") from None


def config_from_dict(arch: str, data: dict | None = None):
    _, cfg_cls = _lookup(arch)
    data = dict(data or {})
    if "resolution" in data:
        data["resolution"] = tuple(data["resolution"])
    return cfg_cls(**data)


def config_to_dict(config) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(config).items()}


def build(arch: str, config, in_dim: int, out_dim: int) -> Architecture:
    net_cls, cfg_cls = _lookup(arch)
    if not isinstance(config, cfg_cls):
        raise TypeError(f"{arch} expects {cfg_cls.__name__}, got {type(config).__name__}")
    return net_cls(config, in_dim, out_dim)


@dataclass
class FieldModel:
    arch: str
    config: Any
    in_dim: int
    out_dim: int
    encoder_params: dict[str, np.ndarray] = field(repr=False)
    decoder_params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        self.net = build(self.arch, self.config, self.in_dim, self.out_dim)

    @property
    def coord_range(self) -> tuple[float, float]:
        return self.net.coord_range

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {**self.encoder_params, **self.decoder_params}

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "FieldModel":
        return dataclasses.replace(
            self,
            encoder_params={k: v.astype(dtype) for k, v in self.encoder_params.items()},
            decoder_params={k: v.astype(dtype) for k, v in self.decoder_params.items()},
        )

    def copy(self) -> "FieldModel":
        return dataclasses.replace(
            self,
            encoder_params={k: v.copy() for k, v in self.encoder_params.items()},
            decoder_params={k: v.copy() for k, v in self.decoder_params.items()},
        )


def encoder_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


def decoder_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def init_model(arch: str, config, in_dim: int, out_dim: int, seed: int = 0, budget: int | None = None) -> FieldModel:
    """Randomly initialise a model; encoder and decoder draw from separate streams.

    The separate streams mean a decoder for a given seed is identical whether
    the encoder is later replaced by pretrained weights or not.
    """
    if not 2 <= in_dim <= 5:
        raise ValueError(f"in_dim must be in 2..5, got {in_dim}")
    if out_dim < 1:
        raise ValueError("out_dim must be >= 1")
    net = build(arch, config, in_dim, out_dim)
    count = net.param_count()
    if budget is not None and count > budget * (1 + BUDGET_TOLERANCE):
        raise BudgetError(
            f"{arch} config has {count} parameters, budget is {budget} (+{BUDGET_TOLERANCE:.0%})",
            target=budget, achieved=count,
        )
    return FieldModel(
        arch, config, in_dim, out_dim,
        net.init_encoder(encoder_rng(seed)),
        net.init_decoder(decoder_rng(seed)),
    )


def new_decoder(model: FieldModel, seed: int) -> dict[str, np.ndarray]:
    return model.net.init_decoder(decoder_rng(seed))


def bind(params: dict[str, np.ndarray], tape: ad.Tape, requires_grad: bool = True) -> dict[str, ad.Variable]:
    return {k: tape.leaf(v, requires_grad=requires_grad) for k, v in params.items()}


def check_coords(model: FieldModel, coords: np.ndarray, tol: float = 1e-6):
    lo, hi = model.coord_range
    if coords.ndim != 2 or coords.shape[1] != model.in_dim:
        raise ValueError(f"coords must be (N, {model.in_dim}), got {coords.shape}")
    if coords.shape[0] < 1:
        raise ValueError("need at least one coordinate")
    if coords.min() < lo - tol or coords.max() > hi + tol:
        raise CoordinateRangeError(
            f"{model.arch} expects coordinates in [{lo}, {hi}], got [{coords.min():g}, {coords.max():g}]"
        )


def forward(model: FieldModel, coords, tape: ad.Tape | None = None) -> ad.Variable:
    """Build the model graph on ``tape`` and return the (N, C) output Variable.

    ``coords`` may be an array or a Variable already on ``tape`` (to obtain
    input gradients).  Without a tape, evaluation runs on a non-recording one.
    """
    if isinstance(coords, ad.Variable):
        tape = coords.tape
        x = coords
    else:
        tape = tape or ad.Tape(enabled=False)
        x = tape.const(np.asarray(coords))
    check_coords(model, x.value)
    enc = bind(model.encoder_params, tape)
    dec = bind(model.decoder_params, tape)
    return model.net.decode(dec, model.net.encode(enc, x))


def evaluate(model: FieldModel, coords: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Outputs for ``coords`` as a plain array, chunked in fixed order."""
    out = [forward(model, coords[s:s + chunk]).value for s in range(0, len(coords), chunk)]
    return np.concatenate(out, axis=0)


def input_gradient(model: FieldModel, coords: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """d(output_c)/d(coord_k) for every sample, shape (N, C, d)."""
    coords = np.asarray(coords)
    parts = []
    for s in range(0, len(coords), chunk):
        tape = ad.Tape()
        x = tape.leaf(coords[s:s + chunk])
        y = forward(model, x)
        grads = np.empty((x.shape[0], model.out_dim, model.in_dim), dtype=coords.dtype)
        for c in range(model.out_dim):
            tape.backward(ad.sum(ad.select(y, c, axis=-1)))
            grads[:, c, :] = tape.grad(x)
        parts.append(grads)
    return np.concatenate(parts, axis=0)


def split(model: FieldModel) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    return model.encoder_params, model.decoder_params


# -- budget sizing ------------------------------------------------------------


def _count(arch, config, in_dim, out_dim) -> int:
    return build(arch, config, in_dim, out_dim).param_count()


def _largest_at_most(count_of, target, lo, hi):
    """Largest integer k in [lo, hi] with count_of(k) <= target (count_of monotone)."""
    if count_of(lo) > target:
        return None
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if count_of(mid) <= target:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _nearest(count_of, target, lo, hi):
    k = _largest_at_most(count_of, target, lo, hi)
    if k is None:
        return lo
    if k < hi and abs(count_of(k + 1) - target) < abs(count_of(k) - target):
        return k + 1
    return k


def size_to_budget(arch: str, signal_scalar_count: int, ratio: float, in_dim: int = 2, out_dim: int = 1, base=None):
    """Config whose parameter count is within 5% of ``signal_scalar_count / ratio``.

    The free knob is searched by monotone bisection: hidden width for SIREN,
    table size (then head width) for the hash grid, plane resolution (then
    head width) for K-Planes.
    """
    if ratio <= 0:
        raise ValueError("compression ratio must be positive")
    target = signal_scalar_count / ratio
    _, cfg_cls = _lookup(arch)
    base = base or cfg_cls()
    if arch == "kplanes" and len(base.resolution) != in_dim:
        base = dataclasses.replace(base, resolution=(base.resolution[0],) * in_dim)
    lo_tol, hi_tol = target * (1 - BUDGET_TOLERANCE), target * (1 + BUDGET_TOLERANCE)

    def ok(cfg):
        return cfg is not None and lo_tol <= _count(arch, cfg, in_dim, out_dim) <= hi_tol

    def fail(smallest):
        raise BudgetError(
            f"{arch}: no configuration within 5% of {target:.0f} parameters "
            f"(smallest viable config has {smallest})",
            target=target, achieved=smallest,
        )

    def fit_width(cfg, min_width=2):
        def count_w(w):
            return _count(arch, dataclasses.replace(cfg, mlp_width=w), in_dim, out_dim)
        w = _nearest(count_w, target, min_width, 4096)
        return dataclasses.replace(cfg, mlp_width=w)

    if arch == "siren":
        def count_w(w):
            return _count(arch, dataclasses.replace(base, hidden_width=w), in_dim, out_dim)
        w = _nearest(count_w, target, 2, 1 << 14)
        cfg = dataclasses.replace(base, hidden_width=w)
        if not ok(cfg):
            fail(count_w(2))
        return cfg

    if arch == "hashgrid":
        smallest = _count(arch, dataclasses.replace(base, table_size_log2=1, mlp_width=2), in_dim, out_dim)
        for k in range(30, 0, -1):
            cfg = dataclasses.replace(base, table_size_log2=k)
            tables = build(arch, cfg, in_dim, out_dim).encoder_param_count()
            if tables > target * 2 / 3:
                continue
            cfg = fit_width(cfg)
            if ok(cfg):
                return cfg
        fail(smallest)

    if arch == "kplanes":
        def with_res(r, w=None):
            cfg = dataclasses.replace(base, resolution=(r,) * in_dim)
            return cfg if w is None else dataclasses.replace(cfg, mlp_width=w)

        smallest = _count(arch, with_res(2, 2), in_dim, out_dim)
        r_max = _largest_at_most(lambda r: _count(arch, with_res(r), in_dim, out_dim), target, 2, 1 << 14)
        if r_max is None:
            r_max = 2
        for r in range(r_max, 1, -1):
            cfg = fit_width(with_res(r))
            if ok(cfg):
                return cfg
        fail(smallest)

    raise ValueError(arch)


__all__ = [
    "ARCHITECTURES", "BudgetError", "CoordinateRangeError", "FieldModel",
    "HashGridConfig", "KPlanesConfig", "SirenConfig", "bind", "build", "config_from_dict",
    "config_to_dict", "evaluate", "forward", "init_model", "input_gradient", "mlp_param_count",
    "new_decoder", "size_to_budget", "spatial_hash", "split",
]
