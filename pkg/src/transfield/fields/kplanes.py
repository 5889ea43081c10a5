from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .. import autodiff as ad
from .base import Architecture, ReluHead


@dataclass(frozen=True)
class KPlanesConfig:
    # one grid size per input axis; plane (i, j) is resolution[i] x resolution[j]
    resolution: tuple[int, ...] = (64, 64)
    feature_dim: int = 16
    combination: str = "hadamard"
    mlp_width: int = 32
    mlp_layers: int = 2
    init_mean: float = 0.1
    init_spread: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if any(r < 2 for r in self.resolution):
            raise ValueError("plane resolution must be >= 2 per axis")
        if self.combination != "hadamard":
            raise ValueError(f"unsupported combination {self.combination!r}")
        if self.feature_dim < 1 or self.mlp_width < 1 or self.mlp_layers < 0:
            raise ValueError("invalid feature/head sizes")


class KPlanes(ReluHead, Architecture):
    """Factorized planes over every coordinate pair, combined by Hadamard product."""

    name = "kplanes"

    def __init__(self, config: KPlanesConfig, in_dim: int, out_dim: int):
        if len(config.resolution) != in_dim:
            raise ValueError(f"need {in_dim} per-axis resolutions, got {len(config.resolution)}")
        super().__init__(config, in_dim, out_dim)
        self.pairs = list(combinations(range(in_dim), 2))
        self.feature_dim = config.feature_dim
        self._bits = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.int64)

    def init_encoder(self, rng):
        c = self.config
        lo, hi = c.init_mean - c.init_spread, c.init_mean + c.init_spread
        return {
            f"plane{i}{j}": rng.uniform(lo, hi, size=(c.resolution[i] * c.resolution[j], c.feature_dim)).astype(np.float32)
            for i, j in self.pairs
        }

    def encode(self, params, x):
        c = self.config
        out = None
        for i, j in self.pairs:
            ri, rj = c.resolution[i], c.resolution[j]
            scale = np.array([ri - 1, rj - 1], dtype=x.dtype)
            pos = ad.select(x, [i, j], axis=-1) * scale
            cell = np.clip(np.floor(pos.value), 0, scale - 1)
            frac = pos - cell.astype(x.dtype)
            verts = cell.astype(np.int64)[:, None, :] + self._bits[None, :, :]
            idx = verts[..., 0] * rj + verts[..., 1]
            feat = ad.blend(ad.gather(params[f"plane{i}{j}"], idx), frac)
            out = feat if out is None else out * feat
        return out

    def encoder_param_count(self):
        c = self.config
        return sum(c.resolution[i] * c.resolution[j] for i, j in self.pairs) * c.feature_dim

    def param_count(self):
        return self.encoder_param_count() + self.head_param_count()
