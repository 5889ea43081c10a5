from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .base import Architecture, ReluHead

HASH_PRIMES = np.array([1, 2654435761, 805459861, 3674653429, 2097192037], dtype=np.uint64)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    features_per_level: int = 2
    table_size_log2: int = 12
    base_resolution: int = 4
    max_resolution: int = 128
    mlp_width: int = 32
    mlp_layers: int = 2

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        if self.table_size_log2 < 1:
            raise ValueError("table_size_log2 must be >= 1")
        if not 1 <= self.base_resolution <= self.max_resolution:
            raise ValueError("need 1 <= base_resolution <= max_resolution")
        if self.mlp_layers < 0 or self.mlp_width < 1:
            raise ValueError("invalid MLP head")

    @property
    def table_size(self) -> int:
        return 2**self.table_size_log2

    def resolutions(self) -> list[int]:
        if self.levels == 1:
            return [self.base_resolution]
        growth = np.exp(np.log(self.max_resolution / self.base_resolution) / (self.levels - 1))
        res = [int(np.floor(self.base_resolution * growth**l + 1e-9)) for l in range(self.levels)]
        res[-1] = self.max_resolution
        return res


def spatial_hash(vertices: np.ndarray, table_size: int) -> np.ndarray:
    """XOR of per-axis ``vertex * prime``, reduced mod ``table_size`` (a power of two)."""
    d = vertices.shape[-1]
    if d > len(HASH_PRIMES):
        raise ValueError(f"hash supports up to {len(HASH_PRIMES)} dimensions, got {d}")
    v = vertices.astype(np.uint64)
    h = v[..., 0] * HASH_PRIMES[0]
    for k in range(1, d):
        h ^= v[..., k] * HASH_PRIMES[k]
    return (h & np.uint64(table_size - 1)).astype(np.int64)


class HashGrid(ReluHead, Architecture):
    """Multiresolution hash encoding with a ReLU MLP head.

    Level ``l`` has ``res_l`` cells per axis over [0, 1]; vertex features are
    looked up densely when the level's lattice fits in the table, hashed
    otherwise, and blended multilinearly.
    """

    name = "hashgrid"

    def __init__(self, config: HashGridConfig, in_dim: int, out_dim: int):
        super().__init__(config, in_dim, out_dim)
        self.resolutions = config.resolutions()
        self.feature_dim = config.levels * config.features_per_level
        self._bits = ((np.arange(2**in_dim)[:, None] >> np.arange(in_dim)[None, :]) & 1).astype(np.int64)

    def init_encoder(self, rng):
        c = self.config
        return {
            f"level{l}.table": rng.uniform(-1e-4, 1e-4, size=(c.table_size, c.features_per_level)).astype(np.float32)
            for l in range(c.levels)
        }

    def vertex_index(self, vertices: np.ndarray, res: int) -> np.ndarray:
        T = self.config.table_size
        side = res + 1
        if side**self.in_dim <= T:
            strides = side ** np.arange(self.in_dim, dtype=np.int64)
            return vertices @ strides
        return spatial_hash(vertices, T)

    def encode(self, params, x):
        feats = []
        for l, res in enumerate(self.resolutions):
            pos = x * float(res)
            cell = np.clip(np.floor(pos.value), 0, res - 1)
            frac = pos - cell.astype(pos.dtype)
            verts = cell.astype(np.int64)[:, None, :] + self._bits[None, :, :]
            idx = self.vertex_index(verts, res)
            feats.append(ad.blend(ad.gather(params[f"level{l}.table"], idx), frac))
        return feats[0] if len(feats) == 1 else ad.concat(feats, axis=-1)

    def encoder_param_count(self):
        c = self.config
        return c.levels * c.table_size * c.features_per_level

    def param_count(self):
        return self.encoder_param_count() + self.head_param_count()
