from __future__ import annotations

import numpy as np

from .. import autodiff as ad


def mlp_param_count(widths) -> int:
    return int(sum(a * b + b for a, b in zip(widths[:-1], widths[1:])))


class Architecture:
    """Encoder/decoder pair behind a :class:`~transfield.fields.FieldModel`.

    Subclasses create parameter blocks and build the forward graph on a tape;
    parameters arrive as dicts of :class:`~transfield.autodiff.Variable`.
    """

    name: str
    coord_range: tuple[float, float] = (0.0, 1.0)

    def __init__(self, config, in_dim: int, out_dim: int):
        self.config = config
        self.in_dim = in_dim
        self.out_dim = out_dim

    def init_encoder(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def init_decoder(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def encode(self, params: dict[str, ad.Variable], x: ad.Variable) -> ad.Variable:
        raise NotImplementedError

    def decode(self, params: dict[str, ad.Variable], h: ad.Variable) -> ad.Variable:
        raise NotImplementedError

    def param_count(self) -> int:
        raise NotImplementedError


class ReluHead:
    """Mixin: ReLU MLP decoder ``feat -> width x layers -> out``."""

    def _head_widths(self, feat_dim):
        c = self.config
        return [feat_dim] + [c.mlp_width] * c.mlp_layers + [self.out_dim]

    def init_decoder(self, rng):
        widths = self._head_widths(self.feature_dim)
        params = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / a) if i < len(widths) - 2 else np.sqrt(1.0 / a)
            params[f"head{i}.weight"] = rng.uniform(-bound, bound, size=(a, b)).astype(np.float32)
            params[f"head{i}.bias"] = np.zeros(b, dtype=np.float32)
        return params

    def decode(self, params, h):
        n = len(self._head_widths(self.feature_dim)) - 1
        for i in range(n):
            h = h @ params[f"head{i}.weight"] + params[f"head{i}.bias"]
            if i < n - 1:
                h = ad.relu(h)
        return h

    def head_param_count(self):
        return mlp_param_count(self._head_widths(self.feature_dim))
