from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .base import Architecture, mlp_param_count


@dataclass(frozen=True)
class SirenConfig:
    hidden_layers: int = 3
    hidden_width: int = 64
    omega0: float = 10.0
    decoder_depth: int = 1

    def __post_init__(self):
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("hidden_layers and hidden_width must be >= 1")
        if not 1 <= self.decoder_depth < self.hidden_layers + 1:
            raise ValueError(
                f"decoder_depth must be in [1, {self.hidden_layers}] for {self.hidden_layers} hidden layers"
            )


class Siren(Architecture):
    """Sine-activated MLP: ``hidden_layers`` sine layers and a linear output.

    Layer ``i`` computes ``sin(omega0 * (h @ W + b))``; the last
    ``decoder_depth`` layers (including the linear output) form the decoder.
    """

    name = "siren"
    coord_range = (-1.0, 1.0)

    def __init__(self, config: SirenConfig, in_dim: int, out_dim: int):
        super().__init__(config, in_dim, out_dim)
        c = config
        self.widths = [in_dim] + [c.hidden_width] * c.hidden_layers + [out_dim]
        self.n_layers = len(self.widths) - 1
        self.first_decoder_layer = self.n_layers - c.decoder_depth

    def _layer_names(self, i):
        return f"layer{i}.weight", f"layer{i}.bias"

    def _init_layer(self, i, rng):
        fan_in, fan_out = self.widths[i], self.widths[i + 1]
        if i == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / self.config.omega0
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=fan_out)
        wn, bn = self._layer_names(i)
        return {wn: w.astype(np.float32), bn: b.astype(np.float32)}

    def init_encoder(self, rng):
        params = {}
        for i in range(self.first_decoder_layer):
            params.update(self._init_layer(i, rng))
        return params

    def init_decoder(self, rng):
        params = {}
        for i in range(self.first_decoder_layer, self.n_layers):
            params.update(self._init_layer(i, rng))
        return params

    def _apply(self, params, h, layers):
        omega = self.config.omega0
        for i in layers:
            wn, bn = self._layer_names(i)
            z = h @ params[wn] + params[bn]
            if i == self.n_layers - 1:
                h = z
            else:
                h = ad.sin(z * omega)
        return h

    def encode(self, params, x):
        return self._apply(params, x, range(self.first_decoder_layer))

    def decode(self, params, h):
        return self._apply(params, h, range(self.first_decoder_layer, self.n_layers))

    def param_count(self):
        return mlp_param_count(self.widths)
