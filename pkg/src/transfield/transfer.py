"""Joint pretraining of a shared encoder and warm-started fitting of new signals.

Pretraining minimises the summed reconstruction loss of M signals that share
one encoder and own one decoder each; fitting a new signal starts from the
pretrained encoder plus a fresh decoder and optimises both.  Random-init
fitting is the M=1 case of the same trainer, so the two paths share batches,
optimizer, and schedule by construction.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fields import FieldModel, bind, config_to_dict, evaluate, init_model, input_gradient
from .io import GridSignal, NonFiniteDataError, NormMeta, check_encoder_compatible
from .metrics import iterations_to_threshold, psnr, ssim, SSIM_WINDOW, gradient_rmse

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    def __init__(self, message, iteration=None):
        self.iteration = iteration
        super().__init__(message)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    iters: int = 4000
    batch: int = 65536
    loss: str = "l1"
    eval_every: int = 1
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    full_batch: bool = False
    psnr_thresholds: tuple[float, ...] = ()
    ssim_thresholds: tuple[float, ...] = ()
    early_stop_psnr: float | None = None
    min_iters: int = 0
    eval_ssim: bool = True
    freeze_encoder: bool = False

    def __post_init__(self):
        for name in ("adam_betas", "psnr_thresholds", "ssim_thresholds"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be 'l1' or 'l2', got {self.loss!r}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)

    def schedule_hash(self) -> str:
        """Hash of everything except the seed; equal across compared init modes."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainRun:
    config: TrainConfig
    loss_trace: list[tuple[int, float]] = field(default_factory=list)
    metric_trace: list[tuple[int, float, float | None]] = field(default_factory=list)
    crossings: dict[tuple[str, float], int | None] = field(default_factory=dict)
    iteration: int = 0
    rng_state: dict | None = None
    final_grad_rmse: float | None = None
    signal_losses: list[float] = field(default_factory=list)
    model: FieldModel | None = field(default=None, repr=False)
    decoders: list[dict] | None = field(default=None, repr=False)
    optimizer_state: dict | None = field(default=None, repr=False)

    @property
    def config_hash(self) -> str:
        return self.config.schedule_hash()

    def psnr_at(self, iteration: int) -> float | None:
        """PSNR recorded at ``iteration`` or, failing that, the last one before it."""
        best = None
        for it, p, _ in self.metric_trace:
            if it <= iteration:
                best = p
        return best

    def update_crossings(self):
        self.crossings = {}
        if not self.metric_trace:
            return
        psnr_trace = [(it, p) for it, p, _ in self.metric_trace]
        ssim_trace = [(it, s) for it, _, s in self.metric_trace]
        for thr in self.config.psnr_thresholds:
            self.crossings[("psnr", thr)] = iterations_to_threshold(psnr_trace, thr)
        for thr in self.config.ssim_thresholds:
            self.crossings[("ssim", thr)] = iterations_to_threshold(ssim_trace, thr)

    def crossings_dict(self) -> dict[str, int | None]:
        return {f"{m}:{t:g}": it for (m, t), it in self.crossings.items()}

    def to_dict(self) -> dict:
        def num(x):
            return "inf" if isinstance(x, float) and math.isinf(x) else x

        return {
            "config": self.config.to_dict(),
            "loss_trace": [[i, float(v)] for i, v in self.loss_trace],
            "metric_trace": [[i, num(p), s] for i, p, s in self.metric_trace],
            "crossings": self.crossings_dict(),
            "iteration": self.iteration,
            "rng_state": self.rng_state,
            "final_grad_rmse": self.final_grad_rmse,
            "signal_losses": self.signal_losses,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRun":
        def num(x):
            return math.inf if x == "inf" else x

        run = cls(
            TrainConfig.from_dict(d["config"]),
            loss_trace=[(int(i), float(v)) for i, v in d["loss_trace"]],
            metric_trace=[(int(i), num(p), s) for i, p, s in d["metric_trace"]],
            iteration=d["iteration"],
            rng_state=d.get("rng_state"),
            final_grad_rmse=d.get("final_grad_rmse"),
            signal_losses=d.get("signal_losses", []),
        )
        run.update_crossings()
        return run


# -- normalisation ------------------------------------------------------------


def coord_range_for(arch: str) -> tuple[float, float]:
    return (-1.0, 1.0) if arch == "siren" else (0.0, 1.0)


def axis_coords(n: int, lo: float, hi: float) -> np.ndarray:
    if n == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, n)


def normalize_coords(grid: GridSignal, arch: str, dtype=np.float64) -> np.ndarray:
    """Row-major (N, d) coordinates mapped to [-1, 1] (SIREN) or [0, 1] (others)."""
    lo, hi = coord_range_for(arch)
    axes = [axis_coords(n, lo, hi) for n in grid.dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1).astype(dtype)


def normalize_outputs(grid: GridSignal) -> tuple[GridSignal, dict[str, tuple[float, float]]]:
    """Scale each variable to [-1, 1] by its global min/max; constants become 0."""
    data, meta, ranges = {}, {}, {}
    for v in grid.variables:
        arr = np.asarray(grid.data[v])
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFiniteDataError(f"variable {v!r} has non-finite value at flat index {bad[0]}")
        vmin, vmax = float(arr.min()), float(arr.max())
        if vmax > vmin:
            data[v] = (2.0 * (arr - vmin) / (vmax - vmin) - 1.0).astype(arr.dtype)
            meta[v] = NormMeta(vmin, vmax, False)
        else:
            data[v] = np.zeros_like(arr)
            meta[v] = NormMeta(vmin, vmax, True)
        ranges[v] = (vmin, vmax)
    scaled = dataclasses.replace(grid, data=data, norm_meta=meta)
    return scaled, ranges


def denormalize(values: np.ndarray, meta: NormMeta) -> np.ndarray:
    if meta.constant:
        return np.full_like(values, meta.vmin)
    return (np.asarray(values) + 1.0) * 0.5 * (meta.vmax - meta.vmin) + meta.vmin


# -- pieces of a training step ---------------------------------------------------


def _sample_indices(n: int, batch: int, rng: np.random.Generator, full: bool = False) -> np.ndarray:
    if n < 1:
        raise ValueError("cannot sample from an empty grid")
    if full:
        return np.arange(n)
    return rng.integers(0, n, size=batch)


def sample_batch(grid: GridSignal, batch: int, rng: np.random.Generator, arch: str = "siren",
                 full_grid: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Uniform i.i.d. sample with replacement; ``full_grid`` returns every point once."""
    idx = _sample_indices(grid.n_points, batch, rng, full_grid)
    return normalize_coords(grid, arch)[idx], grid.values()[idx]


def loss(pred: ad.Variable, target, kind: str = "l1") -> ad.Variable:
    target_arr = target.value if isinstance(target, ad.Variable) else np.asarray(target)
    if pred.shape != target_arr.shape:
        raise ValueError(f"loss: shape mismatch {pred.shape} vs {target_arr.shape}")
    diff = pred - target
    if kind == "l1":
        return ad.mean(ad.absolute(diff))
    if kind == "l2":
        return ad.mean(diff * diff)
    raise ValueError(f"unknown loss {kind!r}")


def adam_step(params: dict, grads: dict, moments: dict, step: int, config: TrainConfig):
    """In-place bias-corrected Adam update of ``params``; returns ``(params, moments)``."""
    if step < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = config.adam_betas
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    m, v = moments["m"], moments["v"]
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r}", iteration=step)
        p = params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        m[k] = b1 * m[k] + (1 - b1) * g
        v[k] = b2 * v[k] + (1 - b2) * (g * g)
        mhat = m[k] / c1 if c1 > 0 else m[k]
        vhat = v[k] / c2 if c2 > 0 else v[k]
        p -= (config.lr * mhat / (np.sqrt(vhat) + config.adam_eps)).astype(p.dtype)
    return params, moments


# -- trainer -----------------------------------------------------------------------


@dataclass
class _Prepared:
    grid: GridSignal
    coords: np.ndarray
    values: np.ndarray


def _prepare(signal: GridSignal, arch: str) -> _Prepared:
    grid = signal if signal.norm_meta is not None else normalize_outputs(signal)[0]
    return _Prepared(grid, normalize_coords(grid, arch, np.float32), grid.values().astype(np.float32))


class SharedTrainer:
    """One shared encoder, one decoder per signal, Adam on all of them.

    Every decoder starts from the same draw (the seed's decoder stream), so
    M identical signals train identically and a fresh decoder for a new
    signal matches the random-init baseline's decoder.
    """

    def __init__(self, signals, arch: str, arch_config, config: TrainConfig, encoder_init: dict | None = None):
        signals = list(signals)
        if not signals:
            raise ValueError("need at least one signal")
        in_dims = {s.ndim for s in signals}
        out_dims = {len(s.variables) for s in signals}
        if len(in_dims) != 1 or len(out_dims) != 1:
            raise ValueError(f"signals disagree on dimensions: in {sorted(in_dims)}, out {sorted(out_dims)}")
        self.arch = arch
        self.config = config
        self.data = [_prepare(s, arch) for s in signals]
        template = init_model(arch, arch_config, in_dims.pop(), out_dims.pop(), seed=config.seed)
        self.template = template
        self.net = template.net
        if encoder_init is not None:
            check_encoder_compatible(encoder_init, template.encoder_params)
            self.encoder = {k: np.array(encoder_init[k], dtype=template.encoder_params[k].dtype) for k in template.encoder_params}
        else:
            self.encoder = template.encoder_params
        self.decoders = [{k: v.copy() for k, v in template.decoder_params.items()} for _ in signals]
        self.step = 0
        self.rng = np.random.default_rng([config.seed, 2])
        names = self._param_names()
        flat = self._flat_params()
        self.moments = {"m": {k: np.zeros_like(flat[k]) for k in names}, "v": {k: np.zeros_like(flat[k]) for k in names}}
        self.run = TrainRun(config)

    # parameter bookkeeping -------------------------------------------------------
    def _flat_params(self) -> dict[str, np.ndarray]:
        flat = {f"enc/{k}": v for k, v in self.encoder.items()}
        for j, dec in enumerate(self.decoders):
            flat.update({f"dec{j}/{k}": v for k, v in dec.items()})
        return flat

    def _param_names(self) -> list[str]:
        names = list(self._flat_params())
        if self.config.freeze_encoder:
            names = [n for n in names if not n.startswith("enc/")]
        return names

    def model(self, j: int = 0) -> FieldModel:
        t = self.template
        return FieldModel(t.arch, t.config, t.in_dim, t.out_dim, self.encoder, self.decoders[j])

    # training --------------------------------------------------------------------
    def train_step(self) -> float:
        cfg = self.config
        tape = ad.Tape()
        enc = bind(self.encoder, tape, requires_grad=not cfg.freeze_encoder)
        decs = [bind(d, tape) for d in self.decoders]
        total = None
        for j, prep in enumerate(self.data):
            idx = _sample_indices(len(prep.coords), cfg.batch, self.rng, cfg.full_batch)
            x = tape.const(prep.coords[idx])
            y = self.net.decode(decs[j], self.net.encode(enc, x))
            lj = loss(y, prep.values[idx], cfg.loss)
            total = lj if total is None else total + lj
        value = float(total.value)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at iteration {self.step + 1}", iteration=self.step + 1)
        tape.backward(total)
        grads = {}
        if not cfg.freeze_encoder:
            grads.update({f"enc/{k}": tape.grad(v) for k, v in enc.items()})
        for j, dv in enumerate(decs):
            grads.update({f"dec{j}/{k}": tape.grad(v) for k, v in dv.items()})
        self.step += 1
        adam_step(self._flat_params(), grads, self.moments, self.step, cfg)
        self.run.loss_trace.append((self.step, value))
        return value

    def evaluate(self) -> tuple[float, float | None, list[float]]:
        """Full-grid PSNR/SSIM averaged over signals and variables, plus per-signal loss."""
        ps, ss, losses = [], [], []
        for j, prep in enumerate(self.data):
            pred = evaluate(self.model(j), prep.coords)
            diff = pred.astype(np.float64) - prep.values
            losses.append(float(np.mean(np.abs(diff)) if self.config.loss == "l1" else np.mean(diff * diff)))
            dims = prep.grid.dims
            for c in range(prep.values.shape[1]):
                p = pred[:, c].reshape(dims)
                t = prep.values[:, c].reshape(dims)
                ps.append(psnr(p, t))
                if self.config.eval_ssim and len(dims) >= 2 and min(dims[-2:]) >= SSIM_WINDOW:
                    ss.append(ssim(p, t))
        return float(np.mean(ps)), (float(np.mean(ss)) if ss else None), losses

    def _record_eval(self):
        p, s, losses = self.evaluate()
        self.run.metric_trace.append((self.step, p, s))
        self.run.signal_losses = losses
        return p

    def train(self, until: int | None = None) -> TrainRun:
        cfg = self.config
        until = cfg.iters if until is None else until
        if not self.run.metric_trace:
            p = self._record_eval()
        else:
            p = self.run.metric_trace[-1][1]
        while self.step < until:
            if cfg.early_stop_psnr is not None and self.step >= cfg.min_iters and p >= cfg.early_stop_psnr:
                break
            self.train_step()
            if self.step % cfg.eval_every == 0 or self.step == until:
                p = self._record_eval()
        return self.finish()

    def finish(self) -> TrainRun:
        run = self.run
        run.iteration = self.step
        run.rng_state = self.rng.bit_generator.state
        run.model = self.model(0)
        run.decoders = self.decoders
        run.optimizer_state = {"step": self.step, "m": self.moments["m"], "v": self.moments["v"]}
        run.update_crossings()
        return run

    def gradient_error(self, grad_truth: np.ndarray, j: int = 0) -> float:
        """RMSE of input gradients against ``grad_truth`` (N, C, d), both per [-1, 1] coordinate."""
        model = self.model(j)
        lo, hi = model.coord_range
        pred = input_gradient(model, self.data[j].coords) * ((hi - lo) / 2.0)
        return gradient_rmse(pred, grad_truth)

    @classmethod
    def resume(cls, signal: GridSignal, model: FieldModel, run: TrainRun, config: TrainConfig | None = None):
        """Continue a single-signal run saved with its optimizer and RNG state."""
        config = config or run.config
        trainer = cls([signal], model.arch, model.config, config, encoder_init=model.encoder_params)
        trainer.decoders = [{k: v.copy() for k, v in model.decoder_params.items()}]
        state = run.optimizer_state
        if state is None or run.rng_state is None:
            raise ValueError("run carries no optimizer/RNG state to resume from")
        trainer.step = state["step"]
        trainer.moments = {
            "m": {k: v.copy() for k, v in state["m"].items()},
            "v": {k: v.copy() for k, v in state["v"].items()},
        }
        trainer.rng.bit_generator.state = run.rng_state
        trainer.run = TrainRun(config, list(run.loss_trace), list(run.metric_trace))
        return trainer


def pretrain_joint(signals, arch: str, arch_config, config: TrainConfig):
    """Train one encoder and one decoder per signal; returns ``(encoder, decoders, run)``."""
    trainer = SharedTrainer(signals, arch, arch_config, config)
    run = trainer.train()
    log.info("pretrained %s on %d signals: %d iters, psnr %.2f", arch, len(trainer.data), run.iteration,
             run.metric_trace[-1][1])
    return trainer.encoder, trainer.decoders, run


def fit_new(signal: GridSignal, encoder_init: dict | None, arch: str, arch_config, config: TrainConfig,
            grad_truth: np.ndarray | None = None) -> TrainRun:
    """Fit one signal from a pretrained encoder (or from scratch when ``encoder_init`` is None)."""
    trainer = SharedTrainer([signal], arch, arch_config, config, encoder_init=encoder_init)
    run = trainer.train()
    if grad_truth is not None:
        run.final_grad_rmse = trainer.gradient_error(grad_truth)
    return run


__all__ = [
    "NumericError", "SharedTrainer", "TrainConfig", "TrainRun", "adam_step", "axis_coords",
    "config_to_dict", "coord_range_for", "denormalize", "fit_new", "loss", "normalize_coords",
    "normalize_outputs", "pretrain_joint", "sample_batch",
]
