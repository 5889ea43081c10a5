"""Command-line experiment driver: synth, pretrain, fit, eval, report.

Every command takes an optional JSON experiment config; flags override its
fields.  The resolved config is written next to the outputs so any run can
be repeated from its directory alone.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fields as F
from . import io as tio
from . import metrics, plotting, synth
from .transfer import NumericError, SharedTrainer, TrainConfig, normalize_coords, normalize_outputs, pretrain_joint

log = logging.getLogger("transfield")

SCHEMA_VERSION = 1
THREADS_ENV = "TRANSFIELD_THREADS"
INIT_MODES = ("random", "pretrain:t0", "pretrain:joint", "pretrain:path")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything one comparison needs.  ``dataset`` holds exactly one of
    ``toy`` (a toy-sequence config), ``manifest`` (a synth manifest path) or
    ``volumes`` (list of volume paths, with optional ``gradients``)."""

    name: str = "experiment"
    dataset: dict = field(default_factory=lambda: {"toy": {}})
    train_indices: list[int] | None = None
    target_index: int | None = None
    arch: str = "siren"
    arch_config: dict | None = None
    compression_ratio: float = 2.0
    train: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    pretrain_seed: int = 1000
    init_modes: list[str] = field(default_factory=lambda: ["random", "pretrain:t0", "pretrain:joint"])
    encoder_path: str | None = None
    thresholds: dict = field(default_factory=lambda: {"psnr": [30.0, 40.0], "ssim": []})
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    snapshot_iters: list[int] | None = None
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if self.arch not in F.ARCHITECTURES:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {sorted(F.ARCHITECTURES)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not (self.thresholds.get("psnr") or self.thresholds.get("ssim")):
            raise ConfigError("thresholds must be non-empty")
        bad = [m for m in self.init_modes if m not in INIT_MODES]
        if bad or not self.init_modes:
            raise ConfigError(f"init modes {bad or '[]'} invalid; choose from {INIT_MODES}")
        if "pretrain:path" in self.init_modes and not self.encoder_path:
            raise ConfigError("init mode 'pretrain:path' needs encoder_path")
        keys = {"toy", "manifest", "volumes"} & set(self.dataset)
        if len(keys) != 1:
            raise ConfigError("dataset must name exactly one of 'toy', 'manifest', 'volumes'")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def train_config(self, seed: int = 0, freeze: bool | None = None) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("psnr_thresholds", self.thresholds.get("psnr", []))
        d.setdefault("ssim_thresholds", self.thresholds.get("ssim", []))
        d["seed"] = seed
        if freeze is not None:
            d["freeze_encoder"] = freeze
        try:
            return TrainConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None

    def pretrain_config(self) -> TrainConfig:
        d = {k: v for k, v in self.train.items() if k not in ("early_stop_psnr", "min_iters", "freeze_encoder")}
        d.update(self.pretrain)
        d["seed"] = self.pretrain_seed
        try:
            return TrainConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad pretrain config: {exc}") from None


# -- datasets ------------------------------------------------------------------------


@dataclass
class Dataset:
    name: str
    signals: list[tio.GridSignal]
    gradients: list[tio.GridSignal | None]


def _toy_signals(seq: synth.ToySequence):
    cfg = seq.config
    lo, hi = cfg.domain
    spacing = tuple((hi - lo) / max(n - 1, 1) for n in cfg.grid)
    meta = dict(axes=("x1", "x2"), spacing=spacing, origin=(lo, lo))
    sigs = [tio.GridSignal.from_array(seq.fields[t].astype(np.float32), **meta) for t in range(cfg.T)]
    grads = [tio.GridSignal.from_array(seq.analytic_grads[t].astype(np.float32), variables=["d_x1", "d_x2"], **meta)
             for t in range(cfg.T)]
    return sigs, grads


def load_dataset(cfg: ExperimentConfig, base: Path | None = None) -> Dataset:
    spec = cfg.dataset
    base = base or Path(".")
    if "toy" in spec:
        try:
            toy = synth.ToySequenceConfig.from_dict(spec["toy"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad toy config: {exc}") from None
        sigs, grads = _toy_signals(synth.generate_sequence(toy))
        return Dataset(f"toy-{toy.transform}", sigs, grads)
    if "manifest" in spec:
        path = base / spec["manifest"]
        if not path.exists():
            raise tio.DataError(f"manifest {path} not found")
        man = json.loads(path.read_text())
        root = path.parent
        sigs = [tio.load_volume(root / e["field"]) for e in man["timesteps"]]
        grads = [tio.load_volume(root / e["gradient"]) if e.get("gradient") else None for e in man["timesteps"]]
        return Dataset(man.get("name", path.parent.name), sigs, grads)
    paths = spec["volumes"]
    grad_paths = spec.get("gradients") or [None] * len(paths)
    sigs = [tio.load_volume(base / p) for p in paths]
    grads = [tio.load_volume(base / g) if g else None for g in grad_paths]
    return Dataset(spec.get("name", "volumes"), sigs, grads)


def split_indices(cfg: ExperimentConfig, n: int) -> tuple[list[int], int]:
    target = n - 1 if cfg.target_index is None else cfg.target_index
    train = [i for i in range(n) if i != target] if cfg.train_indices is None else list(cfg.train_indices)
    if not 0 <= target < n or any(not 0 <= i < n for i in train):
        raise ConfigError(f"signal indices out of range for {n} signals")
    return train, target


def normalized_gradient(field_sig: tio.GridSignal, grad_sig: tio.GridSignal) -> np.ndarray:
    """Physical gradient rescaled to the normalised field per [-1, 1] coordinate, shape (N, 1, d)."""
    f = field_sig.data[field_sig.variables[0]].astype(np.float64)
    span = float(f.max() - f.min())
    if span == 0:
        return np.zeros((field_sig.n_points, 1, field_sig.ndim))
    extent = [s * (n - 1) / 2.0 if n > 1 else 0.0 for s, n in zip(field_sig.spacing, field_sig.dims)]
    g = np.stack([grad_sig.data[v].astype(np.float64) for v in grad_sig.variables], axis=-1)
    return (g * (2.0 / span) * np.array(extent)).reshape(-1, 1, field_sig.ndim)


def resolve_arch_config(cfg: ExperimentConfig, signal: tio.GridSignal):
    if cfg.arch_config is not None:
        try:
            return F.config_from_dict(cfg.arch, cfg.arch_config)
        except TypeError as exc:
            raise ConfigError(f"bad arch_config: {exc}") from None
    return F.size_to_budget(cfg.arch, signal.scalar_count, cfg.compression_ratio,
                            in_dim=signal.ndim, out_dim=len(signal.variables))


# -- helpers ---------------------------------------------------------------------------


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _mode_dir(mode: str) -> str:
    return mode.replace(":", "_")


def _centre_picks(grid: tio.GridSignal) -> dict:
    return {i: n // 2 for i, n in enumerate(grid.dims[:-2])}


def _pretrain(cfg: ExperimentConfig, ds: Dataset, indices: list[int], arch_config, out: Path):
    if not indices:
        raise ConfigError("pretraining needs at least one signal")
    signals = [ds.signals[i] for i in indices]
    tc = cfg.pretrain_config()
    encoder, decoders, run = pretrain_joint(signals, cfg.arch, arch_config, tc)
    tmpl = run.model
    enc_model = F.FieldModel(tmpl.arch, tmpl.config, tmpl.in_dim, tmpl.out_dim, encoder, decoders[0])
    tio.save_checkpoint(enc_model, run, out / "encoder.ckpt", extra={"signals": indices, "dataset": ds.name})
    for j, dec in enumerate(decoders):
        model = F.FieldModel(tmpl.arch, tmpl.config, tmpl.in_dim, tmpl.out_dim, encoder, dec)
        tio.save_checkpoint(model, None, out / f"decoder_{j}.ckpt", extra={"signal": indices[j]})
    _write_json(out / "run.json", run.to_dict())
    return encoder


def _encoder_from(path) -> dict:
    model, _ = tio.load_checkpoint(path)
    return model.encoder_params


# -- commands --------------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, out: Path) -> Path:
    """Write every timestep of a toy sequence as a volume plus its analytic gradient."""
    if "toy" not in cfg.dataset:
        raise ConfigError("synth needs a 'toy' dataset")
    try:
        toy = synth.ToySequenceConfig.from_dict(cfg.dataset["toy"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    seq = synth.generate_sequence(toy)
    sigs, grads = _toy_signals(seq)
    entries = []
    for t, (s, g) in enumerate(zip(sigs, grads)):
        tio.save_volume(s, out / f"t{t}.f32")
        tio.save_volume(g, out / f"t{t}_grad.f32")
        entries.append({"t": t, "field": f"t{t}.f32", "gradient": f"t{t}_grad.f32"})
    manifest = {"format_version": 1, "name": f"toy-{toy.transform}", "config": toy.to_dict(), "timesteps": entries}
    _write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def cmd_pretrain(cfg: ExperimentConfig, out: Path, mode: str = "joint", base: Path | None = None) -> Path:
    ds = load_dataset(cfg, base)
    train, target = split_indices(cfg, len(ds.signals))
    indices = train[:1] if mode == "t0" else train
    arch_config = resolve_arch_config(cfg, ds.signals[target])
    _save_config(cfg, arch_config, out)
    _pretrain(cfg, ds, indices, arch_config, out)
    return out / "encoder.ckpt"


def _save_config(cfg: ExperimentConfig, arch_config, out: Path):
    d = cfg.to_dict()
    d["arch_config"] = F.config_to_dict(arch_config)
    _write_json(out / "config.json", d)


def _snapshots(cfg: ExperimentConfig, tc: TrainConfig) -> list[int]:
    snaps = cfg.snapshot_iters if cfg.snapshot_iters is not None else [tc.iters // 10, tc.iters]
    return sorted({min(max(int(s), 0), tc.iters) for s in snaps} | {tc.iters})


def cmd_fit(cfg: ExperimentConfig, out: Path, freeze: bool | None = None, base: Path | None = None) -> list:
    """Fit the target signal once per init mode and seed under one shared schedule."""
    ds = load_dataset(cfg, base)
    train, target = split_indices(cfg, len(ds.signals))
    signal = ds.signals[target]
    arch_config = resolve_arch_config(cfg, signal)
    _save_config(cfg, arch_config, out)
    grad_truth = normalized_gradient(signal, ds.gradients[target]) if ds.gradients[target] is not None else None

    encoders = {}
    for mode in cfg.init_modes:
        if mode == "random":
            encoders[mode] = None
        elif mode == "pretrain:path":
            encoders[mode] = _encoder_from(base / cfg.encoder_path if base else cfg.encoder_path)
        else:
            idx = train[:1] if mode == "pretrain:t0" else train
            encoders[mode] = _pretrain(cfg, ds, idx, arch_config, out / "pretrain" / _mode_dir(mode))

    records, hashes = [], set()
    for mode in cfg.init_modes:
        for seed in cfg.seeds:
            tc = cfg.train_config(seed, freeze)
            hashes.add(tc.schedule_hash())
            if len(hashes) != 1:
                raise ConfigError("init modes would train with different hyperparameters")
            run_dir = out / "fit" / _mode_dir(mode) / f"seed_{seed}"
            trainer = SharedTrainer([signal], cfg.arch, arch_config, tc, encoder_init=encoders[mode])
            for k in _snapshots(cfg, tc):
                trainer.train(until=k)
                tio.export_slice(trainer.model(0), _centre_picks(signal), run_dir / "slices" / f"iter_{k:06d}",
                                 grid=signal, png=True)
            run = trainer.finish()
            if grad_truth is not None:
                run.final_grad_rmse = trainer.gradient_error(grad_truth)
            tio.save_checkpoint(run.model, run, run_dir / "final.ckpt", extra={"init": mode, "dataset": ds.name})
            _write_json(run_dir / "run.json", run.to_dict())
            records.append(tio.RunRecord(cfg.arch, mode, ds.name, seed, run))
            log.info("%s seed %d: %s", mode, seed, run.crossings_dict())
    tio.write_results(records, out, cfg.name)
    return records


def cmd_eval(checkpoint: Path, target: Path, gradient: Path | None = None) -> dict:
    model, _ = tio.load_checkpoint(checkpoint)
    sig = tio.load_volume(target)
    grid, _ = normalize_outputs(sig)
    coords = normalize_coords(grid, model.arch, np.float32)
    if coords.shape[1] != model.in_dim or len(grid.variables) != model.out_dim:
        raise tio.DataError(f"target has {coords.shape[1]} axes/{len(grid.variables)} variables, "
                            f"model expects {model.in_dim}/{model.out_dim}")
    pred = F.evaluate(model, coords)
    rep = metrics.report(pred, grid.values(), grid.dims, grid.variables)
    if gradient is not None:
        lo, hi = model.coord_range
        g = F.input_gradient(model, coords) * ((hi - lo) / 2.0)
        rep.grad_rmse = metrics.gradient_rmse(g, normalized_gradient(sig, tio.load_volume(gradient)))
    return rep.to_dict()


def cmd_report(run_dir: Path) -> Path:
    """Tables, PSNR curves and slice panels for every results file under ``run_dir``."""
    summaries = sorted(p for p in Path(run_dir).rglob("*_summary.json") if "report" not in p.parts)
    if not summaries:
        raise tio.DataError(f"no results found under {run_dir}")
    runs, rows = [], []
    for s in summaries:
        runs.extend(json.loads(s.read_text())["runs"])
        rows.extend(tio.read_results(s.with_name(s.name.replace("_summary.json", ".csv"))))
    for (model, dataset) in {(r["model"], r["dataset"]) for r in runs}:
        hashes = {r["config_hash"] for r in runs if r["model"] == model and r["dataset"] == dataset}
        if len(hashes) > 1:
            raise ConfigError(f"runs for {model}/{dataset} used different schedules; refusing to compare")
    out = Path(run_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    header, table = plotting.threshold_table(runs)
    (out / "table.md").write_text(plotting.markdown_table(header, table))
    plotting.write_csv_table(header, table, out / "table.csv")
    curves = plotting.psnr_curves(rows)
    plotting.write_curves_csv(curves, out / "curves.csv")
    thresholds = sorted({float(k.split(":")[1]) for r in runs for k in r["crossings"] if k.startswith("psnr")})
    plotting.plot_psnr_curves(curves, out / "psnr_curves.png", thresholds)
    slices = plotting.collect_slices(Path(run_dir))
    if slices:
        plotting.plot_slices(slices, out / "slices.png")
    return out


# -- argument parsing ----------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--arch", choices=sorted(F.ARCHITECTURES))
    p.add_argument("--ratio", type=float, help="compression ratio used to size the model")
    p.add_argument("--transform", choices=synth.TRANSFORMS)
    p.add_argument("--T", type=int, help="number of toy timesteps")
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--full-batch", action="store_true", default=None)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--thresholds", type=float, nargs="+", help="PSNR thresholds")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="transfield", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="write a toy sequence as volumes + manifest")
    _common(p)
    p = sub.add_parser("pretrain", help="pretrain a shared encoder")
    _common(p)
    p.add_argument("--mode", choices=["joint", "t0"], default="joint")
    p = sub.add_parser("fit", help="fit the target signal for each init mode and seed")
    _common(p)
    p.add_argument("--init-modes", nargs="+", choices=INIT_MODES)
    p.add_argument("--encoder", help="encoder checkpoint for pretrain:path")
    p.add_argument("--freeze-encoder", action="store_true", default=None)
    p = sub.add_parser("eval", help="metrics of a checkpoint against a volume")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("target", type=Path)
    p.add_argument("--gradient", type=Path)
    p.add_argument("--out", type=Path)
    p = sub.add_parser("report", help="tables and figures from a finished run directory")
    p.add_argument("run_dir", type=Path)
    return ap


def config_from_args(args) -> tuple[ExperimentConfig, Path | None]:
    data, base = {}, None
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config {args.config} not found")
        try:
            data = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        base = args.config.parent
    data = json.loads(json.dumps(data))
    for flag, key in (("arch", "arch"), ("ratio", "compression_ratio"), ("seeds", "seeds")):
        if getattr(args, flag, None) is not None:
            data[key] = getattr(args, flag)
    if getattr(args, "init_modes", None):
        data["init_modes"] = args.init_modes
    if getattr(args, "encoder", None):
        data["encoder_path"] = args.encoder
        base = None
    train = data.setdefault("train", {})
    for flag in ("iters", "lr", "batch", "full_batch"):
        if getattr(args, flag, None) is not None:
            train[flag] = getattr(args, flag)
    if getattr(args, "thresholds", None):
        data["thresholds"] = {"psnr": args.thresholds, "ssim": data.get("thresholds", {}).get("ssim", [])}
    toy_flags = {"transform": args.transform, "T": args.T, "grid": args.grid}
    if any(v is not None for v in toy_flags.values()):
        ds = data.setdefault("dataset", {"toy": {}})
        if "toy" not in ds:
            raise ConfigError("--transform/--T/--grid apply only to toy datasets")
        ds["toy"].update({k: v for k, v in toy_flags.items() if v is not None})
    if args.out is not None:
        data["output_dir"] = str(args.out)
    try:
        return ExperimentConfig.from_dict(data), base
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _apply_threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(int(n))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {n!r}") from None


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    _apply_threads()
    if args.command == "report":
        out = cmd_report(args.run_dir)
        print((out / "table.md").read_text(), end="")
        return EXIT_OK
    if args.command == "eval":
        result = cmd_eval(args.checkpoint, args.target, args.gradient)
        text = json.dumps(result, indent=2, sort_keys=True)
        if args.out:
            args.out.write_text(text + "\n")
        print(text)
        return EXIT_OK
    cfg, base = config_from_args(args)
    out = Path(cfg.output_dir)
    if args.command == "synth":
        print(cmd_synth(cfg, out))
    elif args.command == "pretrain":
        print(cmd_pretrain(cfg, out, args.mode, base))
    else:
        records = cmd_fit(cfg, out, args.freeze_encoder, base)
        print(f"{len(records)} runs written to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (tio.DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
