"""Gridded signals on disk, model checkpoints, and results export.

Volume format: ``<name>.f32`` holds little-endian float32 samples, one
variable after another, each in row-major order over ``dims``; ``<name>.json``
is the sidecar descriptor.

Checkpoint format: magic ``XFNF``, a u32 version, then blocks of
``u32 name length | name | u64 payload length | payload``.  The first block
is ``meta`` (UTF-8 JSON); array blocks carry a small header (dtype code, ndim,
u64 shape) followed by raw little-endian bytes.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

VOLUME_VERSION = 1
CHECKPOINT_MAGIC = b"XFNF"
CHECKPOINT_VERSION = 1
MAX_AXES = 5


class DataError(Exception):
    """Base class for data ingestion problems."""


class SizeMismatchError(DataError):
    pass


class MissingSidecarError(DataError, FileNotFoundError):
    pass


class UnknownDtypeError(DataError):
    pass


class NonFiniteDataError(DataError, ValueError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class BlockShapeError(CheckpointError, ValueError):
    pass


@dataclass
class NormMeta:
    vmin: float
    vmax: float
    constant: bool = False


@dataclass
class GridSignal:
    dims: tuple[int, ...]
    variables: list[str]
    data: dict[str, np.ndarray] = field(repr=False)
    spacing: tuple[float, ...] = ()
    axes: tuple[str, ...] = ()
    origin: tuple[float, ...] = ()
    norm_meta: dict[str, NormMeta] | None = None

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if not 1 <= len(self.dims) <= MAX_AXES:
            raise DataError(f"signals need 1..{MAX_AXES} axes, got {len(self.dims)}")
        if any(n < 1 for n in self.dims):
            raise DataError(f"axis sizes must be positive, got {self.dims}")
        if not self.spacing:
            self.spacing = (1.0,) * len(self.dims)
        if not self.origin:
            self.origin = (0.0,) * len(self.dims)
        if not self.axes:
            self.axes = tuple(f"x{i + 1}" for i in range(len(self.dims)))
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(s) for s in self.origin)
        self.axes = tuple(self.axes)
        if len(self.spacing) != len(self.dims) or len(self.axes) != len(self.dims):
            raise DataError("spacing/axes must have one entry per axis")
        if any(s <= 0 for s in self.spacing):
            raise DataError("spacing must be positive")
        missing = [v for v in self.variables if v not in self.data]
        if missing:
            raise DataError(f"no data for variables {missing}")
        for v in self.variables:
            if self.data[v].shape != self.dims:
                raise DataError(f"variable {v!r} has shape {self.data[v].shape}, expected {self.dims}")

    @property
    def n_points(self) -> int:
        return math.prod(self.dims)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def scalar_count(self) -> int:
        return self.n_points * len(self.variables)

    def values(self) -> np.ndarray:
        """All variables as an (N, C) array in row-major grid order."""
        return np.stack([self.data[v].reshape(-1) for v in self.variables], axis=1)

    @classmethod
    def from_array(cls, array, variables=None, **kw) -> "GridSignal":
        """Single-variable signal from an array, or multi-variable from (..., C) with ``variables``."""
        array = np.asarray(array)
        if variables is None:
            return cls(array.shape, ["value"], {"value": array}, **kw)
        return cls(array.shape[:-1], list(variables), {v: array[..., i] for i, v in enumerate(variables)}, **kw)


# -- volumes -------------------------------------------------------------------

_DTYPES = {"float32": "<f4"}


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".f32", ".json") else p
    return stem.with_suffix(".f32"), stem.with_suffix(".json")


def save_volume(grid: GridSignal, path) -> tuple[Path, Path]:
    raw, side = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    desc = {
        "format_version": VOLUME_VERSION,
        "dims": list(grid.dims),
        "axes": list(grid.axes),
        "variables": list(grid.variables),
        "spacing": list(grid.spacing),
        "origin": list(grid.origin),
        "dtype": "float32",
    }
    with open(raw, "wb") as fh:
        for v in grid.variables:
            fh.write(np.ascontiguousarray(grid.data[v], dtype="<f4").tobytes())
    side.write_text(json.dumps(desc, indent=2) + "\n")
    return raw, side


def load_volume(path) -> GridSignal:
    raw, side = _paths(path)
    if not side.exists():
        raise MissingSidecarError(f"missing sidecar descriptor {side}")
    desc = json.loads(side.read_text())
    dtype = desc.get("dtype", "float32")
    if dtype not in _DTYPES:
        raise UnknownDtypeError(f"unsupported dtype {dtype!r} in {side}")
    dims = tuple(int(n) for n in desc["dims"])
    variables = list(desc.get("variables", ["value"]))
    expected = math.prod(dims) * len(variables) * 4
    actual = raw.stat().st_size
    if actual != expected:
        raise SizeMismatchError(f"{raw}: {actual} bytes, expected {expected} for dims {list(dims)} x {len(variables)} variables")
    flat = np.fromfile(raw, dtype=_DTYPES[dtype])
    n = math.prod(dims)
    data = {v: flat[i * n:(i + 1) * n].reshape(dims) for i, v in enumerate(variables)}
    for v, arr in data.items():
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFiniteDataError(f"variable {v!r} has non-finite value at flat index {bad[0]}")
    return GridSignal(
        dims, variables, data,
        spacing=tuple(desc.get("spacing", ())),
        axes=tuple(desc.get("axes", ())),
        origin=tuple(desc.get("origin", ())),
    )


# -- checkpoints -----------------------------------------------------------------

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise CheckpointError(f"cannot store dtype {arr.dtype}")
    head = struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def _unpack_array(buf: bytes) -> np.ndarray:
    code, ndim = struct.unpack_from("<BI", buf, 0)
    shape = struct.unpack_from(f"<{ndim}Q", buf, 5)
    start = 5 + 8 * ndim
    dt = _CODE_DTYPES[code]
    return np.frombuffer(buf[start:], dtype=dt).reshape(shape).copy()


def _write_blocks(path, blocks: Iterable[tuple[str, bytes]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        for name, payload in blocks:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload)


def _read_blocks(path) -> dict[str, bytes]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    pos, blocks = 8, {}
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + nlen].decode()
        pos += 4 + nlen
        (plen,) = struct.unpack_from("<Q", buf, pos)
        blocks[name] = buf[pos + 8:pos + 8 + plen]
        pos += 8 + plen
    return blocks


def save_checkpoint(model, run=None, path="model.ckpt", extra: dict | None = None):
    """Write ``model`` (and optionally optimizer/RNG state from ``run``)."""
    from .fields import config_to_dict

    meta = {
        "arch": model.arch,
        "config": config_to_dict(model.config),
        "in_dim": model.in_dim,
        "out_dim": model.out_dim,
        "encoder": sorted(model.encoder_params),
        "decoder": sorted(model.decoder_params),
        "extra": extra or {},
    }
    blocks = []
    for k in sorted(model.encoder_params):
        blocks.append((f"enc/{k}", _pack_array(model.encoder_params[k])))
    for k in sorted(model.decoder_params):
        blocks.append((f"dec/{k}", _pack_array(model.decoder_params[k])))
    if run is not None:
        meta["run"] = run.to_dict()
        if run.optimizer_state is not None:
            state = run.optimizer_state
            meta["optimizer"] = {"step": state["step"], "names": sorted(state["m"])}
            for k in sorted(state["m"]):
                blocks.append((f"adam_m/{k}", _pack_array(state["m"][k])))
                blocks.append((f"adam_v/{k}", _pack_array(state["v"][k])))
    _write_blocks(path, [("meta", json.dumps(meta).encode())] + blocks)


def load_checkpoint(path):
    """Return ``(model, run)``; ``run`` is None when none was stored."""
    from .fields import FieldModel, config_from_dict
    from .transfer import TrainRun

    blocks = _read_blocks(path)
    meta = json.loads(blocks["meta"].decode())
    config = config_from_dict(meta["arch"], meta["config"])
    enc = {k: _unpack_array(blocks[f"enc/{k}"]) for k in meta["encoder"]}
    dec = {k: _unpack_array(blocks[f"dec/{k}"]) for k in meta["decoder"]}
    model = FieldModel(meta["arch"], config, meta["in_dim"], meta["out_dim"], enc, dec)
    run = None
    if "run" in meta:
        run = TrainRun.from_dict(meta["run"])
        run.model = model
        if "optimizer" in meta:
            names = meta["optimizer"]["names"]
            run.optimizer_state = {
                "step": meta["optimizer"]["step"],
                "m": {k: _unpack_array(blocks[f"adam_m/{k}"]) for k in names},
                "v": {k: _unpack_array(blocks[f"adam_v/{k}"]) for k in names},
            }
    return model, run


def load_encoder(path, into):
    """Copy the encoder block of a checkpoint into model ``into`` (in place)."""
    blocks = _read_blocks(path)
    meta = json.loads(blocks["meta"].decode())
    stored = {k: _unpack_array(blocks[f"enc/{k}"]) for k in meta["encoder"]}
    check_encoder_compatible(stored, into.encoder_params, source=str(path))
    into.encoder_params = {k: stored[k].astype(into.encoder_params[k].dtype) for k in into.encoder_params}
    return into


def check_encoder_compatible(stored: dict, expected: dict, source: str = "encoder"):
    if set(stored) != set(expected):
        raise BlockShapeError(
            f"{source}: encoder block names {sorted(stored)} do not match model {sorted(expected)}"
        )
    for k in expected:
        if stored[k].shape != expected[k].shape:
            raise BlockShapeError(
                f"{source}: encoder block {k!r} has shape {stored[k].shape}, model expects {expected[k].shape}"
            )


# -- results ---------------------------------------------------------------------

RESULT_COLUMNS = ["model", "init", "dataset", "seed", "iteration", "loss", "psnr", "ssim", "grad_rmse"]


@dataclass
class RunRecord:
    model: str
    init: str
    dataset: str
    seed: int
    run: object  # TrainRun


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return str(x)


def write_results(records: list[RunRecord], out_dir, experiment: str = "experiment") -> tuple[Path, Path]:
    """Long-format CSV of every traced iteration plus a JSON summary per run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{experiment}.csv"
    json_path = out_dir / f"{experiment}_summary.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for rec in records:
            run = rec.run
            losses = dict(run.loss_trace)
            last = run.metric_trace[-1][0] if run.metric_trace else None
            for it, p, s in run.metric_trace:
                g = run.final_grad_rmse if it == last else None
                w.writerow([rec.model, rec.init, rec.dataset, rec.seed, it, _fmt(losses.get(it)), _fmt(p), _fmt(s), _fmt(g)])
    summary = []
    for rec in records:
        run = rec.run
        final = run.metric_trace[-1] if run.metric_trace else (None, None, None)
        summary.append({
            "model": rec.model,
            "init": rec.init,
            "dataset": rec.dataset,
            "seed": rec.seed,
            "crossings": run.crossings_dict(),
            "final_iteration": final[0],
            "final_psnr": _json_num(final[1]),
            "final_ssim": _json_num(final[2]),
            "final_grad_rmse": _json_num(run.final_grad_rmse),
            "config_hash": run.config_hash,
        })
    json_path.write_text(json.dumps({"experiment": experiment, "runs": summary}, indent=2) + "\n")
    return csv_path, json_path


def _json_num(x):
    if x is None:
        return None
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return x


def read_results(csv_path) -> list[dict]:
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["iteration"] = int(r["iteration"])
        for k in ("loss", "psnr", "ssim", "grad_rmse"):
            r[k] = float(r[k]) if r[k] != "" else None
    return rows


# -- images ---------------------------------------------------------------------


def to_uint8(img: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    if not vmax > vmin:
        return np.full(img.shape, 127, dtype=np.uint8)
    scaled = (np.asarray(img, dtype=np.float64) - vmin) / (vmax - vmin)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def write_pgm(img8: np.ndarray, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img8, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def _slice_index(dims, axes, picks, free):
    idx = []
    for i, (n, name) in enumerate(zip(dims, axes)):
        if i in free:
            idx.append(slice(None))
            continue
        k = picks.get(name, picks.get(i))
        if k is None:
            raise DataError(f"no pick for axis {name!r}; fix every axis except two")
        if not 0 <= k < n:
            raise DataError(f"pick {k} out of range for axis {name!r} of size {n}")
        idx.append(int(k))
    return tuple(idx)


def export_slice(source, picks: dict, path, variable: str | None = None, grid: GridSignal | None = None,
                 free_axes=(-2, -1), scale: int = 1, png: bool = False) -> np.ndarray:
    """Write a 2D slice as an 8-bit PGM (and optionally PNG); returns the uint8 image.

    ``source`` is a :class:`GridSignal` or a field model.  For a model,
    ``grid`` supplies the axis layout and the slice is sampled at ``scale``
    times the grid resolution along the free axes.  Grid slices are scaled by
    the variable's global min/max; model slices by the normalised [-1, 1]
    output range.
    """
    from .fields import FieldModel, evaluate

    if isinstance(source, GridSignal):
        grid = source
    if grid is None:
        raise DataError("exporting a model slice needs a grid for the axis layout")
    nd = grid.ndim
    free = tuple(sorted(a % nd for a in free_axes))
    variable = variable or grid.variables[0]
    idx = _slice_index(grid.dims, grid.axes, picks, free)
    if isinstance(source, FieldModel):
        from .transfer import axis_coords

        c = grid.variables.index(variable)
        lo, hi = source.coord_range
        per_axis = []
        for i, n in enumerate(grid.dims):
            if i in free:
                per_axis.append(axis_coords(n * scale, lo, hi))
            else:
                per_axis.append(axis_coords(n, lo, hi)[idx[i]:idx[i] + 1])
        mesh = np.meshgrid(*per_axis, indexing="ij")
        coords = np.stack([m.reshape(-1) for m in mesh], axis=1).astype(np.float32)
        out = evaluate(source, coords)[:, c]
        shape = [len(a) for a in per_axis]
        img = out.reshape(shape)[tuple(slice(None) if i in free else 0 for i in range(nd))]
        img8 = to_uint8(img, -1.0, 1.0)
    else:
        data = grid.data[variable]
        img8 = to_uint8(data[idx], float(data.min()), float(data.max()))
    path = Path(path)
    write_pgm(img8, path.with_suffix(".pgm"))
    if png:
        from PIL import Image

        Image.fromarray(img8, mode="L").save(path.with_suffix(".png"))
    return img8
