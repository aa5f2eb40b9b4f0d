"""On-disk formats: ensembles, observable CSVs, checkpoints, configs, manifests.

Ensemble (little-endian)::

    b"LFLOW01" | u32 Lx | u32 Ly | u32 n_configs | f64 beta | n_configs * (2*Lx*Ly f64)

frames in ``[mu][nx][ny]`` order.

Checkpoint (little-endian)::

    b"LFCK01" | u32 version | u32 header_len | header (UTF-8 JSON)
    | u32 n_params | n_params * (u32 name_len | name | u32 rank | rank * u32 dim | f64 data)

The JSON header holds the architecture descriptor (layer count, hidden
channels, kernel size, mask pattern) plus training metadata. Adam moments
are stored as ordinary tensors named ``adam.m/<param>`` and ``adam.v/<param>``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable

import numpy as np

from . import flow
from .hmc import ChainRecord
from .training import AdamState, Checkpoint

ENSEMBLE_MAGIC = b"LFLOW01"
CHECKPOINT_MAGIC = b"LFCK01"
CHECKPOINT_VERSION = 1
CSV_HEADER = ["traj", "action", "avg_plaq", "charge", "dH", "accept"]
TRAIN_LOG_HEADER = ["epoch", "loss", "ess", "mean_logq", "mean_action", "seconds"]


class FormatError(ValueError):
    """A file does not match the expected on-disk layout."""


@contextmanager
def atomic_writer(path, mode: str = "wb"):
    """Write to a temp file in the target directory and rename on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"newline": "", "encoding": "utf-8"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ----------------------------------------------------------------- ensembles

def write_ensemble(path, configs: np.ndarray, beta: float) -> None:
    configs = np.asarray(configs, dtype="<f8")
    if configs.ndim == 3:
        configs = configs[None]
    if configs.ndim != 4 or configs.shape[1] != 2:
        raise FormatError(f"ensemble must be [n, 2, Lx, Ly], got {configs.shape}")
    n, _, lx, ly = configs.shape
    with atomic_writer(path) as fh:
        fh.write(ENSEMBLE_MAGIC)
        fh.write(struct.pack("<IIId", lx, ly, n, float(beta)))
        fh.write(np.ascontiguousarray(configs).tobytes())


def read_ensemble(path) -> tuple[np.ndarray, float]:
    data = Path(path).read_bytes()
    head = len(ENSEMBLE_MAGIC) + struct.calcsize("<IIId")
    if len(data) < head or data[: len(ENSEMBLE_MAGIC)] != ENSEMBLE_MAGIC:
        raise FormatError(f"{path}: not an ensemble file (bad magic)")
    lx, ly, n, beta = struct.unpack_from("<IIId", data, len(ENSEMBLE_MAGIC))
    expected = head + 8 * n * 2 * lx * ly
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n} frames of {lx}x{ly}, got {len(data)}")
    configs = np.frombuffer(data, dtype="<f8", offset=head).reshape(n, 2, lx, ly).astype(np.float64)
    return configs, beta


class EnsembleRecorder:
    """Collects configurations during a run and writes them in one go."""

    def __init__(self, beta: float, every: int = 1):
        self.beta = beta
        self.every = max(1, every)
        self.frames: list[np.ndarray] = []

    def add(self, i: int, cfg: np.ndarray) -> None:
        if i % self.every == 0:
            self.frames.append(np.array(cfg, dtype=np.float64, copy=True))

    def write(self, path) -> None:
        if not self.frames:
            raise FormatError("no configurations recorded")
        write_ensemble(path, np.stack(self.frames), self.beta)


# ------------------------------------------------------------ observables

def write_observables(path, records: Iterable[ChainRecord]) -> None:
    with atomic_writer(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([int(r.traj), _fmt(r.action), _fmt(r.avg_plaq), int(r.charge), _fmt(r.dH), int(bool(r.accept))])


def read_observables(path) -> dict[str, np.ndarray]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as err:
        raise FormatError(f"{path}: cannot read observables ({err})") from err
    if not rows or rows[0] != CSV_HEADER:
        raise FormatError(f"{path}: header must be {','.join(CSV_HEADER)}")
    body = rows[1:]
    try:
        cols = list(zip(*body)) if body else [()] * len(CSV_HEADER)
        out = {name: np.array([float(v) for v in col]) for name, col in zip(CSV_HEADER, cols)}
    except ValueError as err:
        raise FormatError(f"{path}: malformed row ({err})") from err
    if any(len(r) != len(CSV_HEADER) for r in body):
        raise FormatError(f"{path}: ragged rows")
    out["traj"] = out["traj"].astype(np.int64)
    out["charge"] = out["charge"].astype(np.int64)
    out["accept"] = out["accept"].astype(bool)
    return out


def write_train_log(path, rows) -> None:
    with atomic_writer(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_LOG_HEADER)
        for r in rows:
            w.writerow([int(r.epoch), _fmt(r.loss), _fmt(r.ess), _fmt(r.mean_logq), _fmt(r.mean_action), _fmt(r.seconds)])


# --------------------------------------------------------------- checkpoints

def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "architecture": ckpt.arch.to_dict(),
        "epoch": ckpt.epoch,
        "adam": {"step": ckpt.adam.step, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "meta": ckpt.meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = list(ckpt.params.items())
    tensors += [(f"adam.m/{k}", v) for k, v in ckpt.adam.m.items()]
    tensors += [(f"adam.v/{k}", v) for k, v in ckpt.adam.v.items()]
    with atomic_writer(path) as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)


def read_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise FormatError(f"{path}: cannot read checkpoint ({err})") from err
    try:
        return _parse_checkpoint(data)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as err:
        if isinstance(err, FormatError):
            raise
        raise FormatError(f"{path}: corrupt checkpoint ({err})") from err


def _parse_checkpoint(data: bytes) -> Checkpoint:
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<II", data, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(data[off: off + head_len].decode("utf-8"))
    off += head_len
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    params, m, v = {}, {}, {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off: off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if off + 8 * count > len(data):
            raise FormatError(f"truncated tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
        off += 8 * count
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    if off != len(data):
        raise FormatError("trailing bytes after last tensor")
    a = header["adam"]
    adam = AdamState(step=a["step"], m=m, v=v, beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    arch = flow.Architecture.from_dict(header["architecture"])
    return Checkpoint(arch=arch, params=params, adam=adam, epoch=header["epoch"], meta=header["meta"])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    with atomic_writer(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -------------------------------------------------------------------- config

def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment, blank lines ignored."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise FormatError(f"{path}: cannot read config ({err})") from err
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out
