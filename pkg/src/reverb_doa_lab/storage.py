"""On-disk formats: raw little-endian arrays with JSON sidecars.

=========  ===================  ==========================================
artifact   data file            sidecar
=========  ===================  ==========================================
signals    ``<name>.sig``       float32, channel-major ``[2, n]``
features   ``<name>.feat``      float64, ``[N, P, K]``
model      ``<name>.ckpt``      float64, parameters concatenated by name
=========  ===================  ==========================================

Each sidecar is ``<name>.json`` next to the data file. JSON is written with
sorted keys so identical content gives identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ArtifactError
from .features import SampleSet
from .roomsim import MicSignals, RoomConfig, Span
from .vae import ArchSpec, ModelParams

SIGNAL_DTYPE = np.dtype("<f4")
FEATURE_DTYPE = np.dtype("<f8")
PARAM_DTYPE = np.dtype("<f8")


def write_json(path: Path, payload: dict) -> None:
    try:
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc.strerror}") from exc


def read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing file {path}") from exc
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc


def _write_raw(path: Path, arr: np.ndarray, dtype: np.dtype) -> None:
    try:
        Path(path).write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc.strerror}") from exc


def _read_raw(path: Path, dtype: np.dtype, count: int) -> np.ndarray:
    try:
        data = np.frombuffer(Path(path).read_bytes(), dtype=dtype)
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing file {path}") from exc
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc.strerror}") from exc
    if data.size != count:
        raise ArtifactError(f"{path} holds {data.size} values, sidecar says {count}")
    return data


def room_summary(room: RoomConfig) -> dict:
    return {"name": room.name, "dims": list(room.dims), "rt60": room.rt60, "mics": [list(m) for m in room.mics],
            "c": room.c, "fs": room.fs, "snr_db": room.snr_db, "source_range": room.source_range,
            "realizations": room.realizations, "signal_seconds": room.signal_seconds,
            "reflection": room.reflection}


# -- signals ---------------------------------------------------------------

def save_signals(out_dir: Path, room: RoomConfig, seed: int, signals: MicSignals) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / f"{room.name}_{seed}"
    _write_raw(stem.with_suffix(".sig"), np.stack([signals.d1, signals.d2]), SIGNAL_DTYPE)
    write_json(stem.with_suffix(".json"), {
        "kind": "signals", "preset": room.name, "seed": seed, "fs": signals.fs,
        "n_samples": int(signals.d1.size), "grid_deg": list(room.doa_grid.angles),
        "room": room_summary(room), "recordings": len(signals.spans),
        "spans": [[sp.start, sp.stop, sp.doa_index, sp.realization] for sp in signals.spans],
    })
    return stem.with_suffix(".sig")


def load_signals(path: Path) -> tuple[MicSignals, dict]:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    n = int(meta["n_samples"])
    data = _read_raw(path.with_suffix(".sig"), SIGNAL_DTYPE, 2 * n).astype(float).reshape(2, n)
    spans = [Span(*map(int, s)) for s in meta["spans"]]
    return MicSignals(d1=data[0].copy(), d2=data[1].copy(), fs=int(meta["fs"]), spans=spans), meta


# -- features --------------------------------------------------------------

def save_features(stem: Path, samples: SampleSet, stride: int, extra: dict | None = None) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    n, p, k = samples.x.shape
    _write_raw(stem.with_suffix(".feat"), samples.x, FEATURE_DTYPE)
    meta = {"kind": "features", "N": n, "P": p, "K": k, "stride": stride,
            "normalized": samples.normalized,
            "norm_min": None if samples.norm is None else samples.norm[0],
            "norm_max": None if samples.norm is None else samples.norm[1],
            "labels": samples.labels.tolist(), "starts": samples.starts.tolist(),
            "rtf_frames": samples.n_frames, "windows": n,
            "labeled_windows": int(samples.labeled_mask.sum())}
    meta.update(extra or {})
    write_json(stem.with_suffix(".json"), meta)
    return stem.with_suffix(".feat")


def load_features(path: Path) -> tuple[SampleSet, dict]:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    if meta.get("kind") != "features":
        raise ArtifactError(f"{path} is not a feature set")
    n, p, k = int(meta["N"]), int(meta["P"]), int(meta["K"])
    x = _read_raw(path.with_suffix(".feat"), FEATURE_DTYPE, n * p * k).reshape(n, p, k).copy()
    norm = None if meta["norm_min"] is None else (float(meta["norm_min"]), float(meta["norm_max"]))
    samples = SampleSet(x=x, labels=np.asarray(meta["labels"], dtype=np.int64),
                        starts=np.asarray(meta["starts"], dtype=np.int64),
                        normalized=bool(meta["normalized"]), norm=norm, n_frames=int(meta["rtf_frames"]))
    return samples, meta


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(stem: Path, params: ModelParams, manifest: dict) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arrays = params.arrays()
    names = sorted(arrays)
    layout, offset = [], 0
    for name in names:
        layout.append({"name": name, "shape": list(arrays[name].shape), "offset": offset})
        offset += arrays[name].size
    flat = np.concatenate([arrays[n].ravel() for n in names])
    _write_raw(stem.with_suffix(".ckpt"), flat, PARAM_DTYPE)
    arch = params.arch
    meta = {"kind": "checkpoint", "arch": {"n_classes": arch.n_classes, "height": arch.height,
                                          "width": arch.width, "channels": arch.channels,
                                          "hidden": arch.hidden, "latent": arch.latent},
            "arch_hash": arch.digest(), "layout": layout, "size": offset}
    meta.update(manifest)
    write_json(stem.with_suffix(".json"), meta)
    return stem.with_suffix(".ckpt")


def load_checkpoint(path: Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    if meta.get("kind") != "checkpoint":
        raise ArtifactError(f"{path} is not a checkpoint")
    arch = ArchSpec(**meta["arch"])
    if arch.digest() != meta["arch_hash"]:
        raise ArtifactError(f"{path}: architecture hash mismatch")
    flat = _read_raw(path.with_suffix(".ckpt"), PARAM_DTYPE, int(meta["size"]))
    arrays = {}
    for entry in meta["layout"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"])
    return ModelParams.from_arrays(arch, arrays), meta
