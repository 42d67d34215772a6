"""End-to-end stages: simulate, extract features, train, evaluate, report.

Artifacts live under one output directory::

    signals/<preset>_<seed>.sig|json
    features/<preset>_<seed>.feat|json
    models/<method>_J<J>_a<alpha>_s<seed>.ckpt|json|loss.csv
    results/<method>_<preset>_<J>.json, hist_<method>_<preset>_<J>.csv
    results_<preset>.csv|txt
    manifest.json

Presets are named by role (``design``, ``validation``, ``test1``, ``test2``).
At desk scale (the default) each role maps to its ``desk-*`` twin; with
``full=True`` the full-size presets are used. Any concrete preset name is
also accepted.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import features as ft
from . import metrics as mt
from . import roomsim as rs
from . import srp, storage, training, vae
from .errors import ArtifactError, ConfigError

log = logging.getLogger(__name__)

METHODS = ("vae-ssl", "cnn", "srp-phat")
ROLES = ("design", "validation", "test1", "test2")


def resolve_preset(name: str, full: bool = False) -> str:
    if name in rs.DESK_TWIN and not full:
        return rs.DESK_TWIN[name]
    if name not in rs.PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(rs.PRESETS)}")
    return name


def training_preset(preset: str) -> str:
    """The design-role preset whose normalization a preset's features reuse."""
    if preset.startswith("desk"):
        return "desk"
    return "design"


def validation_preset(full: bool) -> str:
    return resolve_preset("validation", full)


@dataclass
class Workspace:
    root: Path
    full: bool = False
    seed: int = 1
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)

    def preset(self, name: str) -> str:
        return resolve_preset(name, self.full)

    def signal_path(self, preset: str) -> Path:
        return self.root / "signals" / f"{preset}_{self.seed}.sig"

    def feature_stem(self, preset: str) -> Path:
        return self.root / "features" / f"{preset}_{self.seed}"

    def model_stem(self, method: str, labeled_count: int, alpha: float) -> Path:
        return self.root / "models" / f"{method}_J{labeled_count}_a{alpha:g}_s{self.seed}"

    def result_stem(self, method: str, preset: str, labeled_count: int) -> Path:
        return self.root / "results" / f"{method}_{preset}_{labeled_count}"

    # -- manifest ------------------------------------------------------------
    def record(self, stage: str, outputs: list[Path], config: dict, seconds: float) -> None:
        path = self.root / "manifest.json"
        data = storage.read_json(path) if path.exists() else {"runs": {}}
        digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
        data["runs"][f"{stage}:{digest}"] = {
            "stage": stage, "config": config, "config_digest": digest, "seed": self.seed,
            "outputs": sorted(str(p.relative_to(self.root)) for p in outputs), "seconds": round(seconds, 3)}
        self.root.mkdir(parents=True, exist_ok=True)
        storage.write_json(path, data)


# -- stages -----------------------------------------------------------------

def simulate(ws: Workspace, preset: str, jobs: int = 1) -> Path:
    t0 = time.perf_counter()
    name = ws.preset(preset)
    room = rs.get_preset(name)
    signals = rs.generate_room_dataset(room, ws.seed, jobs=jobs)
    path = storage.save_signals(ws.signal_path(name).parent, room, ws.seed, signals)
    ws.record("simulate", [path, path.with_suffix(".json")], {"preset": name, "seed": ws.seed},
              time.perf_counter() - t0)
    log.info("simulated %s: %d recordings", name, len(signals.spans))
    return path


def _ensure_signals(ws: Workspace, name: str, jobs: int) -> Path:
    path = ws.signal_path(name)
    if not path.exists():
        simulate(ws, name, jobs)
    return path


def extract(ws: Workspace, preset: str, p: int = 32, stride: int = 32, jobs: int = 1,
            auto: bool = False) -> Path:
    """Feature extraction; non-design presets reuse the design set's min/max.

    With ``auto`` missing upstream artifacts are produced first; otherwise a
    missing dataset is an :class:`ArtifactError`.
    """
    t0 = time.perf_counter()
    name = ws.preset(preset)
    sig_path = _ensure_signals(ws, name, jobs) if auto else ws.signal_path(name)
    signals, meta = storage.load_signals(sig_path)
    raw = ft.extract_features(signals, p, stride)
    base = training_preset(name)
    if name == base:
        stats = None
    else:
        base_stem = ws.feature_stem(base)
        if not base_stem.with_suffix(".json").exists():
            if not auto:
                raise ArtifactError(f"features of {base!r} are needed for normalization: {base_stem}.feat")
            extract(ws, base, p, stride, jobs, auto)
        base_meta = storage.read_json(base_stem.with_suffix(".json"))
        stats = (base_meta["norm_min"], base_meta["norm_max"])
    samples, used, degenerate = ft.normalize_unit_interval(raw, stats)
    stem = ws.feature_stem(name)
    path = storage.save_features(stem, samples, stride, {
        "preset": name, "seed": ws.seed, "degenerate_norm": degenerate, "stats_from": base,
        "frames_per_recording": ft.frame_count(int(signals.spans[0].stop - signals.spans[0].start)),
        "recordings": len(signals.spans), "grid_deg": meta["grid_deg"]})
    ws.record("features", [path, path.with_suffix(".json")], {"preset": name, "seed": ws.seed, "P": p,
                                                               "stride": stride}, time.perf_counter() - t0)
    log.info("features %s: %d windows from %d RTF frames", name, len(samples), samples.n_frames)
    return path


def _features(ws: Workspace, name: str, auto: bool, jobs: int = 1) -> tuple[ft.SampleSet, dict]:
    path = ws.feature_stem(name).with_suffix(".feat")
    if auto and not path.exists():
        extract(ws, name, jobs=jobs, auto=True)
    return storage.load_features(path)


def default_train_config(ws: Workspace, labeled_count: int, overrides: dict | None = None) -> training.TrainConfig:
    make = training.full_config if ws.full else training.desk_config
    kw = {"seed": ws.seed}
    kw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return make(labeled_count, **kw)


def train(ws: Workspace, method: str, cfg: training.TrainConfig, auto: bool = False, jobs: int = 1) -> Path:
    """Train on the design-role features with validation-based model selection."""
    if method not in ("vae-ssl", "cnn"):
        raise ConfigError(f"cannot train method {method!r}")
    t0 = time.perf_counter()
    design, val_name = ws.preset("design"), ws.preset("validation")
    cfg.validate(len(rs.get_preset(design).doa_grid))
    train_set, train_meta = _features(ws, design, auto, jobs)
    val_set, _ = _features(ws, val_name, auto, jobs)
    n_classes = len(train_meta["grid_deg"])
    cfg.validate(n_classes)
    lab_idx, rest_idx = training.select_labeled(train_set, cfg.labeled_count, n_classes, cfg.seed)
    labeled = train_set.subset(lab_idx)
    if method == "vae-ssl":
        params, report = training.train_vae_ssl(labeled, train_set.subset(rest_idx), val_set, cfg, n_classes)
    else:
        params, report = training.train_supervised_cnn(labeled, val_set, cfg, n_classes)
    stem = ws.model_stem(method, cfg.labeled_count, cfg.alpha)
    best = report.best_epoch
    path = storage.save_checkpoint(stem, params, {
        "method": method, "epoch": best, "val_accuracy": report.best_val_accuracy,
        "norm_min": train_set.norm[0], "norm_max": train_set.norm[1], "alpha": cfg.alpha,
        "J": cfg.labeled_count, "seed": cfg.seed, "train_preset": design, "val_preset": val_name,
        "labeled_windows": lab_idx.tolist(), "train_config": asdict(cfg)})
    loss_path = stem.with_name(stem.name + "_loss.csv")
    loss_path.write_text(report.to_csv())
    ws.record("train", [path, path.with_suffix(".json"), loss_path], {"method": method, **asdict(cfg)},
              time.perf_counter() - t0)
    return path


def _srp_estimates(ws: Workspace, name: str, samples: ft.SampleSet, meta: dict) -> np.ndarray:
    signals, sig_meta = storage.load_signals(ws.signal_path(name))
    stream = ft.frame_stream(signals)
    room = sig_meta["room"]
    spacing = float(np.linalg.norm(np.subtract(room["mics"][1], room["mics"][0])))
    grid = rs.DoaGrid(tuple(meta["grid_deg"]))
    table = srp.steering_delays(spacing, room["c"], grid)
    idx = samples.starts[:, None] + np.arange(meta["P"])[None, :]
    out = np.empty(len(samples))
    for i in range(0, len(samples), 64):
        sl = slice(i, i + 64)
        out[sl] = srp.estimate_doa_srp(stream.d1[idx[sl]], stream.d2[idx[sl]], table, room["fs"])
    return out


def evaluate(ws: Workspace, method: str, preset: str, labeled_count: int = 0, alpha: float | None = None,
             checkpoint: Path | None = None, auto: bool = False, jobs: int = 1) -> mt.EvalResult:
    """Score one method on one preset and write its result and histogram files.

    On the training preset only windows whose labels were not used in
    training are scored; mixed-DOA windows are never scored.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    name = ws.preset(preset)
    samples, meta = _features(ws, name, auto, jobs)
    grid = rs.DoaGrid(tuple(meta["grid_deg"]))
    keep = samples.labeled_mask.copy()
    if method == "srp-phat":
        labeled_count = 0
        if auto:
            _ensure_signals(ws, name, jobs)
        est_all = _srp_estimates(ws, name, samples, meta)
    else:
        if checkpoint is None:
            if alpha is None:
                alpha = default_train_config(ws, labeled_count).alpha
            checkpoint = ws.model_stem(method, labeled_count, alpha).with_suffix(".ckpt")
        params, ck = storage.load_checkpoint(checkpoint)
        labeled_count = int(ck["J"])
        if name == ck["train_preset"] and int(ck["seed"]) == ws.seed:
            keep[np.asarray(ck["labeled_windows"], dtype=np.intp)] = False
        est_all = np.full(len(samples), np.nan)
        est_all[keep] = vae.predict_doa(params, samples.x[keep], grid)
    truth = np.asarray(grid.angles)[samples.labels[keep]]
    result = mt.evaluate(method, name, labeled_count, est_all[keep], truth, grid)
    stem = ws.result_stem(method, name, labeled_count)
    stem.parent.mkdir(parents=True, exist_ok=True)
    storage.write_json(stem.with_suffix(".json"), {
        "method": method, "preset": name, "J": labeled_count, "mae_deg": result.mae_degrees,
        "accuracy_pct": result.accuracy_percent, "evaluated": int(keep.sum()),
        "counts": result.counts.tolist()})
    hist = stem.parent / f"hist_{method}_{name}_{labeled_count}.csv"
    hist.write_text(mt.histogram_csv(mt.doa_histogram(est_all[keep], truth, grid), grid))
    ws.record("evaluate", [stem.with_suffix(".json"), hist],
              {"method": method, "preset": name, "J": labeled_count, "checkpoint": str(checkpoint)}, 0.0)
    return result


def report(ws: Workspace) -> list[Path]:
    """Collect every stored result into one table per preset."""
    results: dict[str, list[mt.EvalResult]] = {}
    for path in sorted((ws.root / "results").glob("*.json")):
        r = storage.read_json(path)
        results.setdefault(r["preset"], []).append(
            mt.EvalResult(r["method"], r["preset"], int(r["J"]), float(r["mae_deg"]), float(r["accuracy_pct"])))
    written = []
    for preset, rows in sorted(results.items()):
        csv_text, txt = mt.emit_results_table(rows)
        for suffix, text in ((".csv", csv_text), (".txt", txt)):
            p = ws.root / f"results_{preset}{suffix}"
            p.write_text(text)
            written.append(p)
    return written


def alpha_search(ws: Workspace, labeled_count: int, grid=training.ALPHA_GRID, overrides: dict | None = None,
                 auto: bool = False, jobs: int = 1) -> tuple[float, list[tuple[float, float]], Path]:
    """Train one VAE-SSL model per alpha and keep the best by validation accuracy."""
    def run(alpha):
        cfg = default_train_config(ws, labeled_count, {**(overrides or {}), "alpha": alpha})
        path = train(ws, "vae-ssl", cfg, auto, jobs)
        return storage.read_json(path.with_suffix(".json"))["val_accuracy"]

    best, table = training.alpha_search(run, grid)
    out = ws.root / f"alpha_search_J{labeled_count}_s{ws.seed}.csv"
    out.write_text("alpha,val_accuracy\n" + "".join(f"{a:g},{acc!r}\n" for a, acc in table)
                   + f"# best,{best:g}\n")
    return best, table, out
