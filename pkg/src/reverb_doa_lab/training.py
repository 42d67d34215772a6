"""Training loops for the semi-supervised VAE and the supervised CNN baseline."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import vae
from .errors import ConfigError, NumericalError
from .features import SampleSet

log = logging.getLogger(__name__)

# label count J -> auxiliary multiplier selected at full scale
FULL_ALPHA = {37: 10.0, 74: 50.0, 148: 70.0, 481: 20.0, 999: 80.0}
ALPHA_GRID = tuple(float(a) for a in range(10, 101, 10))
DESK_ALPHA = 100.0


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``chunk`` bounds how many samples go through one forward/backward pass;
    gradients of a batch are accumulated over chunks before the Adam step,
    so it changes memory use but not the result beyond float rounding.
    """

    labeled_count: int
    alpha: float = 10.0
    lr: float = 5e-5
    batch: int = 256
    epochs: int = 300
    seed: int = 0
    mc_samples: int = 1
    chunk: int = 16

    def validate(self, n_classes: int) -> None:
        if self.labeled_count <= 0 or self.labeled_count % n_classes:
            raise ConfigError(f"J={self.labeled_count} must be a positive multiple of T={n_classes}")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.lr <= 0 or self.batch < 1 or self.epochs < 1 or self.chunk < 1:
            raise ConfigError("lr, batch, epochs and chunk must be positive")
        if self.mc_samples != 1:
            raise ConfigError("only a single Monte-Carlo sample per ELBO evaluation is supported")


def desk_config(labeled_count: int, **kw) -> TrainConfig:
    """Settings for the small desk datasets (one CPU: ~1 s/epoch CNN, ~5 s/epoch VAE)."""
    base = dict(alpha=DESK_ALPHA, lr=3e-4, batch=32, epochs=300)
    base.update(kw)
    return TrainConfig(labeled_count=labeled_count, **base)


def full_config(labeled_count: int, **kw) -> TrainConfig:
    base = dict(alpha=FULL_ALPHA.get(labeled_count, 10.0), lr=5e-5, batch=256)
    base.update(kw)
    return TrainConfig(labeled_count=labeled_count, **base)


@dataclass
class EpochStats:
    epoch: int
    c_sum: float
    d_sum: float
    aux_sum: float
    objective: float
    objective_alpha: float
    train_accuracy: float
    val_accuracy: float


@dataclass
class LossReport:
    method: str
    alpha: float
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_accuracy(self) -> float:
        return next(e.val_accuracy for e in self.epochs if e.epoch == self.best_epoch)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(EpochStats)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for e in self.epochs:
            w.writerow([repr(getattr(e, n)) for n in names])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, method: str, alpha: float, best_epoch: int) -> "LossReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        epochs = [EpochStats(int(r["epoch"]), *(float(r[f.name]) for f in fields(EpochStats)[1:])) for r in rows]
        return cls(method, alpha, epochs, best_epoch)


def select_labeled(samples: SampleSet, labeled_count: int, n_classes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced labeled subset: the first ``J/T`` windows of each DOA after a seeded shuffle.

    Returns ``(labeled_idx, rest_idx)``; ``rest_idx`` holds every other window,
    mixed-DOA windows included, in original order.
    """
    if labeled_count <= 0 or labeled_count % n_classes:
        raise ConfigError(f"J={labeled_count} must be a positive multiple of T={n_classes}")
    per = labeled_count // n_classes
    order = np.random.default_rng([seed, 7]).permutation(len(samples))
    chosen = []
    for t in range(n_classes):
        hits = order[samples.labels[order] == t][:per]
        if hits.size < per:
            raise ConfigError(f"DOA index {t} has only {hits.size} labeled windows, need {per}")
        chosen.append(hits)
    labeled = np.sort(np.concatenate(chosen))
    rest = np.setdiff1d(np.arange(len(samples)), labeled)
    return labeled, rest


def interleave_schedule(n_labeled_batches: int, n_unlabeled_batches: int) -> np.ndarray:
    """Boolean batch schedule (True = labeled) spreading labeled batches evenly.

    Labeled batches make up ``n_l / (n_l + n_u)`` of the epoch; their positions
    are fixed by the counts alone.
    """
    total = n_labeled_batches + n_unlabeled_batches
    if total == 0:
        return np.zeros(0, dtype=bool)
    k = np.arange(total)
    return (k + 1) * n_labeled_batches // total > k * n_labeled_batches // total


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _chunks(idx: np.ndarray, size: int):
    for i in range(0, idx.size, size):
        yield idx[i:i + size]


def accuracy(params: vae.ModelParams, samples: SampleSet, chunk: int = 256) -> float:
    """Percent of labeled windows whose argmax class matches."""
    mask = samples.labeled_mask
    if not mask.any():
        return float("nan")
    x, y = samples.x[mask], samples.labels[mask]
    pred = np.concatenate([vae.predict_index(params, x[i:i + chunk]) for i in range(0, len(y), chunk)])
    return 100.0 * float(np.mean(pred == y))


def _check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericalError(f"{what} became non-finite")
    return value


def _adam_step(params: vae.ModelParams, names: list[str], state: ad.AdamState) -> None:
    grads = params.grads()
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}")
    ad.adam_step({k: params[k] for k in names}, {k: grads[k] for k in names if k in grads}, state)
    params.zero_grad()


def _labeled_pass(params, x, y, eps, alpha, totals, train_cls_only=False) -> None:
    if train_cls_only:
        aux = -ad.categorical_log_prob_logits(y, vae.classifier_logits(params, x))
        aux_s = ad.tsum(aux)
        ad.backward(aux_s)
        totals["aux"] += aux_s.item()
        return
    c, aux = vae.labeled_terms(params, x, y, eps)
    c_s, aux_s = ad.tsum(c), ad.tsum(aux)
    ad.backward(c_s + alpha * aux_s)
    totals["c"] += c_s.item()
    totals["aux"] += aux_s.item()


def train_vae_ssl(labeled: SampleSet, unlabeled: SampleSet, val: SampleSet, cfg: TrainConfig,
                  n_classes: int, init: vae.ModelParams | None = None) -> tuple[vae.ModelParams, LossReport]:
    """Maximise the alpha-weighted semi-supervised ELBO with Adam.

    ``labeled`` must hold exactly ``J`` windows, ``J/T`` per DOA. Returns the
    parameters of the epoch with the best validation accuracy (earliest on
    ties) and the per-epoch report.
    """
    return _train("vae-ssl", labeled, unlabeled, val, cfg, n_classes, init)


def train_supervised_cnn(labeled: SampleSet, val: SampleSet, cfg: TrainConfig, n_classes: int,
                         init: vae.ModelParams | None = None) -> tuple[vae.ModelParams, LossReport]:
    """Classifier-only training on the labeled windows (cross-entropy)."""
    return _train("cnn", labeled, None, val, cfg, n_classes, init)


def _check_labeled(labeled: SampleSet, cfg: TrainConfig, n_classes: int) -> None:
    cfg.validate(n_classes)
    if len(labeled) != cfg.labeled_count:
        raise ConfigError(f"labeled set has {len(labeled)} windows, config says J={cfg.labeled_count}")
    counts = np.bincount(labeled.labels, minlength=n_classes) if np.all(labeled.labels >= 0) else None
    if counts is None or counts.size != n_classes or np.any(counts != cfg.labeled_count // n_classes):
        raise ConfigError("labeled set must contain J/T windows of every DOA")


def _train(method, labeled, unlabeled, val, cfg, n_classes, init):
    _check_labeled(labeled, cfg, n_classes)
    p, k = labeled.x.shape[1:]
    arch = vae.ArchSpec(n_classes=n_classes, height=p, width=k)
    params = init.copy() if init is not None else vae.init_params(arch, np.random.default_rng([cfg.seed, 0]))
    rng = np.random.default_rng([cfg.seed, 1])
    supervised = method == "cnn"
    names = params.names("cls.") if supervised else params.names()
    state = ad.AdamState(lr=cfg.lr)
    n_unl = 0 if unlabeled is None else len(unlabeled)
    report = LossReport(method=method, alpha=cfg.alpha)
    best_params, best_acc = None, -math.inf
    m = arch.latent

    for epoch in range(1, cfg.epochs + 1):
        lab_batches = _batches(len(labeled), cfg.batch, rng)
        unl_batches = _batches(n_unl, cfg.batch, rng) if n_unl else []
        schedule = interleave_schedule(len(lab_batches), len(unl_batches))
        li = ui = 0
        totals = {"c": 0.0, "d": 0.0, "aux": 0.0}
        for is_labeled in schedule:
            if is_labeled:
                idx = lab_batches[li]
                li += 1
                eps = rng.standard_normal((idx.size, m))
                for part in _chunks(np.arange(idx.size), cfg.chunk):
                    sel = idx[part]
                    _labeled_pass(params, labeled.x[sel], labeled.labels[sel], eps[part], cfg.alpha,
                                  totals, train_cls_only=supervised)
            else:
                idx = unl_batches[ui]
                ui += 1
                eps = rng.standard_normal((idx.size, m))
                per_chunk = max(1, cfg.chunk // max(1, n_classes // 4))
                for part in _chunks(np.arange(idx.size), per_chunk):
                    d = vae.unlabeled_objective(params, unlabeled.x[idx[part]], eps[part])
                    ad.backward(d)
                    totals["d"] += d.item()
            _adam_step(params, names, state)

        c_sum = _check_finite(totals["c"], "C")
        d_sum = _check_finite(totals["d"], "D")
        aux_sum = _check_finite(totals["aux"], "auxiliary loss")
        objective = c_sum + d_sum
        stats = EpochStats(epoch, c_sum, d_sum, aux_sum, objective, objective + cfg.alpha * aux_sum,
                           accuracy(params, labeled), accuracy(params, val))
        report.epochs.append(stats)
        log.info("%s epoch %d: J_alpha=%.4g train=%.1f%% val=%.1f%%", method, epoch,
                 stats.objective_alpha, stats.train_accuracy, stats.val_accuracy)
        if stats.val_accuracy > best_acc:
            best_acc, best_params, report.best_epoch = stats.val_accuracy, params.copy(), epoch
    return best_params, report


def alpha_search(train_fn, grid=ALPHA_GRID) -> tuple[float, list[tuple[float, float]]]:
    """Pick the alpha with the best validation accuracy; ties go to the smaller alpha.

    ``train_fn(alpha)`` returns the best validation accuracy of that run.
    """
    table = [(float(a), float(train_fn(float(a)))) for a in sorted(grid)]
    best = max(table, key=lambda row: (row[1], -row[0]))
    return best[0], table
