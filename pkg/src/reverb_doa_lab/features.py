"""RTF-phase input samples from microphone signal pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window

from .errors import ContractError, InsufficientLengthError
from .roomsim import MicSignals

log = logging.getLogger(__name__)

GUARD = 1e-30
UNLABELED = -1


@dataclass(frozen=True)
class StftConfig:
    nfft: int = 256
    window: str = "hamming"

    @property
    def hop(self) -> int:
        return self.nfft // 2

    @property
    def bins(self) -> int:
        return self.nfft // 2


def frame_count(n_samples: int, cfg: StftConfig = StftConfig()) -> int:
    if n_samples < cfg.nfft:
        return 0
    return (n_samples - cfg.nfft) // cfg.hop + 1


def stft_frames(signal: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Hamming-windowed FFT frames with 50% overlap, shape ``(frames, K)``.

    Frame ``t`` covers samples ``[t*hop, t*hop + nfft)``; bins ``0..K-1`` with
    ``K = nfft/2`` are kept.
    """
    x = np.asarray(signal, dtype=float)
    n = frame_count(x.shape[0], cfg)
    if n == 0:
        raise InsufficientLengthError(f"signal of {x.shape[0]} samples is shorter than one {cfg.nfft}-sample frame")
    win = get_window(cfg.window, cfg.nfft, fftbins=False)
    idx = np.arange(n)[:, None] * cfg.hop + np.arange(cfg.nfft)[None, :]
    return np.fft.fft(x[idx] * win, axis=-1)[:, :cfg.bins]


def estimate_rtf(d1_frame: np.ndarray, d2_frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-frame RTF estimate with microphone 1 as reference.

    Returns ``(H, dead)`` where ``H = D2 conj(D1) / |D1|^2`` (so a noise-free
    pair gives exactly ``A2/A1``) and ``dead`` flags bins with
    ``|D1|^2 < 1e-30``; those are set to 1 (phase 0).
    """
    d1 = np.asarray(d1_frame)
    d2 = np.asarray(d2_frame)
    if d1.shape != d2.shape:
        raise ContractError(f"frame shapes differ: {d1.shape} vs {d2.shape}")
    psd = (d1.conj() * d1).real
    cross = d2 * d1.conj()
    dead = psd < GUARD
    h = np.where(dead, 1.0 + 0j, cross / np.where(dead, 1.0, psd))
    return h, dead


def rtf_phase(d1_frames: np.ndarray, d2_frames: np.ndarray) -> np.ndarray:
    """Wrapped RTF phase in [-pi, pi] for every frame, shape ``(frames, K)``."""
    h, _ = estimate_rtf(d1_frames, d2_frames)
    return np.angle(h)


@dataclass
class FrameStream:
    """Per-frame STFTs of a concatenated recording stream.

    ``labels[f]`` is the DOA index of the recording frame ``f`` came from;
    ``recording[f]`` its position in the stream.
    """

    d1: np.ndarray
    d2: np.ndarray
    labels: np.ndarray
    recording: np.ndarray
    cfg: StftConfig = field(default_factory=StftConfig)

    @property
    def n_frames(self) -> int:
        return self.labels.shape[0]

    def phases(self) -> np.ndarray:
        return rtf_phase(self.d1, self.d2)


def frame_stream(signals: MicSignals, cfg: StftConfig = StftConfig()) -> FrameStream:
    """STFT each recording separately and concatenate frames in stream order."""
    d1, d2, labels, rec = [], [], [], []
    for i, (span, x1, x2) in enumerate(signals.recordings()):
        f1, f2 = stft_frames(x1, cfg), stft_frames(x2, cfg)
        d1.append(f1)
        d2.append(f2)
        labels.append(np.full(f1.shape[0], span.doa_index, dtype=np.int64))
        rec.append(np.full(f1.shape[0], i, dtype=np.int64))
    return FrameStream(np.concatenate(d1), np.concatenate(d2), np.concatenate(labels), np.concatenate(rec), cfg)


def window_starts(n_frames: int, p: int = 32, stride: int = 32) -> np.ndarray:
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if n_frames < p:
        raise InsufficientLengthError(f"need at least {p} frames, got {n_frames}")
    return np.arange((n_frames - p) // stride + 1) * stride


def window_labels(frame_labels: np.ndarray, starts: np.ndarray, p: int = 32) -> np.ndarray:
    """DOA index per window when all ``p`` frames agree, else ``UNLABELED``."""
    lab = np.asarray(frame_labels)
    win = lab[starts[:, None] + np.arange(p)[None, :]]
    single = np.all(win == win[:, :1], axis=1) & (win[:, 0] >= 0)
    return np.where(single, win[:, 0], UNLABELED)


@dataclass
class SampleSet:
    """Stacked input samples ``x`` of shape ``(N, P, K)`` with labels (-1 = none).

    ``starts`` are first-frame indices into the originating frame stream.
    """

    x: np.ndarray
    labels: np.ndarray
    starts: np.ndarray
    normalized: bool = False
    norm: tuple[float, float] | None = None
    n_frames: int = 0

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.intp)
        return SampleSet(self.x[idx], self.labels[idx], self.starts[idx], self.normalized, self.norm, self.n_frames)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED


def build_input_samples(phases: np.ndarray, frame_labels: np.ndarray, p: int = 32, stride: int = 32) -> SampleSet:
    """Slide a ``p``-frame window over the phase stream.

    Windows spanning more than one DOA are kept but left unlabeled.
    """
    phases = np.asarray(phases)
    starts = window_starts(phases.shape[0], p, stride)
    x = phases[starts[:, None] + np.arange(p)[None, :]]
    return SampleSet(x=x, labels=window_labels(frame_labels, starts, p), starts=starts, n_frames=phases.shape[0])


def normalization_stats(x: np.ndarray) -> tuple[float, float]:
    if np.size(x) == 0:
        raise ContractError("cannot normalize an empty dataset")
    return float(np.min(x)), float(np.max(x))


def apply_normalization(x: np.ndarray, stats: tuple[float, float]) -> tuple[np.ndarray, bool]:
    """Affine map ``(x - lo) / (hi - lo)``; returns ``(values, degenerate)``."""
    lo, hi = stats
    if hi == lo:
        log.warning("normalization range is degenerate (min == max == %g); output set to zero", lo)
        return np.zeros_like(x, dtype=float), True
    return (np.asarray(x, dtype=float) - lo) / (hi - lo), False


def normalize_unit_interval(samples: SampleSet, stats: tuple[float, float] | None = None) -> tuple[SampleSet, tuple[float, float], bool]:
    """Scale samples to [0, 1] with global statistics.

    Statistics are computed from ``samples`` unless given, in which case they
    are applied verbatim (the frozen training-set range for other rooms).
    """
    if len(samples) == 0:
        raise ContractError("cannot normalize an empty dataset")
    if samples.normalized:
        raise ContractError("samples are already normalized")
    stats = normalization_stats(samples.x) if stats is None else (float(stats[0]), float(stats[1]))
    values, degenerate = apply_normalization(samples.x, stats)
    out = SampleSet(values, samples.labels, samples.starts, True, stats, samples.n_frames)
    return out, stats, degenerate


def extract_features(signals: MicSignals, p: int = 32, stride: int = 32,
                     cfg: StftConfig = StftConfig()) -> SampleSet:
    """Unnormalized RTF-phase samples for a whole dataset."""
    stream = frame_stream(signals, cfg)
    return build_input_samples(stream.phases(), stream.labels, p, stride)
