"""SRP-PHAT baseline for a two-microphone array with far-field steering.

Sign convention: ``tau(theta) = spacing * sin(theta) / c`` is the arrival
time at microphone 1 minus that at microphone 2, so positive azimuths reach
microphone 2 first (see :mod:`reverb_doa_lab.roomsim`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .features import GUARD
from .roomsim import DoaGrid


@dataclass(frozen=True)
class SteeringTable:
    delays: np.ndarray
    grid: DoaGrid
    spacing: float
    c: float


def steering_delays(spacing: float, c: float, grid: DoaGrid) -> SteeringTable:
    if spacing <= 0:
        raise ContractError("microphone spacing must be positive")
    theta = np.radians(np.asarray(grid.angles))
    return SteeringTable(spacing * np.sin(theta) / c, grid, spacing, c)


def phat_cross_spectra(frames1: np.ndarray, frames2: np.ndarray) -> np.ndarray:
    """PHAT-weighted ``D1 conj(D2)``, with near-zero bins zeroed (skipped)."""
    f1, f2 = np.asarray(frames1), np.asarray(frames2)
    if f1.shape != f2.shape:
        raise ContractError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
    cross = f1 * f2.conj()
    mag = np.abs(cross)
    ok = mag >= GUARD
    return np.where(ok, cross / np.where(ok, mag, 1.0), 0.0)


def _steering_matrix(table: SteeringTable, k: int, fs: float, nfft: int) -> np.ndarray:
    freqs = np.arange(k) * fs / nfft
    steer = np.exp(2j * np.pi * freqs[:, None] * table.delays[None, :])
    steer[0] = 0.0  # DC carries no delay information
    return steer


def srp_phat_spectrum(frames1: np.ndarray, frames2: np.ndarray, table: SteeringTable,
                      fs: float = 16000, nfft: int = 256) -> np.ndarray:
    """Steered response power per candidate DOA.

    ``frames`` are ``(P, K)`` spectra, or ``(N, P, K)`` for N independent
    windows (result ``(N, T)``).
    """
    f1 = np.asarray(frames1)
    if f1.size == 0 or f1.ndim < 2 or f1.shape[-2] == 0:
        raise ContractError("srp_phat_spectrum needs at least one frame")
    pw = phat_cross_spectra(frames1, frames2).sum(axis=-2)
    return np.real(pw @ _steering_matrix(table, pw.shape[-1], fs, nfft))


def argmax_small_angle(power: np.ndarray, grid: DoaGrid) -> np.ndarray:
    """Index of the maximum; exact ties go to the smallest ``|theta|``, then the smaller angle."""
    power = np.atleast_2d(power)
    angles = np.asarray(grid.angles)
    order = np.lexsort((angles, np.abs(angles)))
    best = power[:, order].argmax(axis=1)
    return order[best]


def estimate_doa_srp(frames1: np.ndarray, frames2: np.ndarray, table: SteeringTable,
                     fs: float = 16000, nfft: int = 256) -> float | np.ndarray:
    """DOA estimate in degrees (one per window for batched input)."""
    power = srp_phat_spectrum(frames1, frames2, table, fs, nfft)
    idx = argmax_small_angle(power, table.grid)
    angles = np.asarray(table.grid.angles)[idx]
    return float(angles[0]) if np.ndim(frames1) == 2 else angles
