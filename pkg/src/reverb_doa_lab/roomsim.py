"""Two-microphone reverberant recordings via the image-source method.

Geometry convention: the array axis is x, broadside is +y. A source at
azimuth ``theta`` sits at ``center + r*(sin(theta), cos(theta), 0)``, so a
positive azimuth moves the source toward microphone 2 (larger x), which then
receives the wavefront first.
"""

from __future__ import annotations

import dataclasses
import functools
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.fft import next_fast_len
from scipy.optimize import brentq
from scipy.signal import fftconvolve, lfilter

from .errors import (
    ConfigError,
    DegenerateInputError,
    GeometryError,
    InfeasibleRoomError,
    InsufficientLengthError,
)

SINC_SECONDS = 0.004  # Hann-windowed sinc half-width, as in Habets' generator
POLYPHASE = 256  # sub-sample grid for reflected paths


@dataclass(frozen=True)
class DoaGrid:
    """Candidate azimuths in degrees, strictly increasing."""

    angles: tuple[float, ...]

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=float)
        if a.ndim != 1 or a.size == 0 or np.any(np.diff(a) <= 0):
            raise ConfigError("DOA grid must be a nonempty strictly increasing sequence")

    @classmethod
    def uniform(cls, step: float, lo: float = -90.0, hi: float = 90.0) -> "DoaGrid":
        n = int(round((hi - lo) / step)) + 1
        return cls(tuple(float(lo + step * i) for i in range(n)))

    @property
    def size(self) -> int:
        return len(self.angles)

    def __len__(self) -> int:
        return len(self.angles)

    def angle(self, index) -> np.ndarray | float:
        arr = np.asarray(self.angles)[np.asarray(index)]
        return float(arr) if np.ndim(arr) == 0 else arr

    def index(self, angle, atol: float = 1e-6):
        """Grid index of on-grid angle(s); raises ConfigError for off-grid values."""
        a = np.asarray(angle, dtype=float)
        grid = np.asarray(self.angles)
        idx = np.abs(a[..., None] - grid).argmin(axis=-1)
        if np.any(np.abs(grid[idx] - a) > atol):
            raise ConfigError(f"angle(s) not on the DOA grid: {a[np.abs(grid[idx] - a) > atol]}")
        return int(idx) if idx.ndim == 0 else idx


@dataclass(frozen=True)
class RoomConfig:
    """Shoebox room, two omnidirectional microphones and the source layout.

    ``rt60 == 0`` denotes an anechoic room (direct path only).
    """

    name: str
    dims: tuple[float, float, float]
    rt60: float
    mics: tuple[tuple[float, float, float], tuple[float, float, float]]
    doa_grid: DoaGrid
    c: float = 343.0
    fs: int = 16000
    source_range: float = 1.5
    snr_db: float = 20.0
    realizations: int = 10
    signal_seconds: float = 1.0
    array_center: tuple[float, float, float] | None = None
    reflection: str = "calibrated"

    def __post_init__(self):
        if self.reflection not in ("calibrated", "sabine"):
            raise ConfigError(f"reflection must be 'calibrated' or 'sabine', got {self.reflection!r}")
        if len(self.mics) != 2:
            raise ConfigError("exactly two microphones are required")
        if self.rt60 < 0 or self.fs <= 0 or self.c <= 0:
            raise ConfigError("rt60 must be >= 0 (0 = anechoic); fs and c must be positive")
        for m in self.mics:
            check_inside(self, m, "microphone")
        for p in self.source_positions():
            check_inside(self, p, "source")

    @property
    def anechoic(self) -> bool:
        return self.rt60 == 0

    @property
    def center(self) -> np.ndarray:
        if self.array_center is not None:
            return np.asarray(self.array_center, dtype=float)
        return np.mean(np.asarray(self.mics, dtype=float), axis=0)

    @property
    def spacing(self) -> float:
        m = np.asarray(self.mics, dtype=float)
        return float(np.linalg.norm(m[1] - m[0]))

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dims
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    @property
    def samples_per_recording(self) -> int:
        return int(round(self.signal_seconds * self.fs))

    def source_position(self, angle_deg: float) -> np.ndarray:
        th = math.radians(angle_deg)
        return self.center + self.source_range * np.array([math.sin(th), math.cos(th), 0.0])

    def source_positions(self) -> list[np.ndarray]:
        return [self.source_position(a) for a in self.doa_grid.angles]

    def with_(self, **changes) -> "RoomConfig":
        return dataclasses.replace(self, **changes)


def check_inside(room: RoomConfig, pos, what: str = "point") -> None:
    p = np.asarray(pos, dtype=float)
    if p.shape != (3,) or np.any(p <= 0) or np.any(p >= np.asarray(room.dims)):
        raise GeometryError(f"{what} at {p.tolist()} is not strictly inside room {room.dims}")


# presets ----------------------------------------------------------------

_CENTER = (3.0, 3.0, 1.2)


def _design(name: str = "design", step: float = 5.0, realizations: int = 10, rt60: float = 0.5,
            mic_dy: tuple[float, float] = (0.0, 0.0)) -> RoomConfig:
    half = 0.04
    cx, cy, cz = _CENTER
    mics = ((cx - half, cy + mic_dy[0], cz), (cx + half, cy + mic_dy[1], cz))
    return RoomConfig(name=name, dims=(6.0, 6.0, 2.4), rt60=rt60, mics=mics,
                      doa_grid=DoaGrid.uniform(step), realizations=realizations,
                      array_center=_CENTER)


_TEST_DISPLACEMENT = (0.005, -0.003)

PRESETS = {
    "design": lambda: _design("design"),
    "validation": lambda: _design("validation", rt60=0.7),
    "test1": lambda: _design("test1", mic_dy=_TEST_DISPLACEMENT),
    "test2": lambda: _design("test2", rt60=0.6, mic_dy=_TEST_DISPLACEMENT),
    "desk": lambda: _design("desk", step=10.0, realizations=2),
    "desk-validation": lambda: _design("desk-validation", step=10.0, realizations=2, rt60=0.7),
    "desk-test1": lambda: _design("desk-test1", step=10.0, realizations=2, mic_dy=_TEST_DISPLACEMENT),
    "desk-test2": lambda: _design("desk-test2", step=10.0, realizations=2, rt60=0.6,
                                  mic_dy=_TEST_DISPLACEMENT),
    "desk-anechoic": lambda: _design("desk-anechoic", step=10.0, realizations=2, rt60=0.0),
}

# Full-size room configuration -> its reduced desk twin.
DESK_TWIN = {"design": "desk", "validation": "desk-validation", "test1": "desk-test1", "test2": "desk-test2"}


def get_preset(name: str) -> RoomConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# acoustics ----------------------------------------------------------------

def sabine_absorption(room: RoomConfig) -> float:
    return 24.0 * room.volume * math.log(10.0) / (room.c * room.surface * room.rt60)


def sabine_rt60(volume: float, surface: float, absorption: float, c: float = 343.0) -> float:
    return 24.0 * volume * math.log(10.0) / (c * surface * absorption)


def inverse_sabine_reflection(room: RoomConfig) -> float:
    """Uniform wall reflection coefficient realizing ``room.rt60`` under Sabine's formula."""
    if room.anechoic:
        return 0.0
    if room.volume <= 0:
        raise ConfigError("room volume must be positive")
    alpha = sabine_absorption(room)
    if alpha >= 1.0:
        raise InfeasibleRoomError(
            f"RT60={room.rt60}s needs absorption {alpha:.3f} >= 1 in a {room.dims} room")
    return math.sqrt(1.0 - alpha)


def default_max_order(room: RoomConfig, beta: float | None = None) -> int:
    """Reflection order where beta**order drops below 1e-4, capped by the room size."""
    beta = reflection_coefficient(room) if beta is None else beta
    if beta <= 0:
        return 0
    cap = 2 * math.ceil(room.rt60 * room.c / min(room.dims))
    if beta >= 1:
        return cap
    return min(math.ceil(math.log(1e-4) / math.log(beta)), cap)


def default_rir_length(room: RoomConfig, src=None, mic=None) -> int:
    if not room.anechoic:
        return int(math.ceil(room.rt60 * room.fs))
    if src is None or mic is None:
        far = room.source_range + room.spacing
    else:
        far = float(np.linalg.norm(np.asarray(src) - np.asarray(mic)))
    return int(math.ceil(far / room.c * room.fs)) + 2 * sinc_half_width(room.fs) + 2


@dataclass
class ImpulseResponse:
    taps: np.ndarray
    fs: int


def sinc_half_width(fs: float) -> int:
    """Interpolation half-width in samples (64 at 16 kHz)."""
    return max(4, int(round(SINC_SECONDS * fs)))


def _hann_sinc(t: np.ndarray, width: int) -> np.ndarray:
    window = np.where(np.abs(t) < width, 0.5 * (1.0 + np.cos(np.pi * t / width)), 0.0)
    return window * np.sinc(t)


def fractional_delay_taps(delay: np.ndarray, width: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed sinc interpolation with ``+/-width`` sample support.

    Returns integer tap positions ``(n_images, 2*width+1)`` and weights.
    """
    delay = np.asarray(delay, dtype=float)
    base = np.round(delay).astype(np.int64)
    pos = base[:, None] + np.arange(-width, width + 1)[None, :]
    return pos, _hann_sinc(pos - delay[:, None], width)


def _polyphase_render(delay: np.ndarray, gain: np.ndarray, length: int, width: int,
                      phases: int = POLYPHASE) -> np.ndarray:
    """Sum of windowed-sinc pulses with delays rounded to ``1/phases`` sample.

    Pulses sharing a sub-sample phase are accumulated on an integer grid and
    filtered with that phase's kernel in the frequency domain, so the cost is
    independent of the kernel length per image.
    """
    q = np.round(delay * phases).astype(np.int64)
    base, frac = np.divmod(q, phases)
    span = length + 2 * width + 1
    keep = (base > -width - 1) & (base < length + width)
    grid = np.bincount(frac[keep] * span + base[keep] + width, weights=gain[keep],
                       minlength=phases * span).reshape(phases, span)
    used = np.flatnonzero(grid.any(axis=1))
    n = next_fast_len(span + 2 * width + 1)
    t = np.arange(-width, width + 1)[None, :] - used[:, None] / phases
    spec = np.fft.rfft(grid[used], n) * np.fft.rfft(_hann_sinc(t, width), n)
    out = np.fft.irfft(spec.sum(axis=0), n)
    # grid index 0 is sample -width; kernel index 0 is offset -width
    return out[2 * width:2 * width + length]


def _image_offsets(room: RoomConfig, src: np.ndarray, mic: np.ndarray, max_dist: float, max_order: int):
    """Vectors image->mic and reflection counts for all images within ``max_dist``."""
    dims = np.asarray(room.dims, dtype=float)
    vecs, orders = [], []
    for axis in range(3):
        reach = int(math.ceil(max_dist / (2.0 * dims[axis]))) + 1
        lattice = np.arange(-reach, reach + 1)
        comp, cnt = [], []
        for u in (0, 1):
            comp.append((1 - 2 * u) * src[axis] + 2.0 * lattice * dims[axis] - mic[axis])
            cnt.append(np.abs(lattice - u) + np.abs(lattice))
        vecs.append(np.concatenate(comp))
        orders.append(np.concatenate(cnt))
    dx, dy, dz = np.meshgrid(*vecs, indexing="ij", sparse=True)
    ox, oy, oz = np.meshgrid(*orders, indexing="ij", sparse=True)
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    order = ox + oy + oz
    keep = (dist <= max_dist) & (order <= max_order)
    return dist[keep], order[keep]


def image_source_rir(room: RoomConfig, src, mic, max_order: int | None = None,
                     length: int | None = None, beta: float | None = None,
                     highpass: bool = True) -> ImpulseResponse:
    """Allen-Berkley image-source impulse response between ``src`` and ``mic``.

    Each image contributes ``beta**reflections / (4*pi*distance)`` at delay
    ``distance / c`` seconds, spread over neighbouring samples with a
    Hann-windowed sinc. ``beta`` defaults to :func:`reflection_coefficient`.
    The 100 Hz Allen-Berkley high-pass removes the DC build-up of the
    all-positive image sum; it is skipped for anechoic rooms.
    """
    src = np.asarray(src, dtype=float)
    mic = np.asarray(mic, dtype=float)
    check_inside(room, src, "source")
    check_inside(room, mic, "microphone")
    if np.linalg.norm(src - mic) < 1e-9:
        raise GeometryError("source and microphone coincide")
    if beta is None:
        beta = reflection_coefficient(room)
    if max_order is None:
        max_order = default_max_order(room, beta)
    if max_order < 0:
        raise ConfigError("max_order must be >= 0")
    if beta == 0:
        max_order = 0
    if length is None:
        length = default_rir_length(room, src, mic)
    width = sinc_half_width(room.fs)
    max_dist = (length - 1 + width) * room.c / room.fs
    dist, order = _image_offsets(room, src, mic, max_dist, max_order)
    delay = dist / room.c * room.fs
    direct = order == 0
    pos, w = fractional_delay_taps(delay[direct], width)
    w = w / (4.0 * np.pi * dist[direct][:, None])
    valid = (pos >= 0) & (pos < length)
    taps = np.bincount(pos[valid], weights=w[valid], minlength=length)[:length]
    if np.any(~direct):
        gain = beta ** order[~direct].astype(float) / (4.0 * np.pi * dist[~direct])
        taps = taps + _polyphase_render(delay[~direct], gain, length, width)
    if highpass and beta > 0:
        taps = allen_berkley_highpass(taps, room.fs)
    return ImpulseResponse(taps=taps, fs=room.fs)


def allen_berkley_highpass(h: np.ndarray, fs: float, cutoff: float = 100.0) -> np.ndarray:
    w = 2.0 * math.pi * cutoff / fs
    r1 = math.exp(-w)
    b1 = 2.0 * r1 * math.cos(w)
    b2 = -r1 * r1
    a1 = -(1.0 + r1)
    return lfilter([1.0, a1, r1], [1.0, -b1, -b2], h)


@functools.lru_cache(maxsize=32)
def _calibrated_beta(room: RoomConfig) -> float:
    src = room.source_position(0.0)
    length = default_rir_length(room)

    def excess(beta):
        ir = image_source_rir(room, src, room.mics[0], length=length, beta=beta)
        try:
            return rt60_schroeder(ir) - room.rt60
        except InsufficientLengthError:
            return -room.rt60

    hi = inverse_sabine_reflection(room)
    if excess(hi) <= 0:
        return hi
    lo = hi * 0.5
    while excess(lo) > 0:
        lo *= 0.5
    return brentq(excess, lo, hi, xtol=1e-6)


def reflection_coefficient(room: RoomConfig) -> float:
    """Wall reflection coefficient used for simulation.

    ``reflection='sabine'`` returns :func:`inverse_sabine_reflection`.
    ``'calibrated'`` lowers it until the Schroeder RT60 of the broadside
    source-to-microphone-1 response equals ``room.rt60``: in a shoebox the
    image-source decay is slower than Sabine predicts (grazing paths hit few
    walls), so the closed form overshoots the requested reverberation time.
    """
    if room.anechoic:
        return 0.0
    if room.reflection == "sabine":
        return inverse_sabine_reflection(room)
    # cache key ignores everything that does not affect the impulse response
    key = room.with_(name="", doa_grid=DoaGrid((0.0,)), realizations=1, snr_db=0.0, signal_seconds=1.0)
    return _calibrated_beta(key)


def rt60_schroeder(ir: ImpulseResponse, lo_db: float = -5.0, hi_db: float = -35.0,
                   min_points: int = 16) -> float:
    """Reverberation time from the backward-integrated energy decay curve.

    A straight line is fitted to the decay curve between ``lo_db`` and
    ``hi_db`` and extrapolated to 60 dB of decay.
    """
    h = np.asarray(ir.taps if isinstance(ir, ImpulseResponse) else ir, dtype=float)
    fs = ir.fs if isinstance(ir, ImpulseResponse) else None
    if fs is None:
        raise ValueError("rt60_schroeder needs an ImpulseResponse carrying fs")
    energy = h * h
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise InsufficientLengthError("impulse response has no energy")
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc / edc[0])
    start = np.flatnonzero(edc_db <= lo_db)
    stop = np.flatnonzero(edc_db <= hi_db)
    if start.size == 0 or stop.size == 0:
        raise InsufficientLengthError(f"decay curve never reaches {hi_db} dB")
    i0, i1 = start[0], stop[0]
    if i1 - i0 + 1 < min_points:
        raise InsufficientLengthError(
            f"decay from {lo_db} to {hi_db} dB spans only {i1 - i0 + 1} samples")
    t = np.arange(i0, i1 + 1) / fs
    slope, _ = np.polyfit(t, edc_db[i0:i1 + 1], 1)
    if slope >= 0:
        raise InsufficientLengthError("energy decay curve is not decaying")
    return float(-60.0 / slope)


# rendering ---------------------------------------------------------------

@dataclass(frozen=True)
class Span:
    """One recording inside the concatenated stream: samples [start, stop)."""

    start: int
    stop: int
    doa_index: int
    realization: int


@dataclass
class MicSignals:
    d1: np.ndarray
    d2: np.ndarray
    fs: int
    spans: list[Span] = field(default_factory=list)

    def __post_init__(self):
        if self.d1.shape != self.d2.shape:
            raise DegenerateInputError(f"channel lengths differ: {self.d1.shape} vs {self.d2.shape}")

    def recordings(self) -> Iterator[tuple[Span, np.ndarray, np.ndarray]]:
        for sp in self.spans:
            yield sp, self.d1[sp.start:sp.stop], self.d2[sp.start:sp.stop]

    def labels_per_sample(self) -> np.ndarray:
        lab = np.full(self.d1.shape[0], -1, dtype=np.int64)
        for sp in self.spans:
            lab[sp.start:sp.stop] = sp.doa_index
        return lab


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def render_microphone_signals(rir1: ImpulseResponse, rir2: ImpulseResponse, src_signal: np.ndarray,
                              snr_db: float, rng: np.random.Generator | int | None = None,
                              discard: int = 0, doa_index: int = -1) -> MicSignals:
    """Convolve the source with both impulse responses and add white sensor noise.

    The causal convolution is truncated to ``len(src_signal)`` samples and the
    first ``discard`` samples (filter warm-up) are dropped before noise is
    added. Noise is scaled so each channel's measured SNR equals ``snr_db``;
    ``snr_db = inf`` disables noise.
    """
    s = np.asarray(src_signal, dtype=float)
    n = s.shape[0]
    clean = [fftconvolve(s, r.taps)[:n][discard:] for r in (rir1, rir2)]
    out = []
    if math.isinf(snr_db) and snr_db > 0:
        out = clean
    else:
        if not math.isfinite(snr_db):
            raise DegenerateInputError(f"snr_db must be finite or +inf, got {snr_db}")
        gen = np.random.default_rng(rng)
        for x in clean:
            p = signal_power(x)
            if p <= 0:
                raise DegenerateInputError("source produces zero power at the microphone; SNR undefined")
            u = gen.standard_normal(x.shape[0])
            u *= math.sqrt(p / (10.0 ** (snr_db / 10.0)) / signal_power(u))
            out.append(x + u)
    d1, d2 = out
    return MicSignals(d1=d1, d2=d2, fs=rir1.fs, spans=[Span(0, d1.shape[0], doa_index, 0)])


def _rir_pair(args):
    room, pos, beta = args
    return tuple(image_source_rir(room, pos, m, beta=beta) for m in room.mics)


def room_rirs(room: RoomConfig, jobs: int = 1) -> list[tuple[ImpulseResponse, ImpulseResponse]]:
    """Impulse-response pair for every DOA on the room's grid.

    ``jobs > 1`` spreads the DOAs over worker processes; results are identical.
    """
    beta = reflection_coefficient(room)
    work = [(room, pos, beta) for pos in room.source_positions()]
    if jobs <= 1:
        return [_rir_pair(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_rir_pair, work))


def room_salt(room: RoomConfig) -> int:
    """Stable per-room integer mixed into the seed so rooms never share source draws."""
    return zlib.crc32(room.name.encode())


def generate_room_dataset(preset: str | RoomConfig, seed: int, jobs: int = 1) -> MicSignals:
    """Simulate every (realization, DOA) recording and concatenate them.

    Recordings are ordered realization-major (all DOAs of realization 0, then
    realization 1, ...), so DOA changes occur only at recording boundaries.
    Recording ``(r, t)`` draws its source and noise from
    ``default_rng([seed, room_salt(room), r, t])``.
    """
    room = get_preset(preset) if isinstance(preset, str) else preset
    n = room.samples_per_recording
    rirs = room_rirs(room, jobs)
    salt = room_salt(room)
    warm = max(max(a.taps.size, b.taps.size) for a, b in rirs) - 1
    d1, d2, spans = [], [], []
    start = 0
    for r in range(room.realizations):
        for t, (a1, a2) in enumerate(rirs):
            gen = np.random.default_rng([seed, salt, r, t])
            s = gen.standard_normal(n + warm)
            rec = render_microphone_signals(a1, a2, s, room.snr_db, gen, discard=warm)
            d1.append(rec.d1)
            d2.append(rec.d2)
            spans.append(Span(start, start + n, t, r))
            start += n
    return MicSignals(d1=np.concatenate(d1), d2=np.concatenate(d2), fs=room.fs, spans=spans)
