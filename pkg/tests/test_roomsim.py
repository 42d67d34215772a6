import math

import numpy as np
import pytest

from reverb_doa_lab import roomsim as rs
from reverb_doa_lab.errors import (
    ConfigError,
    DegenerateInputError,
    GeometryError,
    InfeasibleRoomError,
    InsufficientLengthError,
)


@pytest.fixture(scope="module")
def design():
    return rs.get_preset("design")


def small_room(**kw):
    base = dict(name="tiny", dims=(4.0, 5.0, 3.0), rt60=0.3, mics=((1.96, 2.5, 1.5), (2.04, 2.5, 1.5)),
                doa_grid=rs.DoaGrid((-60.0, 0.0, 60.0)), source_range=1.0, realizations=2,
                signal_seconds=0.25)
    base.update(kw)
    return rs.RoomConfig(**base)


class TestPresets:
    def test_design(self, design):
        assert design.dims == (6.0, 6.0, 2.4)
        assert design.rt60 == 0.5 and design.c == 343.0 and design.fs == 16000
        assert design.spacing == pytest.approx(0.08)
        assert len(design.doa_grid) == 37 and design.realizations == 10
        assert design.snr_db == 20.0 and design.source_range == 1.5
        assert np.allclose(np.diff(design.doa_grid.angles), 5.0)

    def test_off_design_rooms(self):
        assert rs.get_preset("validation").rt60 == 0.7
        t1, t2 = rs.get_preset("test1"), rs.get_preset("test2")
        assert t2.rt60 == 0.6 and t1.rt60 == 0.5
        dy = [m[1] - 3.0 for m in t1.mics]
        assert dy[0] == pytest.approx(0.005) and dy[1] == pytest.approx(-0.003)
        assert t1.mics == t2.mics

    def test_desk(self):
        desk = rs.get_preset("desk")
        assert len(desk.doa_grid) == 19 and desk.realizations == 2 and desk.rt60 == 0.5
        assert len(desk.doa_grid) * desk.realizations == 38

    def test_unknown(self):
        with pytest.raises(ConfigError):
            rs.get_preset("basement")

    def test_sources_inside(self, design):
        for p in design.source_positions():
            rs.check_inside(design, p)
            assert np.linalg.norm(p - design.center) == pytest.approx(1.5)

    def test_invalid_geometry(self):
        with pytest.raises(GeometryError):
            small_room(mics=((0.0, 2.5, 1.5), (2.04, 2.5, 1.5)))
        with pytest.raises(ConfigError):
            small_room(mics=((1.96, 2.5, 1.5),))

    def test_grid_lookup(self, design):
        g = design.doa_grid
        assert g.angle(18) == 0.0 and g.angle(0) == -90.0 and g.angle(36) == 90.0
        assert g.index(45.0) == 27
        with pytest.raises(ConfigError):
            g.index(42.0)


class TestSabine:
    def test_design_value(self, design):
        alpha = 24 * 86.4 * math.log(10) / (343 * 129.6 * 0.5)
        assert rs.inverse_sabine_reflection(design) == pytest.approx(math.sqrt(1 - alpha), rel=1e-12)

    def test_long_rt60_limit(self, design):
        assert rs.inverse_sabine_reflection(design.with_(rt60=1e9)) == pytest.approx(1.0, abs=1e-8)

    def test_round_trip(self, design):
        alpha = 1 - rs.inverse_sabine_reflection(design) ** 2
        assert rs.sabine_rt60(design.volume, design.surface, alpha) == pytest.approx(0.5, abs=1e-9)

    def test_infeasible(self, design):
        with pytest.raises(InfeasibleRoomError):
            rs.inverse_sabine_reflection(design.with_(rt60=0.05))

    def test_calibration_reduces_reflection(self, design):
        assert rs.reflection_coefficient(design.with_(reflection="sabine")) == rs.inverse_sabine_reflection(design)
        assert rs.reflection_coefficient(design) < rs.inverse_sabine_reflection(design)

    def test_max_order_rule(self, design):
        beta = rs.reflection_coefficient(design)
        n = rs.default_max_order(design)
        assert beta ** n < 1e-4 <= beta ** (n - 1)
        assert n <= 2 * math.ceil(0.5 * 343 / 2.4)
        assert rs.default_max_order(design, beta=0.0) == 0


class TestImageSource:
    def test_anechoic_direct_path_delay(self):
        room = rs.get_preset("desk-anechoic")
        mic = np.array(room.mics[0])
        src = mic + np.array([0.0, 1.5, 0.0])
        ir = rs.image_source_rir(room, src, mic)
        delay = 1.5 / 343 * 16000
        assert delay == pytest.approx(69.97, abs=0.01)
        pos, w = rs.fractional_delay_taps(np.array([delay]))
        expected = np.zeros_like(ir.taps)
        expected[pos[0]] = w[0] / (4 * np.pi * 1.5)
        np.testing.assert_allclose(ir.taps, expected, atol=1e-15)
        assert np.argmax(ir.taps) == 70
        # first moment of the pulse sits on the fractional delay
        assert np.sum(np.arange(ir.taps.size) * ir.taps) / np.sum(ir.taps) == pytest.approx(delay, abs=0.02)

    def test_mirror_symmetry(self, design):
        src = design.source_position(35.0)
        mic = np.array(design.mics[0])
        flip = np.array([-1.0, 1.0, 1.0])
        shift = np.array([6.0, 0.0, 0.0])
        a = rs.image_source_rir(design, src, mic, length=3000)
        b = rs.image_source_rir(design, src * flip + shift, mic * flip + shift, length=3000)
        np.testing.assert_allclose(a.taps, b.taps, atol=1e-12)

    def test_shell_energy_decreases_with_order(self, design):
        beta = rs.reflection_coefficient(design)
        src, mic = design.source_position(20.0), np.array(design.mics[1])
        dist, order = rs._image_offsets(design, src, mic, 400.0, 12)
        shell = [np.sum((beta ** k / (4 * np.pi * dist[order == k])) ** 2) for k in range(13)]
        assert all(b <= a for a, b in zip(shell, shell[1:]))

    def test_source_outside(self, design):
        with pytest.raises(GeometryError):
            rs.image_source_rir(design, [7.0, 1.0, 1.0], design.mics[0])
        with pytest.raises(GeometryError):
            rs.image_source_rir(design, design.mics[0], design.mics[0])

    def test_length_covers_rt60(self, design):
        ir = rs.image_source_rir(design, design.source_position(0.0), design.mics[0])
        assert ir.taps.size >= 0.5 * 16000
        assert np.all(np.isfinite(ir.taps))

    @pytest.mark.parametrize("angle", [-90.0, -30.0, 0.0, 55.0, 90.0])
    def test_schroeder_rt60_of_design_rir(self, design, angle):
        for mic in design.mics:
            ir = rs.image_source_rir(design, design.source_position(angle), mic)
            assert rs.rt60_schroeder(ir) == pytest.approx(0.5, rel=0.15)


class TestSchroeder:
    @pytest.mark.parametrize("tau", [0.02, 0.05, 0.1])
    def test_exponential_envelope(self, tau):
        fs = 16000
        t = np.arange(int(8 * tau * fs)) / fs
        noise = np.random.default_rng(0).standard_normal(t.size)
        ir = rs.ImpulseResponse(np.exp(-t / tau) * noise, fs)
        assert rs.rt60_schroeder(ir) == pytest.approx(6.91 * tau, rel=0.05)

    def test_smooth_envelope_is_exact(self):
        fs, tau = 8000, 0.03
        t = np.arange(int(10 * tau * fs)) / fs
        # energy exp(-2t/tau) integrates to a pure exponential on an infinite tail;
        # truncation error at 10 tau is below 1e-8 relative
        got = rs.rt60_schroeder(rs.ImpulseResponse(np.exp(-t / tau), fs))
        assert got == pytest.approx(3 * math.log(10) * tau, rel=1e-3)

    def test_pure_impulse(self):
        h = np.zeros(1000)
        h[10] = 1.0
        with pytest.raises(InsufficientLengthError):
            rs.rt60_schroeder(rs.ImpulseResponse(h, 16000))

    def test_anechoic_rir(self):
        room = rs.get_preset("desk-anechoic")
        ir = rs.image_source_rir(room, room.source_position(0.0), room.mics[0])
        with pytest.raises(InsufficientLengthError):
            rs.rt60_schroeder(ir)


class TestRender:
    def test_fft_convolution_matches_direct(self):
        rng = np.random.default_rng(3)
        for _ in range(3):
            a1 = rs.ImpulseResponse(rng.normal(size=1000), 16000)
            a2 = rs.ImpulseResponse(rng.normal(size=1000), 16000)
            s = rng.normal(size=3000)
            out = rs.render_microphone_signals(a1, a2, s, math.inf)
            direct = np.array([sum(a1.taps[k] * s[t - k] for k in range(min(t + 1, 1000))) for t in range(0, 3000, 37)])
            np.testing.assert_allclose(out.d1[::37], direct, atol=1e-9)
            np.testing.assert_allclose(out.d2, np.convolve(s, a2.taps)[:3000], atol=1e-9)

    def test_noise_free_is_exact_convolution(self):
        rng = np.random.default_rng(4)
        a = rs.ImpulseResponse(rng.normal(size=50), 16000)
        s = rng.normal(size=400)
        out = rs.render_microphone_signals(a, a, s, math.inf)
        np.testing.assert_allclose(out.d1, np.convolve(s, a.taps)[:400], atol=1e-12)

    def test_snr(self, design):
        rng = np.random.default_rng(5)
        a1 = rs.image_source_rir(design, design.source_position(10.0), design.mics[0])
        a2 = rs.image_source_rir(design, design.source_position(10.0), design.mics[1])
        s = rng.standard_normal(16000 + 8000)
        clean = rs.render_microphone_signals(a1, a2, s, math.inf, discard=8000)
        noisy = rs.render_microphone_signals(a1, a2, s, 20.0, rng=7, discard=8000)
        for c, d in ((clean.d1, noisy.d1), (clean.d2, noisy.d2)):
            snr = 10 * np.log10(np.mean(c ** 2) / np.mean((d - c) ** 2))
            assert abs(snr - 20.0) < 0.1

    def test_silent_source(self):
        a = rs.ImpulseResponse(np.ones(4), 16000)
        with pytest.raises(DegenerateInputError):
            rs.render_microphone_signals(a, a, np.zeros(100), 20.0, rng=0)

    def test_swapping_mics_swaps_channels(self, design):
        s = np.random.default_rng(6).standard_normal(2000)
        src = design.source_position(-40.0)
        a1, a2 = (rs.image_source_rir(design, src, m, length=1500) for m in design.mics)
        one = rs.render_microphone_signals(a1, a2, s, math.inf)
        two = rs.render_microphone_signals(a2, a1, s, math.inf)
        np.testing.assert_array_equal(one.d1, two.d2)
        np.testing.assert_array_equal(one.d2, two.d1)


class TestDataset:
    def test_stream_layout(self):
        room = small_room()
        sig = rs.generate_room_dataset(room, seed=3)
        n = room.samples_per_recording
        assert len(sig.spans) == 3 * 2
        assert sig.d1.shape == sig.d2.shape == (6 * n,)
        assert [(sp.realization, sp.doa_index) for sp in sig.spans] == [(r, t) for r in range(2) for t in range(3)]
        labels = sig.labels_per_sample()
        changes = np.flatnonzero(np.diff(labels)) + 1
        assert set(changes) <= {sp.start for sp in sig.spans}
        assert np.all(labels >= 0)

    def test_deterministic(self):
        room = small_room()
        a, b = rs.generate_room_dataset(room, seed=9), rs.generate_room_dataset(room, seed=9)
        assert a.d1.tobytes() == b.d1.tobytes() and a.d2.tobytes() == b.d2.tobytes()
        c = rs.generate_room_dataset(room, seed=10)
        assert not np.array_equal(a.d1, c.d1)

    def test_full_design_recording_count(self, design):
        assert len(design.doa_grid) * design.realizations == 370


class TestPolyphase:
    def test_matches_exact_summation(self):
        rng = np.random.default_rng(11)
        delay = rng.uniform(-70.0, 1100.0, 400)
        gain = rng.normal(size=400)
        pos, w = rs.fractional_delay_taps(delay, 64)
        ok = (pos >= 0) & (pos < 1000)
        exact = np.bincount(pos[ok], weights=(w * gain[:, None])[ok], minlength=1000)[:1000]
        fast = rs._polyphase_render(delay, gain, 1000, 64)
        assert np.abs(fast - exact).max() < 5e-3 * np.abs(exact).max()

    def test_on_grid_delay_is_exact(self):
        out = rs._polyphase_render(np.array([10.5, 200.25]), np.array([1.0, -2.0]), 300, 64)
        pos, w = rs.fractional_delay_taps(np.array([10.5, 200.25]), 64)
        ok = (pos >= 0) & (pos < 300)
        exact = np.bincount(pos[ok], weights=(w * np.array([[1.0], [-2.0]]))[ok], minlength=300)
        np.testing.assert_allclose(out, exact, atol=1e-12)

    def test_half_width(self):
        assert rs.sinc_half_width(16000) == 64
