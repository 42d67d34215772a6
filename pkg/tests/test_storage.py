import numpy as np
import pytest

from reverb_doa_lab import storage, vae
from reverb_doa_lab.errors import ArtifactError
from reverb_doa_lab.features import SampleSet
from reverb_doa_lab.roomsim import MicSignals, Span, get_preset


@pytest.fixture
def signals(rng):
    n = 300
    spans = [Span(0, 150, 0, 0), Span(150, 300, 1, 0)]
    return MicSignals(rng.normal(size=n), rng.normal(size=n), 16000, spans)


class TestSignals:
    def test_round_trip(self, tmp_path, signals):
        path = storage.save_signals(tmp_path, get_preset("desk"), 3, signals)
        assert path.name == "desk_3.sig"
        back, meta = storage.load_signals(path)
        # stored as float32
        np.testing.assert_allclose(back.d1, signals.d1, rtol=1e-7, atol=1e-7)
        np.testing.assert_array_equal(back.d2, signals.d2.astype(np.float32))
        assert back.spans == signals.spans and back.fs == 16000
        assert meta["seed"] == 3 and meta["recordings"] == 2

    def test_little_endian_channel_major(self, tmp_path, signals):
        path = storage.save_signals(tmp_path, get_preset("desk"), 0, signals)
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        assert raw.size == 600
        assert raw[0] == np.float32(signals.d1[0]) and raw[300] == np.float32(signals.d2[0])

    def test_truncated_data(self, tmp_path, signals):
        path = storage.save_signals(tmp_path, get_preset("desk"), 0, signals)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ArtifactError):
            storage.load_signals(path)

    def test_missing(self, tmp_path):
        with pytest.raises(ArtifactError):
            storage.load_signals(tmp_path / "nope.sig")

    def test_artifact_error_is_os_error(self):
        assert issubclass(ArtifactError, OSError)


class TestFeatures:
    def test_round_trip(self, tmp_path, rng):
        s = SampleSet(rng.uniform(size=(3, 2, 4)), np.array([0, -1, 2]), np.array([0, 2, 4]),
                      normalized=True, norm=(-3.1, 2.9), n_frames=9)
        path = storage.save_features(tmp_path / "f", s, stride=2, extra={"preset": "x"})
        back, meta = storage.load_features(path)
        assert back.x.tobytes() == s.x.tobytes()
        assert back.labels.tolist() == [0, -1, 2] and back.norm == (-3.1, 2.9)
        assert meta["labeled_windows"] == 2 and meta["rtf_frames"] == 9 and meta["preset"] == "x"

    def test_wrong_kind(self, tmp_path, signals):
        path = storage.save_signals(tmp_path, get_preset("desk"), 0, signals)
        with pytest.raises(ArtifactError):
            storage.load_features(path)


class TestCheckpoint:
    ARCH = vae.ArchSpec(n_classes=3, height=4, width=8, channels=2, hidden=5)

    def test_round_trip_exact(self, tmp_path):
        p = vae.init_params(self.ARCH, 2)
        path = storage.save_checkpoint(tmp_path / "m", p, {"epoch": 7})
        back, meta = storage.load_checkpoint(path)
        assert meta["epoch"] == 7 and back.arch == self.ARCH
        for k, v in p.arrays().items():
            assert back[k].data.tobytes() == v.tobytes()

    def test_bytes_deterministic(self, tmp_path):
        p = vae.init_params(self.ARCH, 2)
        a = storage.save_checkpoint(tmp_path / "a", p, {})
        b = storage.save_checkpoint(tmp_path / "b", p, {})
        assert a.read_bytes() == b.read_bytes()
        assert a.with_suffix(".json").read_bytes() == b.with_suffix(".json").read_bytes()

    def test_hash_mismatch(self, tmp_path):
        path = storage.save_checkpoint(tmp_path / "m", vae.zero_params(self.ARCH), {})
        meta = storage.read_json(path.with_suffix(".json"))
        meta["arch_hash"] = "0" * len(meta["arch_hash"])
        storage.write_json(path.with_suffix(".json"), meta)
        with pytest.raises(ArtifactError, match="hash"):
            storage.load_checkpoint(path)

    def test_bad_json(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        with pytest.raises(ArtifactError):
            storage.load_checkpoint(tmp_path / "m.ckpt")
