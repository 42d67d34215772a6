import math

import numpy as np
import pytest
from scipy import stats

from reverb_doa_lab import autodiff as ad
from reverb_doa_lab import vae
from reverb_doa_lab.autodiff.gradcheck import max_relative_error
from reverb_doa_lab.errors import ContractError, DimensionError
from reverb_doa_lab.roomsim import DoaGrid

TINY = vae.ArchSpec(n_classes=3, height=4, width=8, channels=2, hidden=5, latent=2)
FULL = vae.ArchSpec(n_classes=37)


@pytest.fixture(scope="module")
def full_zero():
    return vae.zero_params(FULL)


def naive_unlabeled(params, x, eps):
    """Direct expectation over labels with scipy densities, one sample at a time."""
    t = params.arch.n_classes
    out = []
    for xn, en in zip(x, eps):
        with ad.no_grad():
            q = vae.classifier_forward(params, xn).data[0]
        total = 0.0
        for y in range(t):
            with ad.no_grad():
                mu, var = (a.data[0] for a in vae.inference_forward(params, xn, y))
                z = mu + np.sqrt(var) * en
                x_hat = vae.generative_forward(params, y, z).data[0]
            log_px = stats.norm.logpdf(xn, loc=x_hat, scale=1.0).sum()
            log_pz = stats.norm.logpdf(z).sum()
            log_qz = stats.norm.logpdf(z, loc=mu, scale=np.sqrt(var)).sum()
            c = -(log_px + math.log(1.0 / t) + log_pz - log_qz)
            total += q[y] * (c + math.log(q[y]))
        out.append(total)
    return np.array(out)


class TestArchitecture:
    def test_flat_size(self):
        assert FULL.flat == 2048 and FULL.coarse == (8, 32)

    def test_param_shapes(self):
        p = vae.init_params(FULL, 0)
        assert p["inf.out.w"].shape == (4, 200)
        assert p["inf.fc1.w"].shape == (200, 2048 + 37)
        assert p["gen.fc2.w"].shape == (2048, 200)

    def test_init_bounds(self):
        p = vae.init_params(FULL, 3)
        assert np.abs(p["cls.fc1.w"].data).max() <= 1 / math.sqrt(2048)
        assert np.abs(p["cls.conv1.w"].data).max() <= 1 / 3

    def test_init_deterministic(self):
        a, b = vae.init_params(TINY, 5), vae.init_params(TINY, 5)
        for k in a.tensors:
            np.testing.assert_array_equal(a[k].data, b[k].data)

    def test_bad_input_shape(self):
        with pytest.raises(DimensionError):
            vae.classifier_forward(vae.zero_params(TINY), np.zeros((4, 9)))

    def test_digest_changes(self):
        assert TINY.digest() != FULL.digest()


class TestForward:
    def test_classifier_simplex(self, rng):
        p = vae.init_params(TINY, 1)
        pi = vae.classifier_forward(p, rng.uniform(size=(6, 4, 8))).data
        np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_weights_uniform(self, full_zero):
        pi = vae.classifier_forward(full_zero, np.zeros((32, 128))).data
        np.testing.assert_allclose(pi, 1 / 37, atol=1e-15)

    def test_zero_inference(self, full_zero):
        mu, var = vae.inference_forward(full_zero, np.zeros((32, 128)), 4)
        assert mu.shape == (1, 2) and var.shape == (1, 2)
        np.testing.assert_array_equal(mu.data, 0.0)
        np.testing.assert_array_equal(var.data, 1.0)

    def test_label_changes_posterior(self, rng):
        p = vae.init_params(TINY, 2)
        x = rng.uniform(size=(4, 8))
        a = vae.inference_forward(p, x, 0)[0].data
        b = vae.inference_forward(p, x, 1)[0].data
        assert not np.allclose(a, b)

    def test_generative(self, full_zero, rng):
        out = vae.generative_forward(full_zero, 3, np.zeros(2))
        assert out.shape == (1, 32, 128) and not out.data.any()
        p = vae.init_params(FULL, 0)
        z = rng.normal(size=2)
        a, b = vae.generative_forward(p, 5, z).data, vae.generative_forward(p, 5, z).data
        assert a.tobytes() == b.tobytes()

    def test_generative_matches_unfused_layers(self, rng):
        p = vae.init_params(TINY, 4)
        z = rng.normal(size=(2, 2))
        h = ad.concat([ad.Tensor(vae.one_hot([0, 2], 3)), ad.Tensor(z)], axis=-1)
        h = ad.relu(ad.dense(h, p["gen.fc1.w"], p["gen.fc1.b"]))
        h = ad.relu(ad.dense(h, p["gen.fc2.w"], p["gen.fc2.b"]))
        h = ad.reshape(h, (2, 2, 1, 2))
        h = ad.relu(ad.transpose_conv2d(ad.max_unpool2d(h), p["gen.tconv1.w"], p["gen.tconv1.b"]))
        h = ad.transpose_conv2d(ad.max_unpool2d(h), p["gen.tconv2.w"], p["gen.tconv2.b"])
        np.testing.assert_allclose(vae.generative_forward(p, [0, 2], z).data, h.data[:, 0], atol=1e-13)

    def test_checked_mode_rejects_unnormalized(self):
        p = vae.zero_params(TINY)
        with ad.checked():
            with pytest.raises(ContractError):
                vae.classifier_forward(p, np.full((4, 8), 2.0))


class TestLabeledObjective:
    def test_zero_model_value(self, full_zero):
        c, aux = vae.labeled_objective(full_zero, np.zeros((32, 128)), 7, np.zeros(2))
        expected = (32 * 128 / 2) * math.log(2 * math.pi) + math.log(37)
        assert expected == pytest.approx(3767.58, abs=0.01)
        assert c.item() == pytest.approx(expected, abs=1e-9)
        assert 10 * aux.item() == pytest.approx(10 * math.log(37), abs=1e-12)
        assert 10 * aux.item() == pytest.approx(36.11, abs=0.01)

    def test_alpha_total(self, rng):
        p = vae.init_params(TINY, 0)
        x, eps = rng.uniform(size=(3, 4, 8)), rng.normal(size=(3, 2))
        c, aux, total = vae.labeled_objective(p, x, [0, 1, 2], eps, alpha=20.0)
        assert total.item() == pytest.approx(c.item() + 20.0 * aux.item(), rel=1e-14)

    def test_batch_is_sum_of_samples(self, rng):
        p = vae.init_params(TINY, 1)
        x, y, eps = rng.uniform(size=(5, 4, 8)), np.array([0, 2, 1, 1, 0]), rng.normal(size=(5, 2))
        c, aux = vae.labeled_objective(p, x, y, eps)
        parts = [vae.labeled_objective(p, x[i], y[i], eps[i]) for i in range(5)]
        assert c.item() == pytest.approx(sum(a.item() for a, _ in parts), rel=1e-13)
        assert aux.item() == pytest.approx(sum(b.item() for _, b in parts), rel=1e-13)

    def test_eps_shape(self):
        with pytest.raises(DimensionError):
            vae.labeled_terms(vae.zero_params(TINY), np.zeros((2, 4, 8)), [0, 1], np.zeros((2, 3)))


class TestUnlabeledObjective:
    def test_entropy_identity(self):
        arch = vae.ArchSpec(n_classes=2, height=4, width=8, channels=2, hidden=3)
        p = vae.zero_params(arch)
        x = np.zeros((1, 4, 8))
        c, _ = vae.labeled_objective(p, x, 0, np.zeros(2))
        d = vae.unlabeled_objective(p, x, np.zeros((1, 2)))
        assert d.item() == pytest.approx(c.item() + math.log(0.5), abs=1e-12)

    def test_indicator_classifier(self, rng):
        p = vae.init_params(TINY, 3)
        p["cls.out.w"].data[:] = 0.0
        p["cls.out.b"].data[:] = [0.0, 800.0, 0.0]
        x, eps = rng.uniform(size=(1, 4, 8)), rng.normal(size=(1, 2))
        c, _ = vae.labeled_objective(p, x, 1, eps)
        assert vae.unlabeled_objective(p, x, eps).item() == pytest.approx(c.item(), abs=1e-10)

    def test_matches_naive_expectation(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for trial in range(100):
            p = vae.init_params(TINY, rng)
            for k in p.tensors:
                p[k].data *= rng.uniform(0.5, 3.0)
            n = int(rng.integers(1, 4))
            x, eps = rng.uniform(size=(n, 4, 8)), rng.normal(size=(n, 2))
            fast = vae.unlabeled_terms(p, x, eps).data
            worst = max(worst, np.abs(fast - naive_unlabeled(p, x, eps)).max())
        assert worst < 1e-10

    def test_entropy_decomposition(self, rng):
        p = vae.init_params(TINY, 8)
        x, eps = rng.uniform(size=(2, 4, 8)), rng.normal(size=(2, 2))
        q = vae.classifier_forward(p, x).data
        cs = np.stack([vae.labeled_terms(p, x, np.full(2, y), eps)[0].data for y in range(3)], axis=1)
        entropy = -(q * np.log(q)).sum(axis=1)
        assert np.all(entropy >= 0)
        np.testing.assert_allclose(vae.unlabeled_terms(p, x, eps).data, (q * cs).sum(axis=1) - entropy,
                                   atol=1e-10)


class TestGradients:
    def test_objective_alpha_matches_finite_differences(self, rng):
        p = vae.init_params(TINY, 11)
        xl, yl, el = rng.uniform(size=(2, 4, 8)), np.array([0, 2]), rng.normal(size=(2, 2))
        xu, eu = rng.uniform(size=(2, 4, 8)), rng.normal(size=(2, 2))

        def objective():
            _, _, lab = vae.labeled_objective(p, xl, yl, el, alpha=10.0)
            return lab + vae.unlabeled_objective(p, xu, eu)

        assert max_relative_error(objective, list(p.tensors.values()), h=1e-6) < 1e-4


class TestPrediction:
    def test_uniform_ties_to_first(self, full_zero):
        grid = DoaGrid.uniform(5.0)
        assert vae.predict_doa(full_zero, np.zeros((32, 128)), grid)[0] == -90.0

    @pytest.mark.parametrize("idx,angle", [(0, -90.0), (18, 0.0), (36, 90.0)])
    def test_index_to_angle(self, idx, angle):
        assert DoaGrid.uniform(5.0).angle(idx) == angle

    def test_generate_zero_latent(self, rng):
        p = vae.init_params(TINY, 6)
        out = vae.generate_rtf_phase(p, 1)
        np.testing.assert_array_equal(out, vae.generative_forward(p, 1, np.zeros(2)).data[0])
        assert out.shape == (4, 8)
        assert not np.array_equal(vae.generate_rtf_phase(p, 1, seed=3), out)

    def test_full_size_generation_shape(self):
        assert vae.generate_rtf_phase(vae.init_params(FULL, 0), 3, seed=1).shape == (32, 128)
