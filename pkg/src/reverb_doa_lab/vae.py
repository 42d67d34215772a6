"""M2 semi-supervised VAE: classifier, latent inference and generative networks.

All three networks are built on the :mod:`reverb_doa_lab.autodiff` engine and
operate on batches of RTF-phase samples ``x`` of shape ``(N, P, K)``.

Parameter names are ``<net>.<layer>.<w|b>`` with ``net`` one of ``cls``
(classifier q(y|x)), ``inf`` (inference q(z|x,y)) and ``gen`` (generative
p(x|y,z)).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError, DomainError
from .roomsim import DoaGrid


@dataclass(frozen=True)
class ArchSpec:
    """Network sizes. The defaults are the full-size 32x128 model."""

    n_classes: int
    height: int = 32
    width: int = 128
    channels: int = 8
    hidden: int = 200
    latent: int = 2

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ConfigError(f"input {self.height}x{self.width} must be divisible by 4 (two 2x2 pools)")
        if min(self.n_classes, self.channels, self.hidden, self.latent) < 1:
            raise ConfigError("architecture sizes must be positive")

    @property
    def coarse(self) -> tuple[int, int]:
        return self.height // 4, self.width // 4

    @property
    def flat(self) -> int:
        h, w = self.coarse
        return self.channels * h * w

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def layer_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    c, t, m, hd, f = arch.channels, arch.n_classes, arch.latent, arch.hidden, arch.flat
    shapes = {}
    for net in ("cls", "inf"):
        shapes[f"{net}.conv1.w"] = (c, 1, 3, 3)
        shapes[f"{net}.conv1.b"] = (c,)
        shapes[f"{net}.conv2.w"] = (c, c, 3, 3)
        shapes[f"{net}.conv2.b"] = (c,)
    shapes["cls.fc1.w"], shapes["cls.fc1.b"] = (hd, f), (hd,)
    shapes["cls.out.w"], shapes["cls.out.b"] = (t, hd), (t,)
    shapes["inf.fc1.w"], shapes["inf.fc1.b"] = (hd, f + t), (hd,)
    shapes["inf.out.w"], shapes["inf.out.b"] = (2 * m, hd), (2 * m,)
    shapes["gen.fc1.w"], shapes["gen.fc1.b"] = (hd, t + m), (hd,)
    shapes["gen.fc2.w"], shapes["gen.fc2.b"] = (f, hd), (f,)
    shapes["gen.tconv1.w"], shapes["gen.tconv1.b"] = (c, c, 3, 3), (c,)
    shapes["gen.tconv2.w"], shapes["gen.tconv2.b"] = (c, 1, 3, 3), (1,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if ".tconv" in name:
        return shape[0] * 9
    if ".conv" in name:
        return shape[1] * 9
    return shape[1]


class ModelParams:
    """Named parameter tensors plus the architecture they belong to."""

    def __init__(self, arch: ArchSpec, tensors: dict[str, ad.Tensor]):
        expected = layer_shapes(arch)
        if set(tensors) != set(expected):
            raise ContractError(f"parameter names do not match architecture: {sorted(set(tensors) ^ set(expected))}")
        for k, t in tensors.items():
            if t.shape != expected[k]:
                raise DimensionError(f"{k}: shape {t.shape}, expected {expected[k]}")
        self.arch = arch
        self.tensors = tensors

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.tensors if k.startswith(prefix)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.arch, self.arrays())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.tensors.items() if t.grad is not None}

    @classmethod
    def from_arrays(cls, arch: ArchSpec, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls(arch, {k: ad.Tensor(np.array(v, dtype=float), requires_grad=True) for k, v in arrays.items()})


def init_params(arch: ArchSpec, seed: int | np.random.Generator = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    rng = np.random.default_rng(seed)
    arrays = {}
    shapes = layer_shapes(arch)
    for name, shape in shapes.items():
        fan_shape = shapes[name[:-1] + "w"]
        bound = 1.0 / math.sqrt(_fan_in(name, fan_shape))
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams.from_arrays(arch, arrays)


def zero_params(arch: ArchSpec) -> ModelParams:
    return ModelParams.from_arrays(arch, {k: np.zeros(s) for k, s in layer_shapes(arch).items()})


def one_hot(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise DomainError(f"labels must lie in [0, {n_classes}), got {y}")
    return np.eye(n_classes)[y]


def _as_batch(x, arch: ArchSpec) -> ad.Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != (arch.height, arch.width):
        raise DimensionError(f"expected (N, {arch.height}, {arch.width}) input, got {x.shape}")
    if ad.is_checked() and (x.data.min() < 0.0 or x.data.max() > 1.0):
        raise ContractError("classifier input must be normalized to [0, 1]")
    return x


def _trunk(params: ModelParams, net: str, x: ad.Tensor) -> ad.Tensor:
    n = x.shape[0]
    h = ad.reshape(x, (n, 1, params.arch.height, params.arch.width))
    h = ad.relu(ad.conv2d(h, params[f"{net}.conv1.w"], params[f"{net}.conv1.b"]))
    h, _ = ad.max_pool2d(h)
    h = ad.relu(ad.conv2d(h, params[f"{net}.conv2.w"], params[f"{net}.conv2.b"]))
    h, _ = ad.max_pool2d(h)
    return ad.reshape(h, (n, params.arch.flat))


def _classifier_head(params: ModelParams, feats: ad.Tensor) -> ad.Tensor:
    h = ad.relu(ad.dense(feats, params["cls.fc1.w"], params["cls.fc1.b"]))
    return ad.dense(h, params["cls.out.w"], params["cls.out.b"])


def classifier_logits(params: ModelParams, x) -> ad.Tensor:
    x = _as_batch(x, params.arch)
    return _classifier_head(params, _trunk(params, "cls", x))


def classifier_forward(params: ModelParams, x) -> ad.Tensor:
    """Class probabilities ``pi(x)``, shape ``(N, T)``."""
    return ad.softmax(classifier_logits(params, x))


def _inference_head(params: ModelParams, feats: ad.Tensor, y_onehot: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
    h = ad.concat([feats, ad.Tensor(y_onehot)], axis=-1)
    h = ad.relu(ad.dense(h, params["inf.fc1.w"], params["inf.fc1.b"]))
    out = ad.dense(h, params["inf.out.w"], params["inf.out.b"])
    m = params.arch.latent
    mu = ad.take(out, np.arange(m), axis=1)
    logvar = ad.take(out, np.arange(m, 2 * m), axis=1)
    return mu, ad.exp(logvar)


def inference_forward(params: ModelParams, x, y) -> tuple[ad.Tensor, ad.Tensor]:
    """Posterior mean and variance of z, each ``(N, M)``; the head emits log-variance."""
    x = _as_batch(x, params.arch)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (x.shape[0],))
    return _inference_head(params, _trunk(params, "inf", x), one_hot(y, params.arch.n_classes))


def generative_forward(params: ModelParams, y, z) -> ad.Tensor:
    """Mean of p(x|y,z), shape ``(N, P, K)`` with a linear output."""
    arch = params.arch
    z = ad.as_tensor(z)
    if z.ndim == 1:
        z = ad.reshape(z, (1, z.shape[0]))
    if z.shape[-1] != arch.latent:
        raise DimensionError(f"latent code must have {arch.latent} entries, got {z.shape}")
    n = z.shape[0]
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    h = ad.concat([ad.Tensor(one_hot(y, arch.n_classes)), z], axis=-1)
    h = ad.relu(ad.dense(h, params["gen.fc1.w"], params["gen.fc1.b"]))
    h = ad.relu(ad.dense(h, params["gen.fc2.w"], params["gen.fc2.b"]))
    h = ad.reshape(h, (n, arch.channels) + arch.coarse)
    # unpool followed by tconv, fused (identical to max_unpool2d + transpose_conv2d)
    h = ad.relu(ad.unpool_transpose_conv2d(h, params["gen.tconv1.w"], params["gen.tconv1.b"]))
    h = ad.unpool_transpose_conv2d(h, params["gen.tconv2.w"], params["gen.tconv2.b"])
    return ad.reshape(h, (n, arch.height, arch.width))


def _c_terms(params: ModelParams, x: ad.Tensor, y: np.ndarray, mu: ad.Tensor, var: ad.Tensor,
             eps: np.ndarray) -> ad.Tensor:
    """Per-sample negative labeled ELBO given the posterior moments."""
    arch = params.arch
    z = ad.reparameterize(mu, var, eps)
    x_hat = generative_forward(params, y, z)
    n = x.shape[0]
    flat = arch.height * arch.width
    log_px = ad.gaussian_log_prob(ad.reshape(x, (n, flat)), ad.reshape(x_hat, (n, flat)), 1.0)
    log_pz = ad.standard_normal_log_prob(z)
    log_qz = ad.gaussian_log_prob(z, mu, var)
    return -(log_px + log_pz - log_qz - math.log(arch.n_classes))


def _check_eps(eps, n: int, m: int) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    if eps.ndim == 1:
        eps = eps[None]
    if eps.shape != (n, m):
        raise DimensionError(f"eps must be ({n}, {m}), got {eps.shape}")
    return eps


def labeled_terms(params: ModelParams, x, y, eps) -> tuple[ad.Tensor, ad.Tensor]:
    """Per-sample ``C(x, y)`` and ``-ln pi(x)[y]``, each shape ``(N,)``."""
    x = _as_batch(x, params.arch)
    n = x.shape[0]
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    eps = _check_eps(eps, n, params.arch.latent)
    mu, var = inference_forward(params, x, y)
    c = _c_terms(params, x, y, mu, var, eps)
    aux = -ad.categorical_log_prob_logits(y, classifier_logits(params, x))
    return c, aux


def labeled_objective(params: ModelParams, x, y, eps, alpha: float | None = None):
    """Batch sums ``(C, aux)``; the caller forms ``C + alpha * aux``.

    With ``alpha`` given the weighted total is returned as a third element.
    """
    c, aux = labeled_terms(params, x, y, eps)
    c, aux = ad.tsum(c), ad.tsum(aux)
    if alpha is None:
        return c, aux
    return c, aux, c + alpha * aux


def unlabeled_terms(params: ModelParams, x, eps) -> ad.Tensor:
    """Per-sample ``D(x) = sum_y q(y|x) [C(x, y) + ln q(y|x)]``, shape ``(N,)``.

    Every label is enumerated exactly; one ``eps`` per sample is shared by all
    labels. The inference trunk runs once and its features are repeated.
    """
    arch = params.arch
    x = _as_batch(x, arch)
    n, t = x.shape[0], arch.n_classes
    eps = _check_eps(eps, n, arch.latent)
    logits = classifier_logits(params, x)
    log_q = ad.log_softmax(logits)
    q = ad.exp(log_q)

    rows = np.repeat(np.arange(n), t)
    labels = np.tile(np.arange(t), n)
    feats = ad.take(_trunk(params, "inf", x), rows, axis=0)
    mu, var = _inference_head(params, feats, one_hot(labels, t))
    c = _c_terms(params, ad.take(x, rows, axis=0), labels, mu, var, eps[rows])
    c = ad.reshape(c, (n, t))
    return ad.tsum(q * (c + log_q), axis=1)


def unlabeled_objective(params: ModelParams, x, eps) -> ad.Tensor:
    return ad.tsum(unlabeled_terms(params, x, eps))


def predict_index(params: ModelParams, x) -> np.ndarray:
    """Argmax class per sample (``np.argmax`` resolves ties to the smaller index)."""
    with ad.no_grad():
        logits = classifier_logits(params, x).data
    return np.argmax(logits, axis=-1)


def predict_doa(params: ModelParams, x, grid: DoaGrid) -> np.ndarray:
    return np.asarray(grid.angles)[predict_index(params, x)]


def generate_rtf_phase(params: ModelParams, y: int, seed: int | None = None) -> np.ndarray:
    """Mean of p(x|y,z) with ``z ~ N(0, I)``; ``seed=None`` uses ``z = 0``."""
    m = params.arch.latent
    z = np.zeros(m) if seed is None else np.random.default_rng(seed).standard_normal(m)
    with ad.no_grad():
        return generative_forward(params, y, z).data[0]
