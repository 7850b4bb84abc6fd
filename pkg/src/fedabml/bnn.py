"""Small fully-connected models over a flat weight vector, and the Fed-ELBO loss."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .varinf import MeanFieldGaussian, kl_diag, kl_grad_wrt_p, kl_grad_wrt_p_sampled, kl_grad_wrt_q, sample

LOG_2PI = math.log(2.0 * math.pi)


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


class Likelihood(str, enum.Enum):
    GAUSSIAN = "gaussian"
    CATEGORICAL = "categorical"


def _act(kind: Activation, z):
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.SIGMOID:
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(kind: Activation, z, a):
    if kind is Activation.RELU:
        return (z > 0.0).astype(np.float64)  # derivative at 0 taken as 0
    if kind is Activation.TANH:
        return 1.0 - a * a
    if kind is Activation.SIGMOID:
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of an MLP ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    The output layer is always affine (no activation). ``noise_std`` is the
    observation noise of the Gaussian likelihood and is ignored for
    categorical models.
    """

    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.RELU
    likelihood: Likelihood = Likelihood.CATEGORICAL
    noise_std: float = 1.0
    bias: bool = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"layer_sizes needs at least two positive entries, got {self.layer_sizes}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "likelihood", Likelihood(self.likelihood))
        if self.likelihood is Likelihood.GAUSSIAN and not self.noise_std > 0:
            raise ValueError("noise_std must be positive for a Gaussian likelihood")
        if self.likelihood is Likelihood.CATEGORICAL and sizes[-1] < 2:
            raise ValueError("a categorical model needs at least two outputs")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def d(self) -> int:
        return sum(a * b + (b if self.bias else 0) for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def layout(self) -> list[tuple[slice, slice | None, tuple[int, int]]]:
        """Per layer: (weight slice, bias slice or None, weight shape (out, in))."""
        blocks = []
        offset = 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w_sl = slice(offset, offset + a * b)
            offset += a * b
            b_sl = None
            if self.bias:
                b_sl = slice(offset, offset + b)
                offset += b
            blocks.append((w_sl, b_sl, (b, a)))
        return blocks

    def unflatten(self, w) -> list[tuple[np.ndarray, np.ndarray | None]]:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.d,):
            raise ValueError(f"weight vector has shape {w.shape}, model expects ({self.d},)")
        return [(w[ws].reshape(shape), None if bs is None else w[bs]) for ws, bs, shape in self.layout()]

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation.value,
            "likelihood": self.likelihood.value,
            "noise_std": self.noise_std,
            "bias": self.bias,
        }


def init_prior(spec: ModelSpec, rng: np.random.Generator, log_std: float = math.log(0.1)) -> MeanFieldGaussian:
    """Glorot-uniform means per weight block, zero biases, constant log-std."""
    mean = np.zeros(spec.d)
    for ws, _, (fan_out, fan_in) in spec.layout():
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        mean[ws] = rng.uniform(-limit, limit, size=fan_out * fan_in)
    return MeanFieldGaussian.isotropic(mean, log_std)


@dataclass
class Batch:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        targets = np.asarray(self.targets)
        if targets.ndim == 1 and targets.dtype.kind == "f":
            targets = targets[:, None]
        self.targets = targets
        if len(self.features) < 1:
            raise ValueError("a batch needs at least one row")
        if len(targets) != len(self.features):
            raise ValueError(f"{len(self.features)} feature rows but {len(targets)} targets")

    def __len__(self):
        return len(self.features)


@dataclass
class ForwardCache:
    spec: ModelSpec
    weights: list
    inputs: list = field(default_factory=list)  # layer inputs a_l
    pre: list = field(default_factory=list)  # pre-activations z_l
    outputs: np.ndarray | None = None


def _check_input(spec: ModelSpec, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != spec.n_in:
        raise ValueError(f"input width {x.shape[1]} does not match model input {spec.n_in}")
    return x


def forward(spec: ModelSpec, w, x) -> tuple[np.ndarray, ForwardCache]:
    x = _check_input(spec, x)
    params = spec.unflatten(w)
    cache = ForwardCache(spec, params)
    a = x
    last = len(params) - 1
    for l, (W, b) in enumerate(params):
        cache.inputs.append(a)
        z = a @ W.T
        if b is not None:
            z = z + b
        cache.pre.append(z)
        a = z if l == last else _act(spec.activation, z)
    cache.outputs = a
    return a, cache


def forward_stack(spec: ModelSpec, ws, x) -> np.ndarray:
    """Outputs for a stack of weight vectors ``(s, d)``; shape ``(s, n, n_out)``."""
    x = _check_input(spec, x)
    ws = np.atleast_2d(np.asarray(ws, dtype=np.float64))
    if ws.shape[1] != spec.d:
        raise ValueError(f"weight stack has width {ws.shape[1]}, model expects {spec.d}")
    a = np.broadcast_to(x, (ws.shape[0],) + x.shape)
    blocks = spec.layout()
    for l, (wsl, bsl, shape) in enumerate(blocks):
        W = ws[:, wsl].reshape((ws.shape[0],) + shape)
        a = np.einsum("sni,soi->sno", a, W)
        if bsl is not None:
            a = a + ws[:, None, bsl]
        if l < len(blocks) - 1:
            a = _act(spec.activation, a)
    return a


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _labels(spec: ModelSpec, targets, n: int) -> np.ndarray:
    y = np.asarray(targets).reshape(-1)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {np.shape(targets)}")
    if np.issubdtype(y.dtype, np.floating):
        if not np.all(y == np.round(y)):
            raise ValueError("categorical targets must be integer labels")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= spec.n_out:
        raise ValueError(f"labels must lie in [0, {spec.n_out})")
    return y


def _regression_targets(spec: ModelSpec, targets, n: int) -> np.ndarray:
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape != (n, spec.n_out):
        raise ValueError(f"targets have shape {y.shape}, expected ({n}, {spec.n_out})")
    return y


def nll(spec: ModelSpec, outputs, targets) -> float:
    """Summed negative log-likelihood over the batch.

    The Gaussian form keeps its normalization constant, so a perfect fit
    with ``noise_std=1`` costs ``n * n_out * log(2 pi) / 2``.
    """
    out = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("model outputs are not finite")
    if out.shape[1] != spec.n_out:
        raise ValueError(f"outputs have width {out.shape[1]}, model has {spec.n_out} outputs")
    n = out.shape[0]
    if spec.likelihood is Likelihood.GAUSSIAN:
        y = _regression_targets(spec, targets, n)
        s2 = spec.noise_std**2
        return float(np.sum((y - out) ** 2) / (2.0 * s2) + 0.5 * n * spec.n_out * (LOG_2PI + math.log(s2)))
    y = _labels(spec, targets, n)
    return float(-np.sum(log_softmax(out)[np.arange(n), y]))


def _output_grad(spec: ModelSpec, out: np.ndarray, targets) -> np.ndarray:
    n = out.shape[0]
    if spec.likelihood is Likelihood.GAUSSIAN:
        return (out - _regression_targets(spec, targets, n)) / spec.noise_std**2
    y = _labels(spec, targets, n)
    g = softmax(out)
    g[np.arange(n), y] -= 1.0
    return g


def backward(spec: ModelSpec, cache: ForwardCache, targets) -> np.ndarray:
    """Gradient of ``nll(forward(w, x), targets)`` w.r.t. the flat weight vector."""
    if cache is None or cache.outputs is None or cache.spec != spec:
        raise ValueError("backward needs the cache from forward() on the same model")
    grad = np.zeros(spec.d)
    delta = _output_grad(spec, cache.outputs, targets)
    blocks = spec.layout()
    for l in range(len(blocks) - 1, -1, -1):
        wsl, bsl, _ = blocks[l]
        W, _ = cache.weights[l]
        grad[wsl] = (delta.T @ cache.inputs[l]).reshape(-1)
        if bsl is not None:
            grad[bsl] = delta.sum(axis=0)
        if l > 0:
            a_prev = cache.inputs[l]
            delta = (delta @ W) * _act_grad(spec.activation, cache.pre[l - 1], a_prev)
    return grad


def nll_and_grad(spec: ModelSpec, w, batch: Batch) -> tuple[float, np.ndarray]:
    out, cache = forward(spec, w, batch.features)
    return nll(spec, out, batch.targets), backward(spec, cache, batch.targets)


class ElboValue(NamedTuple):
    loss: float
    grad_phi: tuple[np.ndarray, np.ndarray]
    grad_theta: tuple[np.ndarray, np.ndarray]


def elbo_loss(
    phi: MeanFieldGaussian,
    theta: MeanFieldGaussian,
    batch: Batch,
    spec: ModelSpec,
    s: int = 5,
    lam: float = 1.0,
    kl_scale: float = 1.0,
    rng: np.random.Generator | None = None,
    *,
    noise=None,
    n_total: int | None = None,
    theta_grad: str = "closed_form",
) -> ElboValue:
    """Minibatch estimate of the local negative ELBO and its gradients.

    loss = (n_total / n_b) * mean_j nll(w_j) + lam * kl_scale * KL[phi || theta]

    with ``w_j = phi.mean + eps_j * exp(phi.log_std)``. Pass ``noise`` of
    shape ``(s, d)`` to freeze the draws; otherwise they come from ``rng``.
    ``n_total`` defaults to the batch size (no rescaling).
    """
    if not (phi.d == theta.d == spec.d):
        raise ValueError(f"dimension mismatch: phi {phi.d}, theta {theta.d}, model {spec.d}")
    if noise is None:
        if s < 1:
            raise ValueError("s must be at least 1")
        if rng is None:
            raise ValueError("elbo_loss needs either rng or noise")
        noise = rng.standard_normal((s, spec.d))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if noise.shape[1] != spec.d:
        raise ValueError(f"noise width {noise.shape[1]} does not match d={spec.d}")
    if lam < 0 or not kl_scale > 0:
        raise ValueError("lam must be >= 0 and kl_scale > 0")
    n_draws = noise.shape[0]
    scale = (len(batch) if n_total is None else n_total) / len(batch)

    ws = sample(phi, noise)
    data_loss = 0.0
    g_mean = np.zeros(spec.d)
    g_log_std = np.zeros(spec.d)
    for w, eps in zip(ws, noise):
        value, g_w = nll_and_grad(spec, w, batch)
        data_loss += value
        g_mean += g_w
        g_log_std += g_w * eps
    factor = scale / n_draws
    data_loss *= factor
    g_mean *= factor
    g_log_std *= factor * phi.std

    weight = lam * kl_scale
    if weight == 0.0:
        zeros = np.zeros(spec.d)
        return ElboValue(data_loss, (g_mean, g_log_std), (zeros, zeros.copy()))
    kq_mean, kq_log_std = kl_grad_wrt_q(phi, theta)
    if theta_grad == "closed_form":
        kp_mean, kp_log_std = kl_grad_wrt_p(phi, theta)
    elif theta_grad == "sampled":
        kp_mean, kp_log_std = kl_grad_wrt_p_sampled(phi, theta, noise)
    else:
        raise ValueError(f"unknown theta_grad estimator {theta_grad!r}")
    loss = data_loss + weight * kl_diag(phi, theta)
    return ElboValue(
        loss,
        (g_mean + weight * kq_mean, g_log_std + weight * kq_log_std),
        (weight * kp_mean, weight * kp_log_std),
    )
