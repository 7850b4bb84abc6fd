"""Mean-field Gaussians over flat parameter vectors.

Standard deviations are stored as ``log_std`` (sigma = exp(log_std)) and kept
inside ``[NU_MIN, NU_MAX]`` so that ``exp`` never overflows or underflows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

NU_MIN = -10.0
NU_MAX = 3.0


class AggregationStrategy(str, enum.Enum):
    ORACLE = "oracle"
    MEAN = "mean"
    MIXTURE = "mixture"
    PRODUCT = "product"


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class MeanFieldGaussian:
    """Diagonal Gaussian N(mean, diag(exp(log_std))^2).

    Instances are immutable; ``log_std`` is clamped to ``[NU_MIN, NU_MAX]``
    on construction, so every update path (which always builds a new
    instance) respects the clamp.
    """

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        log_std = np.clip(np.array(self.log_std, dtype=np.float64).reshape(-1), NU_MIN, NU_MAX)
        log_std = _as_vector(log_std, "log_std")
        if mean.size == 0:
            raise ValueError("dimension must be at least 1")
        if mean.shape != log_std.shape:
            raise ValueError(f"mean has length {mean.size} but log_std has length {log_std.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)

    @classmethod
    def isotropic(cls, mean, log_std: float) -> "MeanFieldGaussian":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.full(mean.shape, float(log_std)))

    @property
    def d(self) -> int:
        return int(self.mean.size)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def var(self) -> np.ndarray:
        return np.exp(2.0 * self.log_std)

    def step(self, grad_mean, grad_log_std, lr: float, update_log_std: bool = True) -> "MeanFieldGaussian":
        """Plain gradient-descent update, returning a new (clamped) distribution."""
        mean = self.mean - lr * np.asarray(grad_mean)
        log_std = self.log_std - lr * np.asarray(grad_log_std) if update_log_std else self.log_std
        return MeanFieldGaussian(mean, log_std)

    def with_log_std(self, log_std) -> "MeanFieldGaussian":
        log_std = np.broadcast_to(np.asarray(log_std, dtype=np.float64), self.mean.shape)
        return MeanFieldGaussian(self.mean, log_std)

    def equals(self, other: "MeanFieldGaussian") -> bool:
        """Bitwise equality of both parameter vectors."""
        return (
            self.d == other.d
            and self.mean.tobytes() == other.mean.tobytes()
            and self.log_std.tobytes() == other.log_std.tobytes()
        )

    def to_record(self) -> dict:
        return {"d": self.d, "mean": self.mean.tolist(), "log_std": self.log_std.tolist()}

    @classmethod
    def from_record(cls, record: dict) -> "MeanFieldGaussian":
        q = cls(record["mean"], record["log_std"])
        if q.d != int(record["d"]):
            raise ValueError(f"record declares d={record['d']} but holds {q.d} entries")
        return q


def _check_dims(*pairs):
    d = None
    for name, n in pairs:
        if d is None:
            d = n
        elif n != d:
            raise ValueError(f"dimension mismatch: {name} has length {n}, expected {d}")


def draw_noise(rng: np.random.Generator, d: int, s: int = 1) -> np.ndarray:
    """Standard-normal reparameterization noise, shape ``(s, d)``."""
    return rng.standard_normal((s, d))


def sample(q: MeanFieldGaussian, noise) -> np.ndarray:
    """Reparameterized draw ``mean + noise * exp(log_std)``.

    ``noise`` may be a single vector of length ``d`` or a stack ``(s, d)``.
    """
    eps = np.asarray(noise, dtype=np.float64)
    _check_dims(("q", q.d), ("noise", eps.shape[-1]))
    return q.mean + eps * q.std


def kl_diag(q: MeanFieldGaussian, p: MeanFieldGaussian) -> float:
    """KL[q || p] for diagonal Gaussians, in closed form."""
    _check_dims(("q", q.d), ("p", p.d))
    ratio = np.exp(2.0 * (q.log_std - p.log_std))
    diff2 = (p.mean - q.mean) ** 2 / p.var
    return float(0.5 * np.sum(ratio + diff2 - 1.0 + 2.0 * (p.log_std - q.log_std)))


def kl_grad_wrt_q(q: MeanFieldGaussian, p: MeanFieldGaussian) -> tuple[np.ndarray, np.ndarray]:
    _check_dims(("q", q.d), ("p", p.d))
    grad_mean = (q.mean - p.mean) / p.var
    grad_log_std = np.exp(2.0 * (q.log_std - p.log_std)) - 1.0
    return grad_mean, grad_log_std


def kl_grad_wrt_p(q: MeanFieldGaussian, p: MeanFieldGaussian) -> tuple[np.ndarray, np.ndarray]:
    _check_dims(("q", q.d), ("p", p.d))
    grad_mean = (p.mean - q.mean) / p.var
    grad_log_std = 1.0 - np.exp(2.0 * (q.log_std - p.log_std)) - (p.mean - q.mean) ** 2 / p.var
    return grad_mean, grad_log_std


def kl_grad_wrt_p_sampled(q: MeanFieldGaussian, p: MeanFieldGaussian, noise) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo estimate of the gradient of KL[q || p] w.r.t. p's parameters.

    Only ``-log p(w)`` depends on p, so the estimate averages
    ``grad_p [-log p(w)]`` over the draws ``w = sample(q, noise)``.
    """
    w = np.atleast_2d(sample(q, noise))
    z = (w - p.mean) / p.std
    grad_mean = -np.mean(z, axis=0) / p.std
    grad_log_std = np.mean(1.0 - z**2, axis=0)
    return grad_mean, grad_log_std


def reparam_chain(grad_w, noise, q: MeanFieldGaussian, direct_grad_mean=None, direct_grad_log_std=None):
    """Chain a gradient w.r.t. a sampled weight vector back to (mean, log_std).

    ``d/dmean = dL/dw + direct``; ``d/dlog_std = dL/dw * eps * exp(log_std) + direct``.
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    eps = np.asarray(noise, dtype=np.float64)
    direct_grad_mean = np.zeros(q.d) if direct_grad_mean is None else np.asarray(direct_grad_mean)
    direct_grad_log_std = np.zeros(q.d) if direct_grad_log_std is None else np.asarray(direct_grad_log_std)
    _check_dims(
        ("q", q.d),
        ("grad_w", grad_w.size),
        ("noise", eps.size),
        ("direct_grad_mean", direct_grad_mean.size),
        ("direct_grad_log_std", direct_grad_log_std.size),
    )
    return grad_w + direct_grad_mean, grad_w * eps * q.std + direct_grad_log_std


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def aggregate(
    members: Sequence[MeanFieldGaussian],
    weights=None,
    strategy: AggregationStrategy | str = AggregationStrategy.ORACLE,
) -> MeanFieldGaussian:
    """Fuse client Gaussians into one server Gaussian.

    oracle   -- average means and log-stds
    mean     -- average means and variances
    mixture  -- moment-match the weighted mixture (diagonal)
    product  -- precision-weighted product of experts
    """
    if len(members) == 0:
        raise ValueError("cannot aggregate an empty member list")
    strategy = AggregationStrategy(strategy)
    _check_dims(*((f"member {i}", m.d) for i, m in enumerate(members)))
    pi = uniform_weights(len(members)) if weights is None else np.asarray(weights, dtype=np.float64)
    if pi.shape != (len(members),):
        raise ValueError(f"expected {len(members)} weights, got shape {pi.shape}")
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights must be nonnegative and sum to 1 (sum={pi.sum()!r})")

    # identical members are a fixed point of every rule; skip the rounding
    if all(m.equals(members[0]) for m in members[1:]):
        return members[0]

    means = np.stack([m.mean for m in members])
    log_stds = np.stack([m.log_std for m in members])
    mean = pi @ means
    if strategy is AggregationStrategy.ORACLE:
        return MeanFieldGaussian(mean, pi @ log_stds)
    variances = np.exp(2.0 * log_stds)
    if strategy is AggregationStrategy.MEAN:
        var = pi @ variances
    elif strategy is AggregationStrategy.MIXTURE:
        var = pi @ (variances + means**2) - mean**2
        var = np.maximum(var, np.exp(2.0 * NU_MIN))
    else:
        precision = pi @ (1.0 / variances)
        var = 1.0 / precision
        mean = var * (pi @ (means / variances))
    return MeanFieldGaussian(mean, 0.5 * np.log(var))
