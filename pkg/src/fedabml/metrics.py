"""Evaluation, uncertainty and divergence diagnostics, and history export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .bnn import Likelihood, ModelSpec, forward, forward_stack, log_softmax, nll
from .varinf import MeanFieldGaussian, sample

EVAL_TAG = 0xE7A1


def entropy_of(probs) -> np.ndarray:
    """Shannon entropy (nats) along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def _draws(phi: MeanFieldGaussian, s: int, rng: np.random.Generator) -> np.ndarray:
    if s < 1:
        raise ValueError("s must be at least 1")
    return sample(phi, rng.standard_normal((s, phi.d)))


def predictive_probs(spec: ModelSpec, phi: MeanFieldGaussian, x, s: int, rng: np.random.Generator) -> np.ndarray:
    """Posterior predictive class probabilities: the mean of softmaxes over ``s`` draws."""
    if spec.likelihood is not Likelihood.CATEGORICAL:
        raise ValueError("predictive probabilities need a categorical model")
    logits = forward_stack(spec, _draws(phi, s, rng), x)
    return np.exp(log_softmax(logits)).mean(axis=0)


def predictive_entropy(spec: ModelSpec, phi: MeanFieldGaussian, x, s: int, rng: np.random.Generator) -> np.ndarray:
    return entropy_of(predictive_probs(spec, phi, x, s, rng))


def hellinger_sq(spec: ModelSpec, w, true_fn: Callable, x_samples, noise_std: float) -> float:
    """Monte Carlo squared Hellinger distance between N(f_w(x), s^2) and N(f(x), s^2)."""
    if not noise_std > 0:
        raise ValueError("noise_std must be positive")
    x = np.atleast_2d(np.asarray(x_samples, dtype=np.float64))
    if x.shape[0] == 0 or np.size(x_samples) == 0:
        raise ValueError("need at least one x sample")
    fw, _ = forward(spec, w, x)
    fi = np.asarray(true_fn(x), dtype=np.float64).reshape(fw.shape)
    gap = np.sum((fw - fi) ** 2, axis=1)
    return float(np.mean(1.0 - np.exp(-gap / (8.0 * noise_std**2))))


def distance_to_target(theta: MeanFieldGaussian, target) -> float:
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if target.size != theta.d:
        raise ValueError(f"target has length {target.size}, distribution has d={theta.d}")
    return float(np.linalg.norm(theta.mean - target))


def eval_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, EVAL_TAG, client_id])


@dataclass
class ClientEval:
    client_id: int
    n_test: int
    accuracy: float | None
    mse: float | None
    nll: float
    entropy: float | None


@dataclass
class EvalReport:
    clients: list[ClientEval]
    mean_acc: float | None = None
    std_acc: float | None = None
    mean_mse: float | None = None
    mean_nll: float = 0.0
    mean_entropy: float | None = None

    def per_client(self) -> list[dict]:
        return [asdict(c) for c in self.clients]


def evaluate_one(spec: ModelSpec, phi: MeanFieldGaussian, features, targets, s: int, rng) -> tuple:
    """Returns (accuracy or None, mse or None, mean nll, mean entropy or None)."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = len(x)
    ws = _draws(phi, s, rng)
    out = forward_stack(spec, ws, x)
    if spec.likelihood is Likelihood.CATEGORICAL:
        y = np.asarray(targets).reshape(-1).astype(np.int64)
        probs = np.exp(log_softmax(out)).mean(axis=0)
        pred = np.argmax(probs, axis=1)  # ties go to the lowest class index
        acc = float(np.mean(pred == y))
        mean_nll = float(-np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300))))
        return acc, None, mean_nll, float(entropy_of(probs).mean())
    y = np.asarray(targets, dtype=np.float64).reshape(n, spec.n_out)
    pred = out.mean(axis=0)
    mse = float(np.mean(np.sum((pred - y) ** 2, axis=1)))
    mean_nll = float(np.mean([nll(spec, o, y) for o in out]) / n)
    return None, mse, mean_nll, None


def evaluate_clients(
    spec: ModelSpec,
    phis: Mapping[int, MeanFieldGaussian],
    test_shards,
    s: int,
    seed: int = 0,
    weighted: bool = False,
) -> EvalReport:
    """Per-client test metrics plus their (optionally size-weighted) means.

    Each client's draws come from its own stream keyed by (seed, client_id),
    so the report does not depend on the order of ``test_shards``.
    """
    rows = []
    for shard in sorted(test_shards, key=lambda sh: sh.client_id):
        if shard.client_id not in phis:
            raise KeyError(f"no posterior for client {shard.client_id}")
        acc, mse, mean_nll, ent = evaluate_one(
            spec, phis[shard.client_id], shard.features, shard.targets, s, eval_rng(seed, shard.client_id)
        )
        rows.append(ClientEval(shard.client_id, shard.n, acc, mse, mean_nll, ent))
    if not rows:
        raise ValueError("no test shards to evaluate")
    w = np.array([r.n_test for r in rows], dtype=np.float64) if weighted else np.ones(len(rows))
    w /= w.sum()

    def avg(values):
        return float(np.dot(w, values))

    report = EvalReport(rows, mean_nll=avg([r.nll for r in rows]))
    if rows[0].accuracy is not None:
        accs = np.array([r.accuracy for r in rows])
        report.mean_acc = avg(accs)
        report.std_acc = float(np.sqrt(np.dot(w, (accs - report.mean_acc) ** 2)))
        report.mean_entropy = avg([r.entropy for r in rows])
    else:
        report.mean_mse = avg([r.mse for r in rows])
    return report


def entropy_histogram(values, n_classes: int, bins: int = 20) -> dict:
    edges = np.linspace(0.0, math.log(n_classes), bins + 1)
    counts, _ = np.histogram(np.clip(values, 0.0, edges[-1]), bins=edges)
    return {"edges": edges.tolist(), "counts": counts.astype(int).tolist()}


# ---------------------------------------------------------------------------
# training history


@dataclass
class RoundRecord:
    round: int
    mode: str
    selected: list[int]
    mean_loss: float
    std_loss: float
    theta_id: str
    mean_acc: float | None = None
    std_acc: float | None = None
    global_acc: float | None = None
    dist_to_target: float | None = None
    per_client: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingHistory:
    records: list[RoundRecord] = field(default_factory=list)

    def append(self, record: RoundRecord) -> None:
        if self.records and record.round != self.records[-1].round + 1:
            raise ValueError(f"round {record.round} does not follow round {self.records[-1].round}")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def series(self, key: str) -> list:
        return [getattr(r, key) for r in self.records]

    def to_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.records]

    @classmethod
    def from_dicts(cls, rows) -> "TrainingHistory":
        return cls([RoundRecord(**row) for row in rows])


def rolling_final_mean(values, window: int = 10) -> float:
    """Mean over the last ``window`` non-missing entries."""
    vals = [v for v in values if v is not None]
    if not vals:
        raise ValueError("no values to average")
    return float(np.mean(vals[-window:]))


CSV_COLUMNS = ["round", "mode", "mean_acc", "std_acc", "mean_loss", "dist_to_target", "per_client"]


def export_history(history: TrainingHistory, path, fmt: str = "jsonl") -> Path:
    path = Path(path)
    if fmt == "jsonl":
        with path.open("w", encoding="utf-8") as fh:
            for rec in history.records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    elif fmt == "csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for rec in history.records:
                row = rec.to_dict()
                writer.writerow(
                    ["" if row[c] is None else (json.dumps(row[c]) if c == "per_client" else row[c]) for c in CSV_COLUMNS]
                )
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path


def load_history_jsonl(path) -> TrainingHistory:
    with Path(path).open(encoding="utf-8") as fh:
        return TrainingHistory.from_dicts(json.loads(line) for line in fh if line.strip())
