"""Synthetic datasets, CSV loading, the two-client least-squares toy, and label-skew partitioning."""

from __future__ import annotations

import csv
import enum
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bnn import Batch

log = logging.getLogger(__name__)


class PartitionError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} rows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass
class ClientShard:
    """One client's local data. ``indices`` points back into the source dataset."""

    client_id: int
    features: np.ndarray
    targets: np.ndarray
    class_inventory: tuple[int, ...] = ()
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if len(self.features) < 1:
            raise ValueError(f"client {self.client_id} has no samples")
        if len(self.targets) != len(self.features):
            raise ValueError(f"client {self.client_id}: {len(self.features)} rows but {len(self.targets)} targets")

    @property
    def n(self) -> int:
        return len(self.features)

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.features, self.targets)
        return Batch(self.features[idx], self.targets[idx])


# ---------------------------------------------------------------------------
# two-client federated least squares


@dataclass
class QuadraticClient:
    X: np.ndarray
    y: np.ndarray
    noise_std: float = 1.0
    mu: np.ndarray = field(init=False)
    cov: np.ndarray = field(init=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        gram = self.X.T @ self.X
        if np.linalg.cond(gram) >= 1e8:
            raise np.linalg.LinAlgError("design matrix is too ill-conditioned")
        self.mu = np.linalg.solve(gram, self.X.T @ self.y)
        self.cov = self.noise_std**2 * np.linalg.inv(gram)

    def shard(self, client_id: int) -> ClientShard:
        return ClientShard(client_id, self.X, self.y[:, None])

    def loss(self, w) -> float:
        """Least-squares objective 0.5 * ||y - Xw||^2 / noise_std^2 (no constant)."""
        r = self.y - self.X @ np.asarray(w)
        return float(0.5 * r @ r / self.noise_std**2)


def global_posterior_mean(mus, covs) -> np.ndarray:
    """Precision-weighted fusion of Gaussian local posteriors under a flat prior."""
    precisions = [np.linalg.inv(c) for c in covs]
    total = sum(precisions)
    return np.linalg.solve(total, sum(P @ m for P, m in zip(precisions, mus)))


def gen_toy_lsq(
    d: int,
    n_per_client: int,
    separation: float,
    rng: np.random.Generator,
    noise_std: float = 1.0,
    anisotropy: float = 4.0,
    label_noise: float | None = None,
    max_tries: int = 20,
) -> tuple[list[QuadraticClient], np.ndarray]:
    """Two linear-Gaussian clients with distinct local optima.

    Client ``i`` has its inputs stretched by ``anisotropy`` along coordinate
    axis ``i``, so each client pins down a different direction well and the
    precision-weighted global target differs from the plain average of the
    local means. Targets get Gaussian noise of scale ``label_noise``
    (default: ``noise_std``, i.e. a well-specified likelihood).
    """
    if n_per_client <= d:
        raise ValueError("n_per_client must exceed d")
    label_noise = noise_std if label_noise is None else label_noise
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    centers = [-0.5 * separation * direction, 0.5 * separation * direction]
    for _ in range(max_tries):
        try:
            clients = []
            for i, center in enumerate(centers):
                scales = np.ones(d)
                scales[i % d] = anisotropy
                X = rng.standard_normal((n_per_client, d)) * scales / np.sqrt(n_per_client)
                y = X @ center + label_noise * rng.standard_normal(n_per_client)
                clients.append(QuadraticClient(X, y, noise_std))
        except np.linalg.LinAlgError:
            continue
        return clients, global_posterior_mean([c.mu for c in clients], [c.cov for c in clients])
    raise np.linalg.LinAlgError(f"no well-conditioned design after {max_tries} attempts")


# ---------------------------------------------------------------------------
# classification data


def gen_blobs(n_classes: int, d: int, n_per_class: int, spread: float, rng: np.random.Generator, radius: float = 3.0):
    """Isotropic Gaussian blobs around class centers.

    Centers are scaled one-hot vertices when ``d >= n_classes``, otherwise
    random unit directions; both are multiplied by ``radius``.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if d >= n_classes:
        centers = np.eye(n_classes, d) * radius
    else:
        centers = rng.standard_normal((n_classes, d))
        centers *= radius / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = centers[labels] + spread * rng.standard_normal((len(labels), d))
    return LabeledDataset(features, labels, n_classes)


def write_csv(dataset: LabeledDataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([f"{v:.17g}" for v in row] + [int(label)])


def load_csv(path, n_features: int | None = None, n_classes: int | None = None) -> LabeledDataset:
    """Read ``f0,...,f{d-1},label`` rows; malformed rows raise with their line number."""
    path = Path(path)
    rows, labels = [], []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[-1].strip() != "label":
            raise ValueError(f"{path}:1: header must end with a 'label' column")
        width = len(header) - 1
        if n_features is not None and width != n_features:
            raise ValueError(f"{path}:1: expected {n_features} feature columns, found {width}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise ValueError(f"{path}:{lineno}: expected {width + 1} fields, found {len(row)}")
            try:
                rows.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if labels[-1] < 0 or (n_classes is not None and labels[-1] >= n_classes):
                raise ValueError(f"{path}:{lineno}: label {labels[-1]} out of range")
    if not rows:
        raise ValueError(f"{path}: no data rows")
    k = n_classes if n_classes is not None else max(labels) + 1
    return LabeledDataset(np.array(rows).reshape(len(rows), width), labels, k)


class ShiftKind(str, enum.Enum):
    LABEL_HOLDOUT = "label_holdout"
    MEAN_SHIFT = "mean_shift"


def shift_dataset(dataset: LabeledDataset, kind, *, delta=0.0, holdout=(), rng=None):
    """Build an out-of-distribution counterpart of ``dataset``.

    ``mean_shift`` returns the dataset with ``delta`` added to every feature.
    ``label_holdout`` returns ``(in_dist, out_dist)`` where ``out_dist`` holds
    every sample of the ``holdout`` classes (or one class drawn from ``rng``
    when ``holdout`` is empty).
    """
    kind = ShiftKind(kind)
    if kind is ShiftKind.MEAN_SHIFT:
        return LabeledDataset(dataset.features + np.asarray(delta, dtype=np.float64), dataset.labels, dataset.n_classes)
    held = list(holdout)
    if not held:
        if rng is None:
            raise ValueError("label_holdout needs holdout classes or an rng")
        held = [int(rng.integers(dataset.n_classes))]
    mask = np.isin(dataset.labels, held)
    if mask.all():
        raise ValueError("holding out these classes would leave no in-distribution data")
    idx = np.flatnonzero(~mask)
    return dataset.subset(idx), dataset.subset(np.flatnonzero(mask))


# ---------------------------------------------------------------------------
# label-skew partitioning


def _assign_classes(n_clients: int, per_client: int, n_classes: int, rng: np.random.Generator) -> list[list[int]]:
    # classes are dealt from successive shuffled decks, so all classes get used
    # and no class is dealt twice to the same client
    pending: deque[int] = deque()
    assignment = []
    for _ in range(n_clients):
        mine: list[int] = []
        skipped: list[int] = []
        while len(mine) < per_client:
            if not pending:
                pending.extend(int(c) for c in rng.permutation(n_classes))
            c = pending.popleft()
            if c in mine:
                skipped.append(c)
            else:
                mine.append(c)
        pending.extendleft(reversed(skipped))
        assignment.append(mine)
    return assignment


def partition_by_label(
    dataset: LabeledDataset,
    n_clients: int,
    classes_per_client: int,
    samples_per_client: int,
    rng: np.random.Generator,
) -> list[ClientShard]:
    """Label-skew split: each client draws ``samples_per_client`` samples from
    ``classes_per_client`` classes, sample-disjoint across clients.

    A class pool that runs dry is topped up from the client's other classes;
    if none of them can cover the deficit a PartitionError names the class.
    """
    present = np.unique(dataset.labels)
    if classes_per_client < 1 or classes_per_client > len(present):
        raise PartitionError(f"classes_per_client={classes_per_client} but only {len(present)} classes have data")
    if n_clients * samples_per_client > len(dataset):
        raise PartitionError(f"{n_clients} clients x {samples_per_client} samples exceeds dataset size {len(dataset)}")

    pools = {int(c): deque(int(i) for i in rng.permutation(np.flatnonzero(dataset.labels == c))) for c in present}
    deck = _assign_classes(n_clients, classes_per_client, len(present), rng)
    assignment = [[int(present[j]) for j in row] for row in deck]

    shards = []
    for cid, classes in enumerate(assignment):
        base, extra = divmod(samples_per_client, len(classes))
        wanted = {c: base + (1 if j < extra else 0) for j, c in enumerate(classes)}
        taken: dict[int, list[int]] = {c: [] for c in classes}
        deficit = 0
        short = None
        for c in classes:
            k = min(wanted[c], len(pools[c]))
            taken[c] = [pools[c].popleft() for _ in range(k)]
            if k < wanted[c]:
                deficit += wanted[c] - k
                short = c
        for c in classes:
            while deficit and pools[c]:
                taken[c].append(pools[c].popleft())
                deficit -= 1
        if deficit:
            raise PartitionError(f"class {short} ran out of samples for client {cid}")
        if short is not None:
            log.warning("client %d: class %d pool depleted, topped up from its other classes", cid, short)
        inventory = tuple(sorted(c for c in classes if taken[c]))
        idx = np.array(sorted(i for c in classes for i in taken[c]), dtype=np.int64)
        shards.append(ClientShard(cid, dataset.features[idx], dataset.labels[idx], inventory, idx))
    return shards


def shards_from_manifest(dataset: LabeledDataset, manifest: dict) -> list[ClientShard]:
    shards = []
    for key in sorted(manifest, key=int):
        idx = np.asarray(manifest[key], dtype=np.int64)
        labels = dataset.labels[idx]
        shards.append(ClientShard(int(key), dataset.features[idx], labels, tuple(int(c) for c in np.unique(labels)), idx))
    return shards


def manifest_of(shards) -> dict[str, list[int]]:
    return {str(s.client_id): [int(i) for i in s.indices] for s in shards}


def write_manifest(shards, path) -> None:
    Path(path).write_text(json.dumps(manifest_of(shards), indent=1), encoding="utf-8")


def split_shard(shard: ClientShard, test_fraction: float, rng: np.random.Generator) -> tuple[ClientShard, ClientShard]:
    """Per-class train/test split; every class keeps at least one training sample."""
    labels = np.asarray(shard.targets).reshape(-1)
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_fraction * len(members)))
        n_test = min(n_test, len(members) - 1)
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    if not test_idx:
        raise ValueError(f"client {shard.client_id} is too small for a test split")

    def take(idx):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        src = None if shard.indices is None else shard.indices[idx]
        return ClientShard(shard.client_id, shard.features[idx], shard.targets[idx], shard.class_inventory, src)

    return take(train_idx), take(test_idx)
