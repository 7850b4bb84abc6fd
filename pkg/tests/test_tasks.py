import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedabml.tasks import (
    ClientShard,
    LabeledDataset,
    PartitionError,
    QuadraticClient,
    gen_blobs,
    gen_toy_lsq,
    global_posterior_mean,
    load_csv,
    manifest_of,
    partition_by_label,
    shards_from_manifest,
    shift_dataset,
    split_shard,
    write_csv,
)

# --- toy least squares -----------------------------------------------------


def test_symmetric_clients_fuse_to_midpoint():
    X = np.eye(2)
    a = QuadraticClient(X, [1.0, 1.0])
    b = QuadraticClient(X, [-1.0, -1.0])
    assert np.allclose(global_posterior_mean([a.mu, b.mu], [a.cov, b.cov]), 0.0, atol=1e-14)


def test_precision_weighting_hand_example():
    # covariances I and 2I, means (1, 0) and (-2, 0): (1*1 + 0.5*(-2)) / 1.5 = 0
    mus = [np.array([1.0, 0.0]), np.array([-2.0, 0.0])]
    covs = [np.eye(2), 2 * np.eye(2)]
    assert np.allclose(global_posterior_mean(mus, covs), [0.0, 0.0], atol=1e-14)
    mus = [np.array([3.0, 0.0]), np.array([-3.0, 0.0])]
    # weights 2/3 and 1/3: 2 - 1 = 1
    assert np.allclose(global_posterior_mean(mus, covs), [1.0, 0.0], atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_toy_local_means_solve_normal_equations(seed):
    clients, _ = gen_toy_lsq(2, 30, 4.0, np.random.default_rng(seed))
    for c in clients:
        assert np.allclose(c.X.T @ c.X @ c.mu, c.X.T @ c.y, atol=1e-10)
        assert np.linalg.norm(c.mu - np.linalg.lstsq(c.X, c.y, rcond=None)[0]) <= 1e-10


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_toy_global_mean_is_stacked_least_squares(seed):
    clients, mu_global = gen_toy_lsq(2, 30, 4.0, np.random.default_rng(seed))
    X = np.vstack([c.X for c in clients])
    y = np.concatenate([c.y for c in clients])
    assert np.linalg.norm(mu_global - np.linalg.lstsq(X, y, rcond=None)[0]) <= 1e-10


def test_toy_is_seeded_and_has_distinct_optima():
    a, mu_a = gen_toy_lsq(3, 20, 4.0, np.random.default_rng(7))
    b, mu_b = gen_toy_lsq(3, 20, 4.0, np.random.default_rng(7))
    assert np.array_equal(mu_a, mu_b)
    assert np.array_equal(a[0].X, b[0].X)
    assert np.linalg.norm(a[0].mu - a[1].mu) > 1.0


def test_toy_rejects_underdetermined_clients():
    with pytest.raises(ValueError):
        gen_toy_lsq(3, 3, 1.0, np.random.default_rng(0))


def test_quadratic_client_rejects_singular_design():
    with pytest.raises(np.linalg.LinAlgError):
        QuadraticClient(np.ones((5, 2)), np.zeros(5))


def test_quadratic_client_loss_minimized_at_mu():
    rng = np.random.default_rng(1)
    c = QuadraticClient(rng.normal(size=(10, 2)), rng.normal(size=10), noise_std=0.5)
    base = c.loss(c.mu)
    for _ in range(10):
        assert c.loss(c.mu + 0.1 * rng.normal(size=2)) > base


# --- blobs -----------------------------------------------------------------


def test_blobs_shapes_and_balance():
    ds = gen_blobs(10, 5, 30, 1.0, np.random.default_rng(0))
    assert ds.features.shape == (300, 5)
    assert np.bincount(ds.labels).tolist() == [30] * 10


def test_blobs_are_separable_by_nearest_center():
    ds = gen_blobs(4, 6, 200, 0.3, np.random.default_rng(1))
    centers = np.stack([ds.features[ds.labels == c].mean(0) for c in range(4)])
    pred = np.argmin(((ds.features[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    assert (pred == ds.labels).mean() > 0.99


def test_blobs_validation():
    with pytest.raises(ValueError):
        gen_blobs(1, 2, 10, 1.0, np.random.default_rng(0))


# --- CSV -------------------------------------------------------------------


def test_csv_round_trip_is_exact(tmp_path):
    ds = gen_blobs(3, 4, 5, 1.0, np.random.default_rng(2))
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = load_csv(path, n_features=4, n_classes=3)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)


def test_csv_errors_report_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,f1,label\n1,2,0\n1,x,1\n")
    with pytest.raises(ValueError, match=r":3:"):
        load_csv(path)
    path.write_text("f0,f1,label\n1,2,0\n1,2\n")
    with pytest.raises(ValueError, match=r":3: expected 3 fields"):
        load_csv(path)
    path.write_text("f0,f1,y\n1,2,0\n")
    with pytest.raises(ValueError, match="label"):
        load_csv(path)
    path.write_text("f0,f1,label\n1,2,5\n")
    with pytest.raises(ValueError, match="out of range"):
        load_csv(path, n_classes=3)


# --- shifts ----------------------------------------------------------------


def test_mean_shift_moves_features_only():
    ds = gen_blobs(3, 2, 4, 1.0, np.random.default_rng(3))
    shifted = shift_dataset(ds, "mean_shift", delta=2.5)
    assert np.allclose(shifted.features - ds.features, 2.5)
    assert np.array_equal(shifted.labels, ds.labels)


def test_label_holdout_splits_by_class():
    ds = gen_blobs(4, 2, 5, 1.0, np.random.default_rng(4))
    ind, ood = shift_dataset(ds, "label_holdout", holdout=[1, 3])
    assert set(ind.labels.tolist()) == {0, 2}
    assert set(ood.labels.tolist()) == {1, 3}
    assert len(ind) + len(ood) == len(ds)
    with pytest.raises(ValueError):
        shift_dataset(ds, "label_holdout", holdout=[0, 1, 2, 3])


# --- partitioning ------------------------------------------------------------


def _check_partition(shards, dataset, n_clients, per_client, spc):
    assert len(shards) == n_clients
    seen = set()
    for sh in shards:
        labels = set(dataset.labels[sh.indices].tolist())
        assert len(labels) == per_client
        assert set(sh.class_inventory) == labels
        assert np.array_equal(sh.features, dataset.features[sh.indices])
        idx = set(sh.indices.tolist())
        assert not (idx & seen)
        seen |= idx
    counts = [sh.n for sh in shards]
    assert max(counts) - min(counts) <= 1
    assert sum(counts) == n_clients * spc


def test_partition_reference_configuration():
    ds = gen_blobs(10, 5, 200, 1.0, np.random.default_rng(5))
    shards = partition_by_label(ds, 20, 2, 100, np.random.default_rng(6))
    _check_partition(shards, ds, 20, 2, 100)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(2, 8),  # classes
    st.integers(1, 12),  # clients
    st.integers(1, 3),  # classes per client
    st.integers(0, 1000),
)
def test_partition_properties(n_classes, n_clients, per_client, seed):
    per_client = min(per_client, n_classes)
    ds = gen_blobs(n_classes, 3, 40, 1.0, np.random.default_rng(seed))
    # each class is dealt to at most this many clients, so this demand is feasible
    dealt = -(-n_clients * per_client // n_classes)
    spc = per_client * max(1, 40 // dealt)
    shards = partition_by_label(ds, n_clients, per_client, spc, np.random.default_rng(seed + 1))
    _check_partition(shards, ds, n_clients, per_client, spc)


def test_partition_is_seeded():
    ds = gen_blobs(5, 2, 20, 1.0, np.random.default_rng(0))
    a = partition_by_label(ds, 4, 2, 20, np.random.default_rng(9))
    b = partition_by_label(ds, 4, 2, 20, np.random.default_rng(9))
    assert manifest_of(a) == manifest_of(b)


def test_partition_errors():
    ds = gen_blobs(3, 2, 10, 1.0, np.random.default_rng(0))
    with pytest.raises(PartitionError):
        partition_by_label(ds, 2, 4, 5, np.random.default_rng(0))
    with pytest.raises(PartitionError):
        partition_by_label(ds, 10, 1, 10, np.random.default_rng(0))
    # one class, many clients: the single pool runs dry
    one = LabeledDataset(np.zeros((10, 2)), np.r_[np.zeros(9), [1]].astype(int), 2)
    with pytest.raises(PartitionError, match="ran out of samples"):
        partition_by_label(one, 2, 1, 5, np.random.default_rng(0))


def test_manifest_round_trip():
    ds = gen_blobs(4, 3, 10, 1.0, np.random.default_rng(1))
    shards = partition_by_label(ds, 4, 2, 10, np.random.default_rng(2))
    again = shards_from_manifest(ds, manifest_of(shards))
    for a, b in zip(shards, again):
        assert a.client_id == b.client_id
        assert np.array_equal(a.indices, b.indices)
        assert a.class_inventory == b.class_inventory


def test_split_shard_is_stratified_and_disjoint():
    ds = gen_blobs(2, 2, 20, 1.0, np.random.default_rng(3))
    sh = ClientShard(0, ds.features, ds.labels, (0, 1), np.arange(len(ds)))
    train, test = split_shard(sh, 0.25, np.random.default_rng(4))
    assert np.bincount(test.targets).tolist() == [5, 5]
    assert not set(train.indices.tolist()) & set(test.indices.tolist())
    assert train.n + test.n == sh.n
