import gzip
import math
import os
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from flt import data as D


def _labelled(n_per_class, L, dims=3, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(L), n_per_class)
    return D.Dataset(rng.standard_normal((len(y), dims)), y, L)


def _all_indices(clients):
    return np.concatenate([np.concatenate([c.train.indices, c.test.indices]) for c in clients])


# -- gaussian mixture ------------------------------------------------------------

def test_zero_std_collapses_to_means():
    means = [[1.0, 2.0], [-3.0, 0.5]]
    ds = D.gen_gaussian_mixture(2, 2, means, 0.0, 5, seed=0)
    np.testing.assert_array_equal(ds.X, np.repeat(means, 5, axis=0))


def test_sample_mean_near_origin():
    ds = D.gen_gaussian_mixture(1, 4, np.zeros((1, 4)), 1.0, 10_000, seed=3)
    assert np.all(np.abs(ds.X.mean(axis=0)) < 0.05)


def test_far_components_recovered_by_nearest_centroid():
    means = np.array([[0.0, 0.0], [10.0, 0.0]])
    ds = D.gen_gaussian_mixture(2, 2, means, 1.0, 5000, seed=1)
    pred = np.argmin(((ds.X[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.y) >= 0.999


def test_mixture_dims_mismatch_and_determinism():
    with pytest.raises(ValueError):
        D.gen_gaussian_mixture(2, 3, np.zeros((2, 2)), 1.0, 4)
    a = D.gen_gaussian_mixture(2, 2, np.zeros((2, 2)), [1.0, 2.0], 4, seed=9)
    b = D.gen_gaussian_mixture(2, 2, np.zeros((2, 2)), [1.0, 2.0], 4, seed=9)
    np.testing.assert_array_equal(a.X, b.X)


# -- pathological partitions ---------------------------------------------------------

def test_scenario1_shape_on_mnist_sized_data():
    ds = _labelled(6000, 10, dims=1)
    clients, truth = D.partition_pathological(ds, 100, 5, 2, overlap=0, seed=0, samples_per_client=600)
    assert len(clients) == 100
    assert all(len(c.train) + len(c.test) == 600 for c in clients)
    assert truth.num_clusters == 5


def test_single_cluster_sees_all_labels():
    ds = _labelled(40, 4)
    clients, truth = D.partition_pathological(ds, 4, 1, 4, seed=0)
    for c in clients:
        assert set(c.train.y) | set(c.test.y) == {0, 1, 2, 3}
    assert set(truth.assignment) == {0}


@pytest.mark.parametrize("overlap", [0, 1])
@pytest.mark.parametrize("seed", range(4))
def test_cluster_label_audit(overlap, seed):
    ds = _labelled(30, 10)
    clients, truth = D.partition_pathological(ds, 10, 5, 2, overlap=overlap, seed=seed)
    for c in range(5):
        seen = set()
        for cl in clients:
            if truth.assignment[cl.client_id] == c:
                seen |= set(cl.train.y) | set(cl.test.y)
        assert seen == set(truth.labels[c])
    if overlap:
        for c in range(5):
            assert len(set(truth.labels[c]) & set(truth.labels[(c + 1) % 5])) == 1
    else:
        flat = [l for s in truth.labels for l in s]
        assert len(flat) == len(set(flat))


def test_pathological_completeness_and_weights():
    ds = _labelled(25, 10)
    clients, _ = D.partition_pathological(ds, 10, 5, 2, seed=2)
    assert Counter(_all_indices(clients).tolist()) == Counter(range(len(ds)))
    n_train = sum(len(c.train) for c in clients)
    for c in clients:
        assert abs(c.p - len(c.train) / n_train) <= 1e-12
    assert abs(sum(c.p for c in clients) - 1.0) <= 1e-12


def test_pathological_split_is_even_and_seeded():
    ds = _labelled(25, 10)
    a, _ = D.partition_pathological(ds, 10, 5, 2, seed=4)
    b, _ = D.partition_pathological(ds, 10, 5, 2, seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.train.indices, y.train.indices)
    sizes = [len(c.train) + len(c.test) for c in a]
    assert max(sizes) - min(sizes) <= 1


def test_pathological_errors():
    ds = _labelled(10, 4)
    with pytest.raises(D.PartitionError, match="deficit of 20"):
        D.partition_pathological(ds, 4, 2, 2, samples_per_client=20)
    with pytest.raises(D.PartitionError):
        D.partition_pathological(ds, 5, 2, 2)
    with pytest.raises(D.PartitionError):
        D.partition_pathological(ds, 4, 4, 2)  # 8 labels needed, 4 available


def test_test_split_follows_train_labels():
    ds = _labelled(50, 10)
    clients, _ = D.partition_pathological(ds, 10, 5, 2, seed=1)
    for c in clients:
        assert set(c.test.y) <= set(c.train.y)
        assert abs(len(c.test) / (len(c.test) + len(c.train)) - 0.2) < 0.05


# -- solve_beta ----------------------------------------------------------------------

def test_single_client_beta_closed_form():
    assert D.solve_beta(10, 0.7, 1, 250) == math.log(240)


def test_beta_hand_example():
    # alpha=20, delta=1, M_c=3, total=120: x + x^2 + x^3 = 60 with x = e^beta
    x = brentq(lambda x: x + x * x + x**3 - 60, 1.0, 10.0, xtol=1e-14)
    beta = D.solve_beta(20, 1, 3, 120)
    assert beta == pytest.approx(math.log(x), abs=1e-9)
    assert round(beta, 2) == 1.26


def test_beta_increases_with_total():
    assert D.solve_beta(5, 0.5, 6, 290) < D.solve_beta(5, 0.5, 6, 300) < D.solve_beta(5, 0.5, 6, 310)


def test_beta_infeasible():
    with pytest.raises(D.PartitionError):
        D.solve_beta(20, 1, 3, 60)


@settings(max_examples=60, deadline=None)
@given(alpha=st.integers(1, 30), delta=st.floats(0, 1.5), Mc=st.integers(1, 12), extra=st.integers(1, 3000))
def test_beta_residual_within_half_sample(alpha, delta, Mc, extra):
    total = alpha * Mc + extra
    beta = D.solve_beta(alpha, delta, Mc, total)
    m = np.arange(1, Mc + 1)
    assert abs(np.sum(alpha + np.exp(beta * m**delta)) - total) <= 0.5


# -- structured sampler --------------------------------------------------------------

def _structured(delta, seed=0, C=3, per=2, members=4, L=6, n=60, alpha=5):
    ds = _labelled(n, L, seed=seed)
    spec = D.PartitionSpec(mode="structured", M=C * members, C=C, alpha=alpha, delta=delta, seed=seed)
    labels = [list(range(c * per, (c + 1) * per)) for c in range(C)]
    membership = [list(range(c * members, (c + 1) * members)) for c in range(C)]
    return ds, D.sample_structured_noniid(ds, spec, labels, membership)


def _sizes(clients):
    return [len(c.train) + len(c.test) for c in clients]


def test_zero_delta_gives_equal_sizes():
    _, (clients, _) = _structured(0.0)
    for c in range(3):
        sizes = _sizes(clients[c * 4 : (c + 1) * 4])
        assert len(set(sizes)) == 1


def test_structured_scenario4_shape():
    ds = _labelled(80, 50, dims=2)
    spec = D.PartitionSpec(mode="structured", M=40, C=10, alpha=10, delta=0.5, seed=1)
    labels = [list(range(5 * c, 5 * c + 5)) for c in range(10)]
    membership = [list(range(4 * c, 4 * c + 4)) for c in range(10)]
    clients, truth = D.sample_structured_noniid(ds, spec, labels, membership)
    assert truth.num_clusters == 10
    assert all(len(set(c.train.y) | set(c.test.y)) <= 5 for c in clients)


@settings(max_examples=25, deadline=None)
@given(delta=st.floats(0.05, 1.2), seed=st.integers(0, 1000))
def test_structured_conservation_and_monotonicity(delta, seed):
    ds, (clients, truth) = _structured(delta, seed=seed)
    assert Counter(_all_indices(clients).tolist()) == Counter(range(len(ds)))
    for c in range(3):
        members = [cl for cl in clients if truth.assignment[cl.client_id] == c]
        assert sum(_sizes(members)) == np.isin(ds.y, truth.labels[c]).sum()
        assert np.all(np.diff(_sizes(members)) >= 0)
    assert abs(sum(c.p for c in clients) - 1.0) <= 1e-12


def test_power_law_negative_residual_keeps_order():
    for total in range(60, 400):
        sizes = D.power_law_sizes(3, 0.3, 7, total)
        assert sizes.sum() == total
        assert np.all(np.diff(sizes) >= 0)


def test_structured_rejects_overlapping_labels():
    ds = _labelled(10, 4)
    spec = D.PartitionSpec(mode="structured", M=2, C=2, alpha=1)
    with pytest.raises(D.PartitionError):
        D.sample_structured_noniid(ds, spec, [[0, 1], [1, 2]], [[0], [1]])


def test_partition_spec_validation():
    with pytest.raises(ValueError):
        D.PartitionSpec(M=10, C=3)
    with pytest.raises(ValueError):
        D.PartitionSpec(mode="structured", alpha=0)
    with pytest.raises(ValueError):
        D.PartitionSpec(mode="structured", delta=-1)


# -- IDX ---------------------------------------------------------------------------------

def _write_pair(tmp_path, images, labels, gz=False):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    D.save_idx(ip, lp, images, labels)
    if gz:
        for p in (ip, lp):
            p.write_bytes(gzip.compress(p.read_bytes()))
    return ip, lp


def test_hand_built_idx_pair(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    ip.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([0, 255, 128, 1, 2, 3, 4, 5]))
    lp.write_bytes(struct.pack(">II", 0x801, 2) + bytes([7, 3]))
    ds = D.load_idx(ip, lp, num_classes=10)
    assert ds.X.shape == (2, 2, 2)
    assert ds.y.tolist() == [7, 3]
    assert ds.X[0, 0, 0] == 0.0 and ds.X[0, 0, 1] == 1.0


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    labs = rng.integers(0, 10, size=5)
    ds = D.load_idx(*_write_pair(tmp_path, imgs, labs, gz))
    np.testing.assert_array_equal(ds.X, imgs / 255.0)
    np.testing.assert_array_equal(ds.y, labs)


def test_idx_errors(tmp_path):
    imgs = np.zeros((3, 2, 2), dtype=np.uint8)
    ip, lp = _write_pair(tmp_path, imgs, np.arange(3))
    with pytest.raises(D.IdxMagicError):
        D.load_idx(lp, ip)
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-1])
    with pytest.raises(D.IdxTruncatedError):
        D.load_idx(ip, lp)
    ip.write_bytes(raw)
    lp.write_bytes(struct.pack(">II", 0x801, 2) + bytes([0, 1]))
    with pytest.raises(D.IdxCountMismatchError):
        D.load_idx(ip, lp)
    for exc in (D.IdxMagicError, D.IdxTruncatedError, D.IdxCountMismatchError):
        assert issubclass(exc, D.IdxFormatError)


@pytest.mark.skipif(not os.environ.get("FLT_MNIST_DIR"), reason="FLT_MNIST_DIR not set")
def test_mnist_train_file():
    root = os.environ["FLT_MNIST_DIR"]
    candidates = [("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                  ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz")]
    for ip, lp in candidates:
        if os.path.exists(os.path.join(root, ip)):
            ds = D.load_idx(os.path.join(root, ip), os.path.join(root, lp))
            break
    else:
        pytest.skip("no MNIST training files found")
    assert len(ds) == 60_000
    assert ds.num_classes == 10


# -- manifests ------------------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    ds = _labelled(20, 4)
    clients, truth = D.partition_pathological(ds, 4, 2, 2, seed=0)
    D.save_manifest(tmp_path / "m.json", clients, truth)
    back, truth2 = D.load_manifest(tmp_path / "m.json", ds)
    for a, b in zip(clients, back):
        np.testing.assert_array_equal(a.train.X, b.train.X)
        assert a.p == b.p
    np.testing.assert_array_equal(truth.assignment, truth2.assignment)
