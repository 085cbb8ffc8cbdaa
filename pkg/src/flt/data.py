"""Datasets, IDX loading and non-IID client partitioners."""
from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Dataset",
    "ClientDataset",
    "PartitionSpec",
    "GroundTruthClusters",
    "PartitionError",
    "IdxFormatError",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxCountMismatchError",
    "gen_gaussian_mixture",
    "partition_pathological",
    "solve_beta",
    "power_law_sizes",
    "sample_structured_noniid",
    "load_idx",
    "save_idx",
    "partition_manifest",
    "save_manifest",
    "load_manifest",
]


class PartitionError(ValueError):
    pass


@dataclass
class Dataset:
    """Labelled samples. ``X`` has shape (n, *feature_shape); ``y`` holds ints in [0, L)."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    indices: np.ndarray | None = None  # positions in the source dataset, if derived

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def feature_shape(self) -> tuple:
        return tuple(self.X.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        src = idx if self.indices is None else self.indices[idx]
        return Dataset(self.X[idx], self.y[idx], self.num_classes, indices=src)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass
class ClientDataset:
    client_id: int
    train: Dataset
    test: Dataset
    p: float = 0.0

    def __len__(self):
        return len(self.train)


@dataclass
class GroundTruthClusters:
    assignment: np.ndarray
    labels: list = field(default_factory=list)  # label set per cluster

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)

    @property
    def num_clusters(self) -> int:
        return int(self.assignment.max()) + 1 if self.assignment.size else 0


@dataclass
class PartitionSpec:
    """Parameters shared by the partitioners.

    ``mode`` is one of ``pathological``, ``overlap1`` or ``structured``.
    ``alpha`` and ``delta`` are the power-law minimum and exponent of the
    structured sampler; ``samples_per_client`` (pathological modes) fixes an
    exact per-client sample count, otherwise each cluster's pool is split
    evenly.
    """

    mode: str = "pathological"
    M: int = 20
    C: int = 5
    labels_per_cluster: int = 2
    alpha: int = 10
    delta: float = 0.5
    samples_per_client: int | None = None
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("pathological", "overlap1", "structured"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.M < 1 or self.C < 1:
            raise ValueError("M and C must be positive")
        if self.mode != "structured" and self.M % self.C:
            raise ValueError(f"M={self.M} is not divisible into C={self.C} clusters")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")


# ---------------------------------------------------------------------------
# synthetic data


def gen_gaussian_mixture(num_clusters: int, dims: int, means, stds, samples_per_cluster,
                         seed: int = 0) -> Dataset:
    """Isotropic (or per-dimension) Gaussian components; the label is the component index."""
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (num_clusters, dims):
        raise ValueError(f"means must have shape ({num_clusters}, {dims}), got {means.shape}")
    stds = np.asarray(stds, dtype=np.float64)
    if stds.ndim < 2:
        stds = np.broadcast_to(stds, (num_clusters,))[:, None]
    if stds.shape not in ((num_clusters, 1), (num_clusters, dims)):
        raise ValueError(f"stds must be scalar, per-cluster or shape ({num_clusters}, {dims})")
    if np.any(stds < 0):
        raise ValueError("standard deviations must be non-negative")
    counts = np.broadcast_to(np.asarray(samples_per_cluster, dtype=np.int64), (num_clusters,))
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(num_clusters):
        xs.append(means[c] + stds[c] * rng.standard_normal((counts[c], dims)))
        ys.append(np.full(counts[c], c))
    return Dataset(np.concatenate(xs), np.concatenate(ys), num_clusters)


# ---------------------------------------------------------------------------
# helpers shared by the partitioners


def _split_client(data: Dataset, idx: np.ndarray, client_id: int, test_fraction: float,
                  rng: np.random.Generator) -> ClientDataset:
    idx = rng.permutation(idx)
    n_test = int(round(len(idx) * test_fraction))
    if len(idx) > 1:
        n_test = min(n_test, len(idx) - 1)
    else:
        n_test = 0
    test_idx, train_idx = np.sort(idx[:n_test]), np.sort(idx[n_test:])
    return ClientDataset(client_id, data.subset(train_idx), data.subset(test_idx))


def _assign_fractions(clients: list[ClientDataset]) -> None:
    total = sum(len(c.train) for c in clients)
    for c in clients:
        c.p = len(c.train) / total


def _cluster_label_sets(labels: np.ndarray, C: int, per_cluster: int, overlap: int) -> list[list[int]]:
    """Consecutive label blocks; with overlap=1 cluster c shares its last label with c+1 (mod C)."""
    step = per_cluster - overlap
    sets = []
    for c in range(C):
        block = [labels[(c * step + j) % (C * step)] for j in range(per_cluster)]
        sets.append([int(v) for v in block])
    return sets


def partition_pathological(data: Dataset, M: int, C: int, labels_per_cluster: int, overlap: int = 0,
                           seed: int = 0, samples_per_client: int | None = None,
                           test_fraction: float = 0.2, label_sets: Sequence[Sequence[int]] | None = None):
    """Label-skew partition: every client of cluster c sees only cluster c's labels.

    With ``overlap=1`` neighbouring clusters (c, c+1 mod C) share one label.
    Returns ``(clients, GroundTruthClusters)``; clients are numbered cluster
    by cluster, ``M // C`` per cluster.
    """
    if overlap not in (0, 1):
        raise ValueError("overlap must be 0 or 1")
    if M % C:
        raise PartitionError(f"M={M} is not divisible into C={C} clusters")
    if overlap and C < 2:
        raise PartitionError("overlapping label sets need at least two clusters")
    if overlap and labels_per_cluster < 2:
        raise PartitionError("overlapping clusters need at least two labels each")
    L = data.num_classes
    rng = np.random.default_rng(seed)
    if label_sets is None:
        needed = C * (labels_per_cluster - overlap)
        if needed > L:
            raise PartitionError(f"{C} clusters x {labels_per_cluster} labels need {needed} classes, have {L}")
        label_sets = _cluster_label_sets(rng.permutation(L), C, labels_per_cluster, overlap)
    label_sets = [sorted(int(v) for v in s) for s in label_sets]
    per_cluster = M // C

    # which clusters draw from each label; a shared label's samples are split between them
    owners: dict[int, list[int]] = {}
    for c, s in enumerate(label_sets):
        for lab in s:
            owners.setdefault(lab, []).append(c)
    pools: list[list[np.ndarray]] = [[] for _ in range(C)]
    for lab in sorted(owners):
        idx = rng.permutation(np.flatnonzero(data.y == lab))
        for c, part in zip(owners[lab], np.array_split(idx, len(owners[lab]))):
            pools[c].append(part)

    clients, assignment = [], []
    for c in range(C):
        pool = rng.permutation(np.concatenate(pools[c])) if pools[c] else np.zeros(0, dtype=np.int64)
        if samples_per_client is not None:
            need = per_cluster * samples_per_client
            if len(pool) < need:
                raise PartitionError(
                    f"cluster {c} (labels {label_sets[c]}) has {len(pool)} samples, "
                    f"needs {need}: deficit of {need - len(pool)}"
                )
            chunks = [pool[i * samples_per_client : (i + 1) * samples_per_client] for i in range(per_cluster)]
        else:
            if len(pool) < per_cluster:
                raise PartitionError(
                    f"cluster {c} has {len(pool)} samples for {per_cluster} clients: "
                    f"deficit of {per_cluster - len(pool)}"
                )
            chunks = np.array_split(pool, per_cluster)
        for chunk in chunks:
            clients.append(_split_client(data, chunk, len(clients), test_fraction, rng))
            assignment.append(c)
    _assign_fractions(clients)
    return clients, GroundTruthClusters(np.array(assignment), label_sets)


# ---------------------------------------------------------------------------
# structured (power-law) sampler


def _power_law_total(beta: float, alpha: float, delta: float, Mc: int) -> float:
    m = np.arange(1, Mc + 1, dtype=np.float64)
    return float(np.sum(alpha + np.exp(beta * m**delta)))


def solve_beta(alpha: float, delta: float, M_c: int, total: float, tol: float = 1e-12) -> float:
    """Growth rate beta with sum_{m=1..M_c} (alpha + exp(beta m^delta)) == total.

    The sum is strictly increasing in beta, so plain bisection converges.
    """
    if M_c < 1:
        raise ValueError("M_c must be >= 1")
    if total <= alpha * M_c:
        raise PartitionError(
            f"total {total} <= alpha*M_c = {alpha * M_c}: the power law cannot give every "
            f"client more than alpha samples"
        )
    if M_c == 1:
        return math.log(total - alpha)
    f = lambda b: _power_law_total(b, alpha, delta, M_c) - total
    hi = math.log(total)  # exp(hi * 1) alone already reaches total
    lo = -1.0
    while f(lo) > 0:
        lo *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def power_law_sizes(alpha: float, delta: float, M_c: int, total: int) -> np.ndarray:
    """Integer client sizes following alpha + exp(beta* m^delta) that sum exactly to ``total``.

    Each size is rounded half-up; the residual goes to the last client. If a
    negative residual would push the last client below its predecessor, the
    deficit is instead taken one sample at a time from the first client of
    the largest-size run, which keeps sizes non-decreasing.
    """
    beta = solve_beta(alpha, delta, M_c, total)
    m = np.arange(1, M_c + 1, dtype=np.float64)
    sizes = np.floor(alpha + np.exp(beta * m**delta) + 0.5).astype(np.int64)
    residual = int(total - sizes.sum())
    if residual >= 0 or M_c == 1 or sizes[-1] + residual >= sizes[-2]:
        sizes[-1] += residual
    else:
        for _ in range(-residual):
            j = int(np.flatnonzero(sizes == sizes.max())[0])
            sizes[j] -= 1
    if sizes.min() < 1:
        raise PartitionError(f"power-law sizes {sizes.tolist()} leave a client empty")
    return sizes


def sample_structured_noniid(data: Dataset, spec: PartitionSpec, cluster_labels: Sequence[Sequence[int]],
                             cluster_membership: Sequence[Sequence[int]]):
    """Label skew across clusters plus power-law quantity skew within each cluster.

    ``cluster_labels[c]`` are the (disjoint) labels of cluster c and
    ``cluster_membership[c]`` its client ids, in power-law order (the m-th
    listed client receives the m-th batch). Every sample whose label belongs
    to some cluster is assigned to exactly one client.
    """
    label_sets = [sorted(int(v) for v in s) for s in cluster_labels]
    flat = [v for s in label_sets for v in s]
    if len(flat) != len(set(flat)):
        raise PartitionError("cluster label sets must be disjoint")
    if len(label_sets) != len(cluster_membership):
        raise PartitionError("need one label set per cluster")
    ids = [int(i) for s in cluster_membership for i in s]
    if sorted(ids) != list(range(len(ids))):
        raise PartitionError("cluster membership must cover client ids 0..M-1 exactly once")
    rng = np.random.default_rng(spec.seed)
    by_id: dict[int, ClientDataset] = {}
    assignment = np.zeros(len(ids), dtype=np.int64)
    for c, (labs, members) in enumerate(zip(label_sets, cluster_membership)):
        pool = np.flatnonzero(np.isin(data.y, labs))
        sizes = power_law_sizes(spec.alpha, spec.delta, len(members), len(pool))
        pool = rng.permutation(pool)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        for m, cid in enumerate(members):
            chunk = pool[bounds[m] : bounds[m + 1]]
            by_id[int(cid)] = _split_client(data, chunk, int(cid), spec.test_fraction, rng)
            assignment[int(cid)] = c
    clients = [by_id[i] for i in range(len(ids))]
    _assign_fractions(clients)
    return clients, GroundTruthClusters(assignment, label_sets)


# ---------------------------------------------------------------------------
# IDX files


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    need = int(np.prod(dims))
    body = raw[header:]
    if len(body) < need:
        raise IdxTruncatedError(f"{path}: expected {need} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped). Pixels are scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    y = labels.astype(np.int64)
    L = num_classes if num_classes is not None else int(y.max()) + 1 if len(y) else 0
    return Dataset(images.astype(np.float64) / 255.0, y, L)


def save_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as IDX files."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images), 0, 255).astype(np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# partition manifests


def partition_manifest(clients: Sequence[ClientDataset], truth: GroundTruthClusters | None = None) -> dict:
    out = {
        "clients": {
            str(c.client_id): {
                "train": [int(i) for i in c.train.indices],
                "test": [int(i) for i in c.test.indices],
                "p": c.p,
            }
            for c in clients
        }
    }
    if truth is not None:
        out["ground_truth"] = {"assignment": truth.assignment.tolist(), "labels": truth.labels}
    return out


def save_manifest(path, clients, truth=None) -> None:
    Path(path).write_text(json.dumps(partition_manifest(clients, truth), indent=1))


def load_manifest(path, data: Dataset):
    """Rebuild clients (and ground truth, if stored) from a manifest and its source dataset."""
    doc = json.loads(Path(path).read_text())
    clients = []
    for cid in sorted(doc["clients"], key=int):
        entry = doc["clients"][cid]
        clients.append(ClientDataset(int(cid), data.subset(entry["train"]), data.subset(entry["test"]), entry["p"]))
    truth = None
    if "ground_truth" in doc:
        gt = doc["ground_truth"]
        truth = GroundTruthClusters(np.array(gt["assignment"]), gt["labels"])
    return clients, truth
