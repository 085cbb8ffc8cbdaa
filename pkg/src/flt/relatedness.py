"""Client-relatedness discovery: signatures, adjacency, Ward clustering.

A client's *signature* is the set of k-means centroids of its encoded
samples. The server embeds all centroids jointly (UMAP, or PCA for the
linear baseline), measures the closest pair between every two clients,
thresholds that distance into a binary adjacency, and clusters the raw
distances with Ward linkage.
"""
from __future__ import annotations

import csv
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import nn
from .umap import UmapParams, umap_embed

__all__ = [
    "KMeansResult",
    "kmeans_fit",
    "kmeans",
    "Signature",
    "client_signature",
    "build_adjacency",
    "threshold",
    "row_normalize",
    "Dendrogram",
    "WardResult",
    "ward_hc",
    "auto_cluster_count",
    "leaf_order",
    "pca",
    "pca_project",
    "RelatednessGraph",
    "run_fcr",
]


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    history: list  # inertia after every Lloyd iteration of the winning restart


def _plusplus(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            i = int(rng.integers(len(X)))
        else:
            i = int(rng.choice(len(X), p=d2 / total))
        centers.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(1))
    return np.array(centers)


def _lloyd(X, centers, max_iters):
    history = []
    labels = None
    it = 0
    for it in range(1, max_iters + 1):
        d2 = cdist(X, centers, "sqeuclidean")
        new_labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(X)), new_labels].sum())
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = centers.copy()
        for j in range(len(centers)):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # empty cluster: move it onto the point worst served by the others
                far = int(d2[np.arange(len(X)), labels].argmax())
                centers[j] = X[far]
                labels = labels.copy()
                labels[far] = j
                d2[far] = 0.0
    d2 = cdist(X, centers, "sqeuclidean")
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(X)), labels].sum())
    if not history or inertia < history[-1]:
        history.append(inertia)
    return centers, labels, inertia, it, history


def kmeans_fit(points, k: int, max_iters: int = 100, seed=0, n_init: int = 10) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts by inertia."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(X) < k:
        raise ValueError(f"k-means needs at least k={k} points, got {len(X)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        res = _lloyd(X, _plusplus(X, k, rng), max_iters)
        if best is None or res[2] < best[2]:
            best = res
    c, labels, inertia, it, hist = best
    return KMeansResult(c, labels, inertia, it, hist)


def kmeans(points, k: int, max_iters: int = 100, seed=0, n_init: int = 10) -> np.ndarray:
    """Centroids (k, D) of the best k-means restart."""
    return kmeans_fit(points, k, max_iters, seed, n_init).centroids


# ---------------------------------------------------------------------------
# signatures


@dataclass
class Signature:
    client_id: int
    centroids: np.ndarray  # (k, e)
    requested_k: int | None = None  # set when k was clamped to the client's sample count

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def e(self) -> int:
        return self.centroids.shape[1]

    @property
    def payload_size(self) -> int:
        return self.centroids.size

    def to_bytes(self) -> bytes:
        """Little-endian header (client_id, k, e) as int32, then k*e float64 values."""
        return struct.pack("<iii", self.client_id, self.k, self.e) + np.ascontiguousarray(
            self.centroids, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Signature":
        cid, k, e = struct.unpack("<iii", raw[:12])
        body = np.frombuffer(raw[12:], dtype="<f8")
        if body.size != k * e:
            raise ValueError(f"signature payload has {body.size} values, header says {k}x{e}")
        return cls(cid, body.reshape(k, e).astype(np.float64))


def client_signature(enc: nn.EncoderHandle, data, k: int = 5, seed=0, client_id: int | None = None,
                     n_init: int = 10) -> Signature:
    """Encode a client's training samples and summarise them by k centroids."""
    z = nn.encode(enc, data)
    if len(z) == 0:
        raise nn.EmptyDatasetError("client has no samples to sign")
    cid = client_id if client_id is not None else getattr(data, "client_id", 0)
    k_used = min(k, len(z))
    c = kmeans(z, k_used, seed=seed, n_init=n_init)
    if not np.all(np.isfinite(c)):
        raise nn.NonFiniteError(f"client {cid}: non-finite centroid")
    return Signature(int(cid), c, requested_k=k if k_used != k else None)


# ---------------------------------------------------------------------------
# adjacency


def build_adjacency(groups: Sequence[np.ndarray]) -> np.ndarray:
    """A[i, j] = smallest Euclidean distance between a point of group i and one of group j."""
    groups = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in groups]
    if any(len(g) == 0 for g in groups):
        raise ValueError("every client must contribute at least one point")
    M = len(groups)
    A = np.zeros((M, M))
    for i in range(M):
        for j in range(i + 1, M):
            A[i, j] = A[j, i] = cdist(groups[i], groups[j]).min()
    return A


def threshold(A: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Binary adjacency: 1 where A <= gamma, unit diagonal."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    At = (np.asarray(A) <= gamma).astype(np.float64)
    np.fill_diagonal(At, 1.0)
    return np.maximum(At, At.T)


def row_normalize(A_tilde: np.ndarray, p) -> np.ndarray:
    """Row-stochastic weights A_bar[i, j] = At[i, j] p_j / sum_j' At[i, j'] p_j'."""
    At = np.asarray(A_tilde, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if At.shape != (len(p), len(p)):
        raise ValueError(f"adjacency {At.shape} does not match {len(p)} weights")
    W = At * p[None, :]
    s = W.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("a row of the adjacency carries zero total weight")
    return W / s


# ---------------------------------------------------------------------------
# Ward clustering


@dataclass
class Dendrogram:
    """Merges in order. Leaves are 0..M-1; merge t creates node M + t."""

    merges: list  # (left, right, height, size)
    n_leaves: int

    @property
    def heights(self) -> np.ndarray:
        return np.array([m[2] for m in self.merges])

    def to_linkage(self) -> np.ndarray:
        return np.array([[l, r, h, s] for l, r, h, s in self.merges], dtype=np.float64).reshape(-1, 4)

    def cut(self, C: int) -> np.ndarray:
        """Cluster labels after the first M - C merges, numbered by smallest member."""
        M = self.n_leaves
        if not 1 <= C <= M:
            raise ValueError(f"cannot cut {M} leaves into {C} clusters")
        parent = list(range(M))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        node_leaf = list(range(M))  # any leaf under each node
        for left, right, _, _ in self.merges[: M - C]:
            a, b = find(node_leaf[left]), find(node_leaf[right])
            parent[max(a, b)] = min(a, b)
            node_leaf.append(min(a, b))
        roots = [find(i) for i in range(M)]
        relabel = {}
        for r in roots:
            relabel.setdefault(r, len(relabel))
        return np.array([relabel[r] for r in roots])


def leaf_order(dendro: Dendrogram) -> np.ndarray:
    """Leaves left to right; every subtree (hence every cut cluster) is contiguous."""
    M = dendro.n_leaves
    if M == 0:
        return np.zeros(0, dtype=np.int64)
    if not dendro.merges:
        return np.arange(M)
    children = {M + t: (l, r) for t, (l, r, _, _) in enumerate(dendro.merges)}
    order, stack = [], [M + len(dendro.merges) - 1]
    while stack:
        node = stack.pop()
        if node < M:
            order.append(node)
        else:
            l, r = children[node]
            stack.extend([r, l])
    return np.array(order, dtype=np.int64)


def _ward_merges(D: np.ndarray) -> list:
    """Greedy Ward agglomeration via the Lance-Williams update on squared dissimilarities."""
    M = len(D)
    d2 = D.astype(np.float64) ** 2
    np.fill_diagonal(d2, np.inf)
    size = np.ones(M)
    node = list(range(M))  # dendrogram id held by each active slot
    active = np.ones(M, dtype=bool)
    merges = []
    for t in range(M - 1):
        masked = np.where(active[:, None] & active[None, :], d2, np.inf)
        flat = int(np.argmin(np.triu(masked, 1) + np.tril(np.full_like(masked, np.inf))))
        i, j = divmod(flat, M)  # i < j, lowest pair on ties
        dij = d2[i, j]
        ni, nj = size[i], size[j]
        nk = size
        new = ((ni + nk) * d2[i] + (nj + nk) * d2[j] - nk * dij) / (ni + nj + nk)
        d2[i, :] = new
        d2[:, i] = new
        d2[i, i] = np.inf
        active[j] = False
        d2[j, :] = np.inf
        d2[:, j] = np.inf
        left, right = sorted((node[i], node[j]))
        merges.append((left, right, float(np.sqrt(max(dij, 0.0))), int(ni + nj)))
        size[i] = ni + nj
        node[i] = M + t
    return merges


def auto_cluster_count(heights: np.ndarray, floor_frac: float = 0.05) -> int:
    """Cluster count at the largest relative jump between consecutive merge heights.

    Cutting between merges t and t+1 leaves M - t - 1 clusters (0-based t).
    The jump is (h[t+1] - h[t]) / max(h[t], floor_frac * max(h)); ties go to
    the cut with fewer clusters. Fewer than two merges gives one cluster.
    """
    h = np.asarray(heights, dtype=np.float64)
    M = len(h) + 1
    if len(h) < 2 or h[-1] <= 0:
        return 1
    floor = floor_frac * h.max()
    gaps = (h[1:] - h[:-1]) / np.maximum(h[:-1], floor)
    best = np.flatnonzero(gaps == gaps.max())[-1]  # later merge index -> fewer clusters
    return int(M - best - 1)


@dataclass
class WardResult:
    dendrogram: Dendrogram
    assignment: np.ndarray
    order: np.ndarray
    n_clusters: int


def ward_hc(A: np.ndarray, C: int | None = None, floor_frac: float = 0.05) -> WardResult:
    """Ward hierarchical clustering of a dissimilarity matrix.

    With ``C`` the tree is cut into exactly C clusters; otherwise the count
    comes from :func:`auto_cluster_count`. ``order`` is the dendrogram leaf
    order, which keeps each cluster contiguous.
    """
    A = np.asarray(A, dtype=np.float64)
    M = A.shape[0]
    if A.shape != (M, M):
        raise ValueError("dissimilarity matrix must be square")
    if not np.allclose(A, A.T) or np.any(np.diag(A) != 0):
        raise ValueError("dissimilarity matrix must be symmetric with zero diagonal")
    if C is not None and not 1 <= C <= M:
        raise ValueError(f"cannot form C={C} clusters from M={M} clients")
    dendro = Dendrogram(_ward_merges(A), M)
    if C is None:
        C = auto_cluster_count(dendro.heights, floor_frac) if M > 1 else 1
    return WardResult(dendro, dendro.cut(C), leaf_order(dendro), C)


# ---------------------------------------------------------------------------
# PCA baseline


def pca(points, dims: int):
    """Returns (projection, components (dims, D), explained_variance_ratio)."""
    X = np.asarray(points, dtype=np.float64)
    if dims > X.shape[1]:
        raise ValueError(f"cannot keep {dims} components of {X.shape[1]}-dim data")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(len(X) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1][:dims], vecs[:, ::-1][:, :dims]
    vals = np.maximum(vals, 0.0)
    # sign convention: largest-magnitude loading positive
    flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(dims)])
    vecs = vecs * np.where(flip == 0, 1.0, flip)
    total = np.trace(cov)
    scale = max(total, 1.0)
    dead = vals <= 1e-12 * scale
    vecs[:, dead] = 0.0  # zero-variance directions project to zero
    ratio = vals / total if total > 0 else np.zeros(dims)
    return Xc @ vecs, vecs.T, ratio


def pca_project(points, dims: int) -> np.ndarray:
    return pca(points, dims)[0]


# ---------------------------------------------------------------------------
# graph container + end-to-end pipeline


@dataclass
class RelatednessGraph:
    A: np.ndarray
    A_tilde: np.ndarray
    A_bar: np.ndarray
    clusters: np.ndarray | None = None
    order: np.ndarray | None = None
    gamma: float = 1.0
    dendrogram: Dendrogram | None = None
    signatures: list = field(default_factory=list, repr=False)
    embedded: list = field(default_factory=list, repr=False)

    @property
    def M(self) -> int:
        return self.A.shape[0]

    def reordered(self) -> np.ndarray:
        """A_tilde with rows and columns in cluster (leaf) order."""
        o = self.order if self.order is not None else np.arange(self.M)
        return self.A_tilde[np.ix_(o, o)]

    def to_dict(self) -> dict:
        out = {
            "M": self.M,
            "gamma": self.gamma,
            "A": self.A.tolist(),
            "A_tilde": self.A_tilde.astype(int).tolist(),
            "A_bar": self.A_bar.tolist(),
            "clusters": None if self.clusters is None else self.clusters.tolist(),
            "order": None if self.order is None else self.order.tolist(),
        }
        if self.dendrogram is not None:
            out["dendrogram"] = [list(m) for m in self.dendrogram.merges]
        return out

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d: dict) -> "RelatednessGraph":
        dendro = None
        if d.get("dendrogram") is not None:
            dendro = Dendrogram([(int(l), int(r), float(h), int(s)) for l, r, h, s in d["dendrogram"]], d["M"])
        return cls(
            np.array(d["A"], dtype=np.float64),
            np.array(d["A_tilde"], dtype=np.float64),
            np.array(d["A_bar"], dtype=np.float64),
            None if d.get("clusters") is None else np.array(d["clusters"]),
            None if d.get("order") is None else np.array(d["order"]),
            d.get("gamma", 1.0),
            dendro,
        )

    @classmethod
    def from_json(cls, path) -> "RelatednessGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self, directory) -> None:
        """A.csv, A_tilde.csv and A_bar.csv, one matrix row per line."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("A", "A_tilde", "A_bar"):
            with open(directory / f"{name}.csv", "w", newline="") as f:
                csv.writer(f).writerows(getattr(self, name).tolist())


def _client_sig(args):
    cid, client, enc, k, seed, mode, ft = args
    if mode == "fine-tune":
        if enc.autoencoder is None or enc.depth is None:
            raise ValueError("fine-tune mode needs an encoder cut from an autoencoder")
        rng = np.random.default_rng([seed, cid, 1])
        ae = nn.finetune_autoencoder(enc.autoencoder, client.train, epochs=ft["epochs"], lr=ft["lr"],
                                     batch_size=ft["batch_size"], rng=rng)
        enc = nn.encoder_from_autoencoder(ae, enc.depth)
    return client_signature(enc, client.train, k, seed=np.random.default_rng([seed, cid, 2]), client_id=cid)


def run_fcr(
    clients: Sequence,
    enc: nn.EncoderHandle,
    k: int = 5,
    umap_params: UmapParams | None = None,
    gamma: float = 1.0,
    C: int | None = None,
    mode: str = "normal",
    baseline: str = "umap",
    seed: int = 0,
    finetune_epochs: int = 5,
    finetune_lr: float = 0.01,
    finetune_batch_size: int = 10,
    workers: int | None = None,
    floor_frac: float = 0.05,
) -> RelatednessGraph:
    """One-shot relatedness discovery over all clients.

    Parameters
    ----------
    clients : list of ClientDataset
    enc : EncoderHandle
        Shared encoder. In ``mode="fine-tune"`` every client first fine-tunes
        ``enc.autoencoder`` on its own data and signs with its own encoder.
    baseline : {"umap", "pca"}
        Server-side projection of the pooled centroids.
    C : int, optional
        Number of Ward clusters; chosen automatically when omitted.

    Notes
    -----
    ``umap_params.n_neighbors`` is lowered to (number of centroids - 1) when
    there are too few centroids for it.
    """
    if mode not in ("normal", "fine-tune"):
        raise ValueError("mode must be 'normal' or 'fine-tune'")
    if baseline not in ("umap", "pca"):
        raise ValueError("baseline must be 'umap' or 'pca'")
    M = len(clients)
    if M == 0:
        raise ValueError("no clients")
    ft = {"epochs": finetune_epochs, "lr": finetune_lr, "batch_size": finetune_batch_size}
    jobs = [(int(getattr(c, "client_id", i)), c, enc, k, seed, mode, ft) for i, c in enumerate(clients)]
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            sigs = list(pool.map(_client_sig, jobs))
    else:
        sigs = [_client_sig(j) for j in jobs]

    pooled = np.concatenate([s.centroids for s in sigs])
    bounds = np.cumsum([0] + [s.k for s in sigs])
    params = umap_params or UmapParams(seed=seed)
    if baseline == "pca":
        Z = pca_project(pooled, min(params.target_dim, pooled.shape[1]))
    else:
        if len(pooled) < 3:
            raise ValueError(f"UMAP needs at least 3 pooled centroids, got {len(pooled)}")
        if len(pooled) <= params.n_neighbors:
            params = UmapParams(**{**params.__dict__, "n_neighbors": len(pooled) - 1})
        Z = umap_embed(pooled, params)
    groups = [Z[bounds[i] : bounds[i + 1]] for i in range(M)]
    A = build_adjacency(groups)
    At = threshold(A, gamma)
    p = np.array([getattr(c, "p", 1.0 / M) for c in clients], dtype=np.float64)
    if p.sum() <= 0:
        p = np.full(M, 1.0 / M)
    Abar = row_normalize(At, p / p.sum())
    if M > 1:
        res = ward_hc(A, C, floor_frac=floor_frac)
        clusters, order, dendro = res.assignment, res.order, res.dendrogram
    else:
        clusters, order, dendro = np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64), Dendrogram([], 1)
    return RelatednessGraph(A, At, Abar, clusters, order, gamma, dendro, sigs, groups)
