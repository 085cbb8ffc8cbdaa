"""A compact, exact-kNN UMAP for small point sets.

The pipeline is the usual one: exact k-nearest-neighbour graph, per-point
smoothed memberships, fuzzy-union symmetrisation, spectral initialisation
and a negative-sampling SGD layout. Only what is needed for a few thousand
points is implemented; there is no approximate-NN index and no
out-of-sample ``transform``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import curve_fit
from scipy.spatial.distance import cdist

__all__ = [
    "UmapParams",
    "knn",
    "smooth_knn_sigma",
    "fuzzy_graph",
    "fit_ab",
    "spectral_init",
    "umap_embed",
]

SMOOTH_TOL = 1e-10
MIN_DIST_SCALE = 1e-3


@dataclass
class UmapParams:
    n_neighbors: int = 15
    target_dim: int = 2
    min_dist: float = 0.1
    epochs: int = 200
    seed: int = 0
    spread: float = 1.0
    negative_sample_rate: int = 5
    learning_rate: float = 1.0
    init: str = "spectral"  # or "random"

    def __post_init__(self):
        if self.n_neighbors < 2:
            raise ValueError("n_neighbors must be >= 2")
        if self.target_dim < 1:
            raise ValueError("target_dim must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.min_dist < 0 or self.min_dist > self.spread:
            raise ValueError("need 0 <= min_dist <= spread")
        if self.init not in ("spectral", "random"):
            raise ValueError("init must be 'spectral' or 'random'")


def knn(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbours, each point's own index in column 0."""
    d = cdist(points, points)
    np.fill_diagonal(d, -1.0)  # self sorts first even among duplicates
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    dist = np.take_along_axis(d, idx, axis=1)
    dist[:, 0] = 0.0
    return idx, dist


def smooth_knn_sigma(dists: np.ndarray, rho: float, target: float, n_iter: int = 200) -> float:
    """Bisection for sigma with sum_j exp(-max(0, d_j - rho) / sigma) == target.

    ``dists`` are the distances to the non-self neighbours. The sum is
    increasing in sigma; if it already exceeds ``target`` as sigma -> 0 the
    smallest positive sigma examined is returned.
    """
    lo, hi, mid = 0.0, np.inf, 1.0
    excess = np.maximum(dists - rho, 0.0)
    for _ in range(n_iter):
        val = np.exp(-excess / mid).sum()
        if abs(val - target) < SMOOTH_TOL:
            break
        if val > target:
            hi = mid
            mid = 0.5 * (lo + hi)
        else:
            lo = mid
            mid = mid * 2.0 if hi == np.inf else 0.5 * (lo + hi)
    return mid


def fuzzy_graph(points: np.ndarray, n_neighbors: int):
    """Symmetric fuzzy membership matrix (sparse) plus the per-point rho and sigma."""
    n = len(points)
    idx, dist = knn(points, n_neighbors)
    target = np.log2(n_neighbors)
    rho = np.zeros(n)
    sigma = np.zeros(n)
    mean_all = dist[:, 1:].mean()
    for i in range(n):
        nb = dist[i, 1:]
        pos = nb[nb > 0]
        # nearest positive distance; exact duplicates would otherwise give rho = 0 everywhere
        rho[i] = pos[0] if pos.size else 0.0
        s = smooth_knn_sigma(nb, rho[i], target)
        floor = MIN_DIST_SCALE * (nb.mean() if rho[i] > 0 else mean_all)
        sigma[i] = max(s, floor, 1e-12)
    w = np.exp(-np.maximum(dist[:, 1:] - rho[:, None], 0.0) / sigma[:, None])
    rows = np.repeat(np.arange(n), n_neighbors - 1)
    P = sparse.csr_matrix((w.ravel(), (rows, idx[:, 1:].ravel())), shape=(n, n))
    Pt = P.T.tocsr()
    G = (P + Pt - P.multiply(Pt)).tocoo()
    G.eliminate_zeros()
    return G, rho, sigma


def fit_ab(spread: float = 1.0, min_dist: float = 0.1) -> tuple[float, float]:
    """Fit the smooth curve 1 / (1 + a d^(2b)) to the min_dist/spread kernel."""
    x = np.linspace(0, spread * 3, 300)
    y = np.where(x < min_dist, 1.0, np.exp(-(x - min_dist) / spread))
    curve = lambda d, a, b: 1.0 / (1.0 + a * d ** (2 * b))
    (a, b), _ = curve_fit(curve, x, y)
    return float(a), float(b)


def spectral_init(G, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Eigenvectors of the normalised graph Laplacian, scaled to [-10, 10].

    Falls back to a uniform random layout when the eigenproblem is
    degenerate (too few points, isolated vertices).
    """
    n = G.shape[0]
    A = np.asarray(G.todense())
    deg = A.sum(axis=1)
    if n <= dim + 1 or np.any(deg <= 0):
        return rng.uniform(-10, 10, size=(n, dim))
    dinv = 1.0 / np.sqrt(deg)
    L = np.eye(n) - dinv[:, None] * A * dinv[None, :]
    try:
        vals, vecs = np.linalg.eigh(L)
    except np.linalg.LinAlgError:
        return rng.uniform(-10, 10, size=(n, dim))
    emb = vecs[:, 1 : dim + 1]
    # eigh leaves each eigenvector's sign arbitrary; pin it for reproducibility
    signs = np.sign(emb[np.argmax(np.abs(emb), axis=0), np.arange(dim)])
    emb = emb * np.where(signs == 0, 1.0, signs)
    scale = np.abs(emb).max()
    if not np.isfinite(scale) or scale == 0:
        return rng.uniform(-10, 10, size=(n, dim))
    emb = 10.0 * emb / scale
    return emb + rng.normal(scale=1e-4, size=emb.shape)


def _clip(g):
    return np.clip(g, -4.0, 4.0)


def _optimize_layout(Y, head, tail, weights, a, b, params: UmapParams, rng):
    n_epochs = params.epochs
    if n_epochs == 0 or head.size == 0:
        return Y
    # edges too weak to be sampled even once are dropped
    keep = weights >= weights.max() / n_epochs
    head, tail, weights = head[keep], tail[keep], weights[keep]
    eps = weights.max() / weights
    eps_neg = eps / params.negative_sample_rate
    next_pos = eps.copy()
    next_neg = eps_neg.copy()
    n = len(Y)
    for epoch in range(n_epochs):
        alpha = params.learning_rate * (1.0 - epoch / n_epochs)
        active = np.flatnonzero(next_pos <= epoch)
        if active.size == 0:
            continue
        i, j = head[active], tail[active]
        diff = Y[i] - Y[j]
        d2 = (diff**2).sum(axis=1)
        coef = np.zeros_like(d2)
        nz = d2 > 0
        coef[nz] = -2.0 * a * b * d2[nz] ** (b - 1.0) / (1.0 + a * d2[nz] ** b)
        g = _clip(coef[:, None] * diff) * alpha
        delta = np.zeros_like(Y)
        np.add.at(delta, i, g)
        np.add.at(delta, j, -g)
        next_pos[active] += eps[active]

        n_neg = ((epoch - next_neg[active]) / eps_neg[active]).astype(np.int64)
        n_neg = np.maximum(n_neg, 0)
        next_neg[active] += n_neg * eps_neg[active]
        src = np.repeat(i, n_neg)
        if src.size:
            other = rng.integers(0, n, size=src.size)
            diff = Y[src] - Y[other]
            d2 = (diff**2).sum(axis=1)
            coef = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2**b))
            g = np.where(d2[:, None] > 0, _clip(coef[:, None] * diff), 0.0)
            g[other == src] = 0.0
            np.add.at(delta, src, g * alpha)
        Y = Y + delta
    return Y


def umap_embed(points: np.ndarray, params: UmapParams | None = None) -> np.ndarray:
    """Embed ``points`` (n, D) into ``params.target_dim`` dimensions, rows kept in order.

    Deterministic for a given ``params.seed``. Requires more points than
    ``n_neighbors``.
    """
    params = params or UmapParams()
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("points must be a 2-D array")
    n = len(X)
    if n <= params.n_neighbors:
        raise ValueError(f"UMAP needs more than n_neighbors={params.n_neighbors} points, got {n}")
    rng = np.random.default_rng(params.seed)
    G, _, _ = fuzzy_graph(X, params.n_neighbors)
    a, b = fit_ab(params.spread, params.min_dist)
    if params.init == "spectral":
        Y = spectral_init(G, params.target_dim, rng)
    else:
        Y = rng.uniform(-10, 10, size=(n, params.target_dim))
    return _optimize_layout(Y, G.row.astype(np.int64), G.col.astype(np.int64), G.data, a, b, params, rng)
