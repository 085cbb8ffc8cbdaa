"""Round-based federated training with relatedness-weighted aggregation.

The server state is a parameter matrix ``W`` of shape (d, M): column m is
the model the server holds for client m (the one it sends when m is
selected, and the one evaluated on m's data). One round:

1. sample participants S,
2. each participant trains locally from its column, giving ``W_bar``,
3. the server aggregates the participants' models into new columns.

Aggregation only mixes models trained this round. A column whose client
has no participating neighbour (or cluster mate) is left as it was.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import nn
from .analysis import BYTES_PER_UNIT, accuracy_stats, adjusted_rand_index, optimality_gap
from .relatedness import RelatednessGraph, row_normalize
from .umap import UmapParams

__all__ = [
    "METHODS",
    "DynamicConfig",
    "FederationConfig",
    "ChangeFlags",
    "RoundMetrics",
    "FederationResult",
    "select_clients",
    "row_normalize",
    "aggregate_full",
    "aggregate_full_literal",
    "aggregate_clustered",
    "aggregate_clustered_literal",
    "aggregate_fedavg",
    "dynamic_recluster_check",
    "client_rng",
    "run_federation",
    "metrics_csv",
    "write_metrics_csv",
]

METHODS = ("fedavg", "flt_full", "flt_clustered", "local")
_SELECT_STREAM = 0x5E1EC7


@dataclass
class DynamicConfig:
    lam: float  # re-cluster when more than lam clients flag a change
    tau: int = 0  # ... or every tau rounds (0 disables the periodic trigger)


@dataclass
class FederationConfig:
    method: str = "flt_full"
    T: int = 100
    rho: float = 0.2
    E: int = 5
    batch_size: int = 10
    lr: float = 0.01
    gamma: float = 1.0
    k: int = 5
    umap: UmapParams = field(default_factory=UmapParams)
    dynamic: DynamicConfig | None = None
    normalization: str = "row_stochastic"  # or "literal"
    loss: str = "cross_entropy"
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.E < 0:
            raise ValueError("E must be >= 0")
        if self.normalization not in ("row_stochastic", "literal"):
            raise ValueError("normalization must be 'row_stochastic' or 'literal'")
        if isinstance(self.umap, dict):
            self.umap = UmapParams(**self.umap)
        if isinstance(self.dynamic, dict):
            self.dynamic = DynamicConfig(**self.dynamic)


@dataclass
class ChangeFlags:
    delta: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.int64)
        if np.any((self.delta != 0) & (self.delta != 1)):
            raise ValueError("change flags must be 0 or 1")

    @classmethod
    def zeros(cls, M: int) -> "ChangeFlags":
        return cls(np.zeros(M, dtype=np.int64))


@dataclass
class RoundMetrics:
    round: int
    method: str
    mean_train_acc: float
    mean_test_acc: float
    test_acc_stderr: float
    test_acc_variance: float
    optimality_gap: float
    comm_units_cumulative: float
    comm_bytes_cumulative: float
    ari: float | None = None
    reclustered: bool = False


@dataclass
class FederationResult:
    history: list
    W: np.ndarray
    graph: RelatednessGraph | None = None
    trajectory: list | None = None  # W after every round, when requested
    per_client_test_acc: np.ndarray | None = None
    W_first: np.ndarray | None = None  # W after round 1


# ---------------------------------------------------------------------------
# selection / aggregation


def select_clients(M: int, rho: float, rng) -> np.ndarray:
    """Sorted uniform sample of round(rho * M) distinct clients (at least one)."""
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    size = max(1, int(np.floor(rho * M + 0.5)))
    if size >= M:
        return np.arange(M)
    return np.sort(rng.choice(M, size=size, replace=False))


def _mask(M, participants):
    if participants is None:
        return np.ones(M, dtype=bool)
    participants = np.asarray(participants)
    if participants.dtype == bool:
        if participants.shape != (M,):
            raise ValueError(f"participant mask must have length {M}")
        return participants.copy()
    m = np.zeros(M, dtype=bool)
    m[participants.astype(np.int64)] = True
    return m


def _apply_weights(W_bar: np.ndarray, B: np.ndarray, keep: np.ndarray) -> np.ndarray:
    out = W_bar @ B.T
    out[:, keep] = W_bar[:, keep]
    return out


def aggregate_full(W_bar: np.ndarray, A_bar: np.ndarray, participants=None) -> np.ndarray:
    """New column i = sum_j A_bar[i, j] w_bar_j, renormalised over the participants.

    With every client participating this is exactly ``W_bar @ A_bar.T``.
    Columns whose row has no participating neighbour keep their value.
    """
    W_bar = np.asarray(W_bar, dtype=np.float64)
    A_bar = np.asarray(A_bar, dtype=np.float64)
    M = W_bar.shape[1]
    if A_bar.shape != (M, M):
        raise ValueError(f"A_bar {A_bar.shape} does not match {M} parameter columns")
    mask = _mask(M, participants)
    B = A_bar * mask[None, :]
    s = B.sum(axis=1)
    keep = s <= 0
    B = B / np.where(keep, 1.0, s)[:, None]
    return _apply_weights(W_bar, B, keep)


def aggregate_full_literal(W_bar: np.ndarray, A_tilde: np.ndarray, p) -> np.ndarray:
    """W_bar A_tilde diag(p_m / ||A_tilde_m||_0): the unnormalised form, for comparison only."""
    W_bar = np.asarray(W_bar, dtype=np.float64)
    At = np.asarray(A_tilde, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    deg = (At != 0).sum(axis=0)
    return W_bar @ At @ np.diag(p / deg)


def aggregate_clustered(W_bar: np.ndarray, clusters, p, participants=None) -> np.ndarray:
    """Per cluster, the p-weighted mean of participating members, copied to every member."""
    W_bar = np.asarray(W_bar, dtype=np.float64)
    M = W_bar.shape[1]
    clusters = np.asarray(clusters)
    if clusters.shape != (M,) or np.any(clusters < 0):
        raise ValueError("every client needs a cluster id")
    p = np.asarray(p, dtype=np.float64)
    same = clusters[:, None] == clusters[None, :]
    return aggregate_full(W_bar, same * p[None, :], participants)


def aggregate_clustered_literal(W_bar: np.ndarray, clusters, p) -> np.ndarray:
    """(1 / |C_c|) sum_{m in C_c} p_m w_bar_m for every member: unnormalised form."""
    W_bar = np.asarray(W_bar, dtype=np.float64)
    clusters = np.asarray(clusters)
    p = np.asarray(p, dtype=np.float64)
    out = np.empty_like(W_bar)
    for c in np.unique(clusters):
        members = clusters == c
        out[:, members] = ((W_bar[:, members] * p[members]).sum(axis=1) / members.sum())[:, None]
    return out


def aggregate_fedavg(W_bar: np.ndarray, p, participants=None) -> np.ndarray:
    """Data-weighted mean of the participants, assigned to every column."""
    M = W_bar.shape[1]
    return aggregate_full(W_bar, np.ones((M, M)) * np.asarray(p, dtype=np.float64)[None, :], participants)


def dynamic_recluster_check(flags: ChangeFlags, lam: float, tau: int, t: int) -> bool:
    """True when more than ``lam`` clients flagged a change, or t is a multiple of tau (tau > 0)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    delta = flags.delta if isinstance(flags, ChangeFlags) else np.asarray(flags)
    return bool(delta.sum() > lam or (tau > 0 and t % tau == 0))


def client_rng(seed: int, client_id: int, round_: int) -> np.random.Generator:
    return np.random.default_rng([seed, client_id, round_])


# ---------------------------------------------------------------------------
# orchestration


def _accuracy(model: nn.Model, data) -> float:
    if len(data) == 0:
        return float("nan")
    pred = nn.forward(model, data.X).argmax(axis=1)
    return float(np.mean(pred == data.y))


def _evaluate(template, W, clients):
    train, test = [], []
    for i, c in enumerate(clients):
        m = nn.unflatten_params(template, W[:, i])
        train.append(_accuracy(m, c.train))
        test.append(_accuracy(m, c.test))
    return np.array(train), np.array(test)


def _stats(acc):
    acc = acc[np.isfinite(acc)]
    return accuracy_stats(acc) if acc.size else (float("nan"),) * 3


def run_federation(
    config: FederationConfig,
    clients: Sequence,
    graph: RelatednessGraph | None,
    model_template: nn.Model,
    seed: int = 0,
    ground_truth=None,
    setup_comm_units: float = 0.0,
    drift: dict | None = None,
    recluster: Callable | None = None,
    keep_trajectory: bool = False,
    on_round: Callable | None = None,
) -> FederationResult:
    """Run ``config.T`` rounds and return per-round metrics and the final W.

    Parameters
    ----------
    graph : RelatednessGraph
        Required for ``flt_full`` and ``flt_clustered``; ignored otherwise.
    ground_truth : array-like or dict, optional
        True cluster of each client; adds an ARI column for flt methods.
        Under drift pass ``{round: assignment}``, each in force from that
        round on (round 1 required).
    setup_comm_units : float
        One-off traffic (encoder broadcast + signatures) counted before round 1.
    drift : dict, optional
        ``{round: {client_id: ClientDataset}}``: the client's data is
        replaced at the start of that round and its change flag raised.
    recluster : callable, optional
        ``recluster(clients, t) -> (RelatednessGraph, comm_units)``; invoked
        when the dynamic trigger fires after round t.
    """
    method = config.method
    M = len(clients)
    clients = list(clients)
    if method.startswith("flt"):
        if graph is None:
            raise ValueError(f"method {method} needs a relatedness graph")
        if graph.M != M:
            raise ValueError(f"graph has {graph.M} clients, partition has {M}")
        if method == "flt_clustered" and graph.clusters is None:
            raise ValueError("flt_clustered needs cluster assignments in the graph")
    p = np.array([c.p for c in clients], dtype=np.float64)
    w0 = nn.flatten_params(model_template)
    W = np.repeat(w0[:, None], M, axis=1)
    flags = ChangeFlags.zeros(M)
    comm = float(setup_comm_units)
    history, trajectory = [], []
    W_first = None
    d = w0.size

    truth_at = ground_truth if isinstance(ground_truth, dict) else {1: ground_truth}
    truth = truth_at.get(1)

    def ari_of(g):
        if truth is None or g is None or g.clusters is None or not method.startswith("flt"):
            return None
        return adjusted_rand_index(g.clusters, truth)

    ari = ari_of(graph)
    for t in range(1, config.T + 1):
        if t > 1 and t in truth_at:
            truth = truth_at[t]
            ari = ari_of(graph)
        for cid, new_data in (drift or {}).get(t, {}).items():
            clients[cid] = new_data
            flags.delta[cid] = 1
        S = select_clients(M, config.rho, np.random.default_rng([seed, t, _SELECT_STREAM]))

        def train_one(i):
            model = nn.unflatten_params(model_template, W[:, i])
            trained = nn.train_local(model, clients[i], epochs=config.E, batch_size=config.batch_size,
                                     lr=config.lr, rng=client_rng(seed, i, t), loss=config.loss)
            return nn.flatten_params(trained)

        if config.workers > 1 and len(S) > 1:
            with ThreadPoolExecutor(config.workers) as pool:
                trained = list(pool.map(train_one, S))
        else:
            trained = [train_one(i) for i in S]
        W_bar = W.copy()
        for i, w in zip(S, trained):
            W_bar[:, i] = w

        if method == "local":
            W_new = W_bar
        elif method == "fedavg":
            W_new = aggregate_fedavg(W_bar, p, S)
        elif config.normalization == "literal":
            if method == "flt_full":
                W_new = aggregate_full_literal(W_bar, graph.A_tilde, p)
            else:
                W_new = aggregate_clustered_literal(W_bar, graph.clusters, p)
        elif method == "flt_full":
            W_new = aggregate_full(W_bar, graph.A_bar, S)
        else:
            W_new = aggregate_clustered(W_bar, graph.clusters, p, S)

        if not np.all(np.isfinite(W_new)):
            raise nn.NonFiniteError(f"round {t}: aggregated parameters are not finite")
        gap = optimality_gap(W_new, W)
        W = W_new
        if t == 1:
            W_first = W.copy()
        comm += 2.0 * len(S) * d

        reclustered = False
        if config.dynamic is not None and method.startswith("flt") and recluster is not None:
            if dynamic_recluster_check(flags, config.dynamic.lam, config.dynamic.tau, t):
                graph, units = recluster(clients, t)
                comm += units
                flags = ChangeFlags.zeros(M)
                reclustered = True
                ari = ari_of(graph)

        train_acc, test_acc = _evaluate(model_template, W, clients)
        mean_test, stderr, var = _stats(test_acc)
        rm = RoundMetrics(t, method, _stats(train_acc)[0], mean_test, stderr, var, gap, comm,
                          comm * BYTES_PER_UNIT, ari, reclustered)
        history.append(rm)
        if keep_trajectory:
            trajectory.append(W.copy())
        if on_round is not None:
            on_round(rm)
    return FederationResult(history, W, graph, trajectory if keep_trajectory else None, test_acc, W_first)


# ---------------------------------------------------------------------------
# CSV


CSV_COLUMNS = [f.name for f in fields(RoundMetrics)]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(history: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rm in history:
        row = asdict(rm)
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_metrics_csv(history: Sequence[RoundMetrics], path) -> None:
    with open(path, "w", newline="") as f:
        f.write(metrics_csv(history))
