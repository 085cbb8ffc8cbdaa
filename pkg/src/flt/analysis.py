"""Metrics, bound evaluators and communication accounting."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import comb, erfc, ndtri

__all__ = [
    "accuracy_stats",
    "optimality_gap",
    "q_function",
    "q_inverse",
    "BoundInputs",
    "theorem1_bound",
    "stepsize_window",
    "spectral_norm_gap",
    "theorem2_rhs",
    "Theorem2Result",
    "elaborate_bound",
    "bound_report",
    "comm_cost",
    "BYTES_PER_UNIT",
    "adjusted_rand_index",
    "estimate_smoothness",
]

BYTES_PER_UNIT = 8  # one float64 per communicated parameter


# ---------------------------------------------------------------------------
# accuracy / fairness


def accuracy_stats(per_client) -> tuple[float, float, float]:
    """(mean, standard error, population variance) of per-client accuracies."""
    a = np.asarray(per_client, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no accuracies given")
    if np.any((a < 0) | (a > 1)):
        raise ValueError("accuracies must lie in [0, 1]")
    var = float(a.var())
    return float(a.mean()), float(np.sqrt(var) / np.sqrt(a.size)), var


def optimality_gap(W_t, W_prev) -> float:
    """Squared Frobenius norm of the round-to-round change."""
    W_t, W_prev = np.asarray(W_t, dtype=np.float64), np.asarray(W_prev, dtype=np.float64)
    if W_t.shape != W_prev.shape:
        raise ValueError(f"shape mismatch {W_t.shape} vs {W_prev.shape}")
    d = W_t - W_prev
    return float(np.sum(d * d))


# ---------------------------------------------------------------------------
# Gaussian tail


def q_function(x):
    """Standard normal upper tail, 0.5 * erfc(x / sqrt(2))."""
    return 0.5 * erfc(np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def q_inverse(p, tol: float = 1e-12):
    """Inverse of :func:`q_function` for p in (0, 1).

    Starts from the inverse normal CDF and polishes with Newton steps on
    Q(x) - p, whose derivative is -phi(x).
    """
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr <= 0) | (p_arr >= 1)) or np.any(~np.isfinite(p_arr)):
        raise ValueError("q_inverse needs 0 < p < 1")
    x = -ndtri(p_arr)
    for _ in range(5):
        phi = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
        step = (q_function(x) - p_arr) / np.maximum(phi, 1e-300)
        x = x + step
        if np.all(np.abs(step) < tol):
            break
    return float(x) if np.ndim(x) == 0 else x


# ---------------------------------------------------------------------------
# bounds


@dataclass
class BoundInputs:
    """Inputs of the clustering-error and convergence bounds.

    Unset fields are simply not used; ``phi`` and ``psi`` (gradient
    dissimilarity constants) are recorded but no bound below consumes them.
    """

    # clustering-error bound
    counts: np.ndarray | None = None  # n[m, l]: samples of label l at client m
    p_err: float | None = None  # encoder error probability, 0 < p_err < 1
    latent_dim: int | None = None
    # convergence bound
    eta: float | None = None
    L_W: float | None = None
    A_bar: np.ndarray | None = None
    T: int | None = None
    M: int | None = None
    F_first: float | None = None
    F_last: float | None = None
    # multi-epoch bound
    E: int | None = None
    init_dist_first: float | None = None  # ||W^{1,0} - W^{1,*}||^2
    init_dist_last: float | None = None  # ||W^{T,0} - W^{T,*}||^2
    F_opt_drop: float | None = None  # F(W^{1,*}) - F(W^{T,*})
    phi: float | None = None
    psi: float | None = None

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def theorem1_bound(inputs: BoundInputs) -> float:
    """sum over clients m, labels l and latent coordinates i of exp(-(n_ml * Qinv(p_err))^2 / 2).

    The summand does not depend on i, so the coordinate sum is a factor
    ``latent_dim``. This is an approximate upper bound on clustering error.
    """
    n = np.asarray(inputs.counts, dtype=np.float64)
    if n.ndim != 2:
        raise ValueError("counts must be a (clients, labels) matrix")
    if np.any(n < 0):
        raise ValueError("counts must be non-negative")
    if inputs.latent_dim is None or inputs.latent_dim < 1:
        raise ValueError("latent_dim must be a positive integer")
    qi = q_inverse(inputs.p_err)
    return float(inputs.latent_dim * np.sum(np.exp(-0.5 * (n * qi) ** 2)))


def spectral_norm_gap(A_bar) -> float:
    """||I - A_bar||_2 (largest singular value)."""
    A_bar = np.asarray(A_bar, dtype=np.float64)
    return float(np.linalg.norm(np.eye(len(A_bar)) - A_bar, 2))


def stepsize_window(L_W: float, A_bar) -> tuple[float, float]:
    """Open interval (0, eta_max) of step sizes with a positive bound denominator."""
    if L_W <= 0:
        raise ValueError("L_W must be positive")
    s = spectral_norm_gap(A_bar)
    return 0.0, 2.0 / (L_W + L_W * np.sqrt(1.0 + 4.0 * s * s))


@dataclass
class Theorem2Result:
    value: float  # +inf when vacuous
    denominator: float
    vacuous: bool
    norm_gap: float
    eta_max: float


def theorem2_rhs(inputs: BoundInputs) -> Theorem2Result:
    """(F(W^1) - F(W^T)) / (T M (1/(2 eta) - L/2 - (eta/2) L^2 ||I - A_bar||^2)).

    A non-positive denominator makes the bound vacuous; that is flagged,
    not raised.
    """
    eta, L = inputs.eta, inputs.L_W
    if eta is None or eta <= 0 or L is None or L <= 0:
        raise ValueError("eta and L_W must be positive")
    s = spectral_norm_gap(inputs.A_bar)
    den = 1.0 / (2 * eta) - L / 2.0 - 0.5 * eta * L * L * s * s
    eta_max = stepsize_window(L, inputs.A_bar)[1]
    if den <= 0:
        return Theorem2Result(float("inf"), den, True, s, eta_max)
    val = (inputs.F_first - inputs.F_last) / (inputs.T * inputs.M * den)
    return Theorem2Result(float(val), den, False, s, eta_max)


def elaborate_bound(inputs: BoundInputs) -> Theorem2Result:
    """Convergence bound with E local epochs per round::

        ( ||W^{1,0} - W^{1,*}||^2 + ||W^{t,0} - W^{t,*}||^2 + 2 eta E (F(W^{1,*}) - F(W^{T,*})) )
        / ( 2 eta E T M (1/(2 eta) - L/2 - (eta/2) L^2 ||I - A_bar||^2) )
    """
    eta, L = inputs.eta, inputs.L_W
    if eta is None or eta <= 0 or L is None or L <= 0:
        raise ValueError("eta and L_W must be positive")
    if inputs.E is None or inputs.E < 1:
        raise ValueError("E must be >= 1")
    s = spectral_norm_gap(inputs.A_bar)
    den = 1.0 / (2 * eta) - L / 2.0 - 0.5 * eta * L * L * s * s
    eta_max = stepsize_window(L, inputs.A_bar)[1]
    if den <= 0:
        return Theorem2Result(float("inf"), den, True, s, eta_max)
    E = inputs.E
    num = inputs.init_dist_first + inputs.init_dist_last + 2 * eta * E * inputs.F_opt_drop
    return Theorem2Result(float(num / (2 * eta * E * inputs.T * inputs.M * den)), den, False, s, eta_max)


def bound_report(inputs: BoundInputs, path=None) -> dict:
    """Evaluate every bound the inputs allow; echo inputs; optionally write JSON."""
    out: dict = {"inputs": inputs.to_dict(), "outputs": {}}
    if inputs.counts is not None and inputs.p_err is not None and inputs.latent_dim:
        out["outputs"]["clustering_error_bound"] = theorem1_bound(inputs)
    if inputs.eta is not None and inputs.A_bar is not None and inputs.F_first is not None:
        r = theorem2_rhs(inputs)
        out["outputs"]["convergence_bound"] = {
            "value": None if r.vacuous else r.value, "denominator": r.denominator,
            "vacuous": r.vacuous, "norm_I_minus_A_bar": r.norm_gap, "eta_max": r.eta_max,
        }
    if inputs.E is not None and inputs.F_opt_drop is not None:
        r = elaborate_bound(inputs)
        out["outputs"]["multi_epoch_bound"] = {
            "value": None if r.vacuous else r.value, "denominator": r.denominator, "vacuous": r.vacuous,
        }
    if path is not None:
        Path(path).write_text(json.dumps(out, indent=1))
    return out


# ---------------------------------------------------------------------------
# communication


def comm_cost(method: str, M, W_local, T, rho, W_enc=0, k=0, e=0, C=0):
    """Total communicated parameters (units); multiply by BYTES_PER_UNIT for bytes.

    flt    = M W_enc + k M e + 2 rho M W_local T
    fedsem = 2 rho M W_local T
    ifca   = rho M W_local T (C + 1)

    Pure arithmetic, so exact rationals / symbols pass through unchanged.
    """
    rounds = 2 * rho * M * W_local * T
    if method == "flt":
        return M * W_enc + k * M * e + rounds
    if method == "fedsem":
        return rounds
    if method == "ifca":
        return rho * M * W_local * T * (C + 1)
    raise ValueError(f"unknown method {method!r}; expected flt, fedsem or ifca")


# ---------------------------------------------------------------------------
# clustering agreement


def _canonical(labels) -> np.ndarray:
    """Relabel by order of first appearance."""
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inv]


def adjusted_rand_index(assignment, ground_truth) -> float:
    a, b = np.asarray(assignment), np.asarray(ground_truth)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("assignments must be 1-D and of equal length")
    n = a.size
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    index = comb(table, 2).sum()
    sa, sb = comb(table.sum(1), 2).sum(), comb(table.sum(0), 2).sum()
    expected = sa * sb / comb(n, 2)
    maximum = 0.5 * (sa + sb)
    if maximum == expected:
        # degenerate: both partitions all-singletons or both one block
        return 1.0 if _canonical(ai).tolist() == _canonical(bi).tolist() else 0.0
    return float((index - expected) / (maximum - expected))


# ---------------------------------------------------------------------------
# smoothness


def estimate_smoothness(model_or_grad, data=None, trials: int = 10, seed=0, radius: float = 1.0,
                        refine: int = 20, loss: str = "cross_entropy", w0=None) -> float:
    """Empirical lower estimate of the gradient Lipschitz constant L_W.

    Parameters
    ----------
    model_or_grad : Model or callable
        A :class:`flt.nn.Model` evaluated on ``data`` (``(X, y)``, Dataset
        or ClientDataset), or a callable ``grad(w) -> array``, in which case
        ``w0`` gives the dimension and the centre of the sampled points.
    trials : int
        Number of random base points.

    Returns
    -------
    float
        max over sampled pairs of ||grad(w1) - grad(w2)|| / ||w1 - w2||.
        Each trial refines its direction by power iteration on gradient
        differences; the running maximum never decreases with more trials.
    """
    from . import nn

    if trials < 1:
        raise ValueError("trials must be >= 1")
    if isinstance(model_or_grad, nn.Model):
        model = model_or_grad
        x, y = nn._arrays(data)
        center = nn.flatten_params(model)

        def grad(w):
            return nn.loss_and_gradient(nn.unflatten_params(model, w), x, y, loss)[1]
    else:
        if w0 is None:
            raise ValueError("a gradient callable needs w0")
        grad = model_or_grad
        center = np.asarray(w0, dtype=np.float64).ravel()

    rng = np.random.default_rng(seed)
    h = 1e-3 * radius
    best = 0.0
    for _ in range(trials):
        base = center + rng.standard_normal(center.size) * radius
        g0 = np.asarray(grad(base), dtype=np.float64)
        v = rng.standard_normal(center.size)
        v /= np.linalg.norm(v)
        for _ in range(max(refine, 1)):
            diff = np.asarray(grad(base + h * v), dtype=np.float64) - g0
            nrm = float(np.linalg.norm(diff))
            best = max(best, nrm / h)
            if nrm == 0:
                break
            v = diff / nrm
    return best
