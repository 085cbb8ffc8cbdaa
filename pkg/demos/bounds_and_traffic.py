"""The analytical side: clustering-error bound, convergence bound, traffic.

1. How fast the clustering-error bound falls as clients hold more samples.
2. On quadratic clients, the measured average optimality gap sits below the
   convergence bound for every step size in the admissible window, and the
   bound turns vacuous just past it.
3. Traffic of one-shot discovery + relatedness averaging vs IFCA-style
   per-round cluster broadcasting.

    python demos/bounds_and_traffic.py
"""
import numpy as np

from flt.analysis import BoundInputs, comm_cost, stepsize_window, theorem1_bound, theorem2_rhs

print("clustering-error bound, 20 clients x 10 labels, e=128, p_err=0.2")
for n in (1, 2, 5, 10, 20):
    b = theorem1_bound(BoundInputs(counts=np.full((20, 10), n), p_err=0.2, latent_dim=128))
    print(f"  {n:>3} samples per label: {b:.3e}")

rng = np.random.default_rng(1)
M, d, T = 6, 3, 30
lam, c = rng.uniform(0.5, 2.0, M), rng.standard_normal((M, d))
A_bar = np.kron(np.eye(2), np.full((3, 3), 1 / 3))
F = lambda W: 0.5 * np.sum(lam[:, None] * (W - c) ** 2)
eta_max = stepsize_window(lam.max(), A_bar)[1]
print(f"\nconvergence bound on quadratic clients (eta_max = {eta_max:.3f})")
for frac in (0.25, 0.5, 0.9, 1.05):
    eta = frac * eta_max
    W = A_bar @ (10 * rng.standard_normal((M, d)))
    W1, G = W.copy(), 0.0
    for _ in range(2, T + 1):
        W_next = A_bar @ (W - eta * lam[:, None] * (W - c))
        G, W = G + np.sum((W_next - W) ** 2), W_next
    res = theorem2_rhs(BoundInputs(eta=eta, L_W=lam.max(), A_bar=A_bar, T=T, M=M, F_first=F(W1), F_last=F(W)))
    bound = "vacuous" if res.vacuous else f"{res.value:.4f}"
    print(f"  eta = {frac:.2f} eta_max: measured {G / (T * M):.4f}  bound {bound}")

print("\ncommunicated parameters, M=100, 169,462-parameter MLP, T=100, rho=0.2")
flt = comm_cost("flt", M=100, W_local=169_462, T=100, rho=0.2, W_enc=51_577, k=5, e=128)
ifca = comm_cost("ifca", M=100, W_local=169_462, T=100, rho=0.2, C=5)
print(f"  relatedness averaging: {flt:,.0f}   IFCA (C=5): {ifca:,.0f}")
