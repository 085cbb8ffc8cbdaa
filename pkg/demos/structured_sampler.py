"""Label skew across groups plus power-law quantity skew within each group.

Three groups of clients, each owning two digits' worth of samples; inside a
group the m-th client gets about alpha + exp(beta * m^delta) samples, with
beta solved so the group's pool is used exactly. Larger delta = steeper skew.

    python demos/structured_sampler.py
"""
import numpy as np

from flt import data

rng = np.random.default_rng(0)
y = np.repeat(np.arange(6), 500)
ds = data.Dataset(rng.standard_normal((len(y), 4)), y, 6)
labels = [[0, 1], [2, 3], [4, 5]]
membership = [[0, 1, 2, 3], [4, 5, 6, 7, 8], [9, 10, 11]]

for delta in (0.0, 0.5, 1.0, 1.5):
    spec = data.PartitionSpec(mode="structured", M=12, C=3, alpha=20, delta=delta, seed=0)
    clients, truth = data.sample_structured_noniid(ds, spec, labels, membership)
    sizes = [[len(clients[i].train) + len(clients[i].test) for i in grp] for grp in membership]
    print(f"delta={delta:<4} beta(group 0)={data.solve_beta(20, delta, 4, 1000):7.4f}  sizes={sizes}")
