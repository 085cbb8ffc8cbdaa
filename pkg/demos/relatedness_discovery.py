"""Discover which clients share a task, from data signatures alone.

Forty clients each hold two of ten Gaussian classes; clients 0-7 share one
label pair, 8-15 the next, and so on. The server never sees labels: it gets
k centroids per client, embeds them, and clusters the clients. The printout
shows the thresholded adjacency in dendrogram order (blocks = discovered
groups) and how well the groups match the truth, next to the PCA baseline.

    python demos/relatedness_discovery.py
"""
import numpy as np

from flt import data, nn
from flt.analysis import adjusted_rand_index
from flt.relatedness import run_fcr

seed = 0
means = np.random.default_rng(seed).standard_normal((10, 8)) * 5
ds = data.gen_gaussian_mixture(10, 8, means, 1.0, 200, seed=seed)
clients, truth = data.partition_pathological(ds, 40, 5, 2, seed=seed)
enc = nn.identity_encoder((8,))

graph = run_fcr(clients, enc, k=5, seed=seed)
print(f"discovered {graph.clusters.max() + 1} groups; ARI vs truth = "
      f"{adjusted_rand_index(graph.clusters, truth.assignment):.3f}")
print("thresholded adjacency, clients in dendrogram order:")
for row in graph.reordered().astype(int):
    print("".join("#" if v else "." for v in row))

pca = run_fcr(clients, enc, k=5, seed=seed, baseline="pca", C=5)
print(f"PCA baseline with 5 groups: ARI = {adjusted_rand_index(pca.clusters, truth.assignment):.3f}")
