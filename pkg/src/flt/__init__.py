"""Federated learning with a learned client-relatedness graph.

Submodules
----------
nn           numpy neural-network engine (layers, SGD, autoencoders, checkpoints)
data         datasets, IDX loading, non-IID partitioners
umap         exact-kNN UMAP used on the server
relatedness  signatures, adjacency, Ward clustering, PCA baseline
federation   selection, aggregation, training rounds
analysis     metrics, bound evaluators, communication accounting
config       scenario files and their validation
experiment   end-to-end runs and comparison reports
"""
__version__ = "0.1.0"
