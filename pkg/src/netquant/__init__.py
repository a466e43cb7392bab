"""Attributed-network embedding with learned product-quantisation codes.

The pieces, bottom up:

- ``graph``: graph loading, truncated hop distances, triplet and label-pair sampling
- ``autodiff``: a small reverse-mode tape over 2-D arrays
- ``model`` / ``quantiser``: the embedding encoder and the differentiable quantiser
- ``trainer``: joint optimisation and checkpoints
- ``codestore``: packed codes, lookup tables and top-k retrieval
- ``evalsuite``: link prediction, classification, path prediction and NDCG
"""

__version__ = "0.1.0"
