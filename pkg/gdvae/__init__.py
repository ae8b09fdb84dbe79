"""gdvae - Graph-driven variational autoencoders for heterogeneous multi-task learning.

A shared GCN encoder over an admission graph feeds a biterm topic model, a procedure
recommender and an admission-type classifier, trained jointly.
"""

__version__ = "0.1.0"
