"""Progressive stochastic shape completion on sparse voxel embeddings."""

__version__ = "0.1.0"
