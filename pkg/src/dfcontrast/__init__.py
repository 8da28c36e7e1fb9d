"""Contrastive real/fake embeddings for deepfake detection, at desk scale."""

__version__ = "0.1.0"
