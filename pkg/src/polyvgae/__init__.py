"""Multimodal variational graph autoencoders for drug interaction and response prediction."""

__version__ = "0.1.0"
