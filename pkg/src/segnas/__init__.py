"""Latency-aware architecture search, spatial attention and knowledge
distillation for real-time semantic segmentation, at desk scale."""

__version__ = "0.1.0"
