"""Dynamic multimodal information bottleneck fusion for vector-valued modalities."""

__version__ = "0.1.0"
