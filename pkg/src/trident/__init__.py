"""Self-supervised pretraining with privileged information (TriDeNT)."""

__version__ = "0.1.0"
