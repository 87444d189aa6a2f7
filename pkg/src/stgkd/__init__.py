"""Two-branch spatio-temporal graph captioning with object-aware distillation."""

__version__ = "0.1.0"
