"""Event-camera spiking person re-identification pipeline."""

__version__ = "0.1.0"

from . import kernels  # noqa: F401  (backend selection happens at import)
