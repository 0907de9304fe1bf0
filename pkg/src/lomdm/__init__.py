"""Order-expressive masked diffusion with learnable per-position schedulers."""

__version__ = "0.1.0"
