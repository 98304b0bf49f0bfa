"""RSNet: a lightweight SAR ship detector on a small numpy autodiff engine."""

__version__ = "0.1.0"
