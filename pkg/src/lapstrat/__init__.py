"""Energy-strategy optimization for hybrid race cars in multi-class traffic."""

__version__ = "0.1.0"
