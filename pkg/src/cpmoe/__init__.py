"""Regime-aware multi-pollutant emission modeling with physics-constrained
transfer and a what-if digital twin."""

__version__ = "0.1.0"
