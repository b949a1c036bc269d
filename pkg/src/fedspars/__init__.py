"""Energy-aware compressed federated learning: simulator and compression control."""

__version__ = "0.1.0"
