"""Volume-centred range bar pattern research toolkit."""

__version__ = "0.1.0"
