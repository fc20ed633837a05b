"""Multi-agent policy distances, customized distances and dynamic parameter sharing."""

__version__ = "0.1.0"
