"""Two-tower ranking with entire-space domain adaptation for long-tail items."""

__version__ = "0.1.0"
