"""partsmith: part-level sub-concept discovery, token learning, and
compositional generation with desk-scale verification."""

__version__ = "0.1.0"
