"""Graph referential games: world generation, agents, training and language metrics."""

__version__ = "0.1.0"
