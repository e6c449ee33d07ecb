"""Knowledge-graph diffusion recommender."""

__version__ = "0.1.0"
