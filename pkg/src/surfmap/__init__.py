"""Surface-aware model-based driving: latent surface maps, probabilistic dynamics ensembles, iCEM control."""
__version__ = "0.1.0"
