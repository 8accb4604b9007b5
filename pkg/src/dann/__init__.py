"""Domain-adversarial training for cross-domain utterance classification."""

__version__ = "0.1.0"
