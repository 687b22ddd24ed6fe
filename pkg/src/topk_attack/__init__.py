"""Top-k adversarial attack laboratory on small dense classifiers."""

__version__ = "0.1.0"
