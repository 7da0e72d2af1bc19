"""Neural news recommendation: encoders, training, fast evaluation and analysis."""

__version__ = "0.1.0"
