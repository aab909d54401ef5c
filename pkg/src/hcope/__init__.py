"""High-confidence off-policy evaluation with bootstrapped lower bounds."""

__version__ = "0.1.0"
