"""Mean-field training dynamics of deep and residual networks at desk scale."""

__version__ = "0.1.0"
