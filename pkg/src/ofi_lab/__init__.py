"""Order flow imbalance forecasting with multivariate Hawkes processes."""

__version__ = "0.1.0"
