"""Neural ranking supermartingale certificates for stochastic control systems."""

__version__ = "0.1.0"
