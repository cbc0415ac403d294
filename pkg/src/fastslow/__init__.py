"""Fast and long-term learning for chance-constrained contouring tube MPC."""

__version__ = "0.1.0"
