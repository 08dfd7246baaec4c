"""covplan: hierarchical DP planning and fleet simulation for active state estimation."""

__version__ = "0.1.0"
