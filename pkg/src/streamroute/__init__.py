"""streamroute: dynamic-routing streaming perception at desk scale."""

__version__ = "0.1.0"
