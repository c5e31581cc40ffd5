"""Carbon-aware multi-objective resource allocation for downlink networks."""

__version__ = "0.1.0"
