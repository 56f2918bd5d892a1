"""Position-weighted back-pressure signal control on a cell-transmission network model."""

from .network import ConfigError, Network, build_network, emit_config, predecessors, successors

__all__ = ["ConfigError", "Network", "build_network", "emit_config", "predecessors", "successors"]
__version__ = "0.1.0"
