"""Multi-tenant inference over hierarchical models: precomputed lower layers
(PLOT), shared higher layers with per-task adapters, and a pipelined scheduler."""

__version__ = "0.1.0"
