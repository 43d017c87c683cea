"""Deterministic PoS fee-market chain simulator hosting a two-phase service
marketplace, with latency statistics over the resulting transaction records."""

__version__ = "0.1.0"
