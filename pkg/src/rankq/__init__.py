"""Offline-to-online RL lab comparing TD, CQL, Cal-QL and RankQ critic objectives."""

__version__ = "0.1.0"
