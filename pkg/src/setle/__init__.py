"""Structurally enriched trajectory graphs, a dual-view SET encoder, memory retrieval and a DQN agent."""

__version__ = "0.1.0"
