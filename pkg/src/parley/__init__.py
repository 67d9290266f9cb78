"""Multi-party LLM character conversations with adjacency-pair turn-taking."""

__version__ = "0.1.0"
