"""Two-axis characterization of agent-based-model output."""

__version__ = "0.1.0"
