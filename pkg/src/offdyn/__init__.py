"""Off-dynamics reinforcement learning: shifted environments, transfer agents and evaluation."""

__version__ = "0.1.0"
