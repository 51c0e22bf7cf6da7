"""Trust-region-free policy optimization with PG/PPO/TRPO baselines and an exact tabular MDP checker."""

__version__ = "0.1.0"
