"""Cycle-consistent virtual trajectories for RL representation learning,
on a from-scratch autodiff core."""

__version__ = "0.1.0"
