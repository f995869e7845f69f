"""Doubly oracle-efficient reinforcement learning for tabular and linear MDPs."""
