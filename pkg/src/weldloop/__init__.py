"""Closed-loop RL laser power control: int8 policy, SAC twin, weld surrogate, wire protocol."""

__version__ = "0.1.0"
