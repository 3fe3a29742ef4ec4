"""Stochastic reduce over sparse communication graphs with NOTIFY-ACK, BSP and async synchronization."""

__version__ = "0.1.0"
