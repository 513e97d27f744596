"""Simulation, identification and control of a small Ackermann-steered vehicle fleet."""

__version__ = "0.3.0"
