"""Microscopic signalized-intersection simulator with joint RL control of
traffic-light phases and per-lane vehicle speed advice."""

__version__ = "0.1.0"
