"""Deterministic single-hop scheduled wireless link simulator.

Models a base station and mobile joined by a broadcast medium, an
optional relaying adversary between them, clock synchronization built on
timestamp exchange, and the active probing tests that expose each class
of adversary.
"""

__version__ = "0.1.0"
