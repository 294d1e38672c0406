"""Simulator for the z-axis feedback loop of a scanning tunneling microscope.

Covers constant-current and constant-di/dz regulation, the lock-in chain,
closed-loop identification and tuning, imaging and hydrogen depassivation
lithography.
"""

__version__ = "0.1.0"
