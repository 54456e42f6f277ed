"""Hybrid model error correction for chaotic dynamics.

Offline learning: cycled strong-constraint 4D-Var produces analysis
snapshots, convolutional correction networks are trained on them and
evaluated in forecast and assimilation experiments.  Online learning:
a weak-constraint 4D-Var variant estimates model state and network
parameters jointly as observation windows arrive.
"""

__version__ = "0.1.0"
