"""Desk-scale language model lab.

A small transformer with disentangled content/position attention, a
relative-position-aware efficient kernel, an enhanced mask decoder, and
a perturbation-consistency regulariser, all built on a hand-written
reverse-mode tape over numpy float64 arrays.
"""

__version__ = "0.1.0"
