"""Desk-scale closed-loop driving world model.

A token policy predicts control signals from interleaved vision-action
sequences, a small pixel-space diffusion model generates future frames
conditioned on history and a motion prompt, and a rollout engine chains
the two so the system drives inside frames it generated itself.
Everything trains from scratch on a bundled synthetic track environment.
"""

__version__ = "0.1.0"


class WorldloopError(Exception):
    """Base class for errors raised by this package."""
