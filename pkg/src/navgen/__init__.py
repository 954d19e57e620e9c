"""Desk-scale pipeline for generating navigation instructions from egocentric views.

The pipeline forecasts the visual states between an initial observation window
and a goal view, then writes a route instruction grounded in the real and
forecast frames. Worlds, tokenization, losses, the trainable model, reasoning
loops, metrics and dataset tooling all live in their own modules.
"""

__version__ = "0.1.0"
