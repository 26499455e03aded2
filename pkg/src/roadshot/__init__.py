"""Single-shot road graph extraction on a coarse grid, in pure numpy."""

__version__ = "0.1.0"
