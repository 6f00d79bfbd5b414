"""Figure rendering for qttt benchmark metrics CSVs."""

from .figures import FIGURE_KINDS, PlotSpec, render

__version__ = "0.1.0"

__all__ = ["FIGURE_KINDS", "PlotSpec", "render"]
