"""Figure rendering for lorafusion experiment outputs."""

from .render import FigureJob, InputError, render

__all__ = ["FigureJob", "InputError", "render"]
__version__ = "0.1.0"
