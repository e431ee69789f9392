"""Post-hoc figure rendering for manipulator run directories."""

from .render import FigureSpec, SchemaError, render_figures

__all__ = ["FigureSpec", "SchemaError", "render_figures"]
