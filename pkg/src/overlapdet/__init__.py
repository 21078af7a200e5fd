"""Category-specific assignment, look-forward box refinement, and assignment-stability metrics on a synthetic overlapping-object benchmark."""
__version__ = "0.1.0"
