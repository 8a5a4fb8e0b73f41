"""Joint recursive monocular filtering of camera motion and disparity."""

__version__ = "0.1.0"
