"""tracklift: cameras and time-varying low-rank point clouds from 2D point tracks."""

__version__ = "0.1.0"
