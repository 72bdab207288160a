"""Perspective-camera 3D human pose lifting: geometry, losses, flows and trainers."""

__version__ = "0.1.0"
