"""Multi-class 3D object detection for volumetric baggage CT."""

__version__ = "0.1.0"
