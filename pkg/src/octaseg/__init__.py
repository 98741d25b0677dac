"""3D-to-2D projection-network segmentation for OCTA-like volumes."""

__version__ = "0.1.0"
