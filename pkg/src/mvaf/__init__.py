"""Multi-view (BEV, range view, camera) LiDAR-camera fusion detection on numpy.

Submodules are imported on demand so that command-line flags can still
pin BLAS threading before numpy loads.
"""

__version__ = "0.1.0"
