"""Two-stream (RGB + optical flow) behaviour recognition for camera-trap video."""

__version__ = "0.1.0"
