"""Joint image/depth/camera-ray rectified-flow sampling with a pixel-aligned Gaussian decoder."""

__version__ = "0.1.0"
