"""Homography-based image trajectory planning for uncalibrated visual servoing."""

__version__ = "0.1.0"
