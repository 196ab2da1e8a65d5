"""LiDAR odometry and mapping with consistency-graph correspondence filtering."""

__version__ = "0.1.0"
