"""roll: long-term LiDAR localization on a keyframe map."""

__version__ = "0.1.0"
