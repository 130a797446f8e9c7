"""Desk-scale LiDAR-camera fusion: reversible global attention, sparse mixture-of-experts
local fusion, a dense voxel front end and heading-weighted detection metrics."""

__version__ = "0.1.0"
