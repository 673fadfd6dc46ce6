"""richmap: a deterministic 2D inspection-robot simulator.

The pipeline explores an unknown field with simulated lidar, extracts
candidate pile regions from the occupancy grid, encircles each pile while
localizing ID plates, and maintains a persistent cylinder database alongside
the navigable grid: the rich information map.
"""

__version__ = "0.1.0"
