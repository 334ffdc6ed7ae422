"""Layered 2D Gaussian splatting for sparse-view unbounded-360 reconstruction.

CPU reference implementation: layered surfel scenes, a differentiable
tile-binned rasterizer with hand-derived gradients, bootstrap and fused
training loops, pluggable novel-view generators with uncertainty weighting,
and an evaluation harness.
"""

__version__ = "0.1.0"
