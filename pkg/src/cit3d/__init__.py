"""Single-image-to-3D reconstruction toolkit.

Coarse stage: a dense voxel radiance field optimized under reference-view
losses and score-distillation guidance from pluggable noise-prediction
providers. Refine stage: isosurface mesh extraction, Poisson-disk surface
sampling, conflict-free multi-view texture projection, and deferred
point-splat rendering with a small learnable image-space decoder.
"""

__version__ = "0.1.0"
