"""Noise filtering for airborne multiple-pulses-in-air LiDAR.

Synthetic scene simulation, range-ambiguity priors, voxelization, a
dual-attention 3D encoder-decoder with hand-written gradients, voxel
post-processing and noise-class evaluation.
"""

__version__ = "0.1.0"
