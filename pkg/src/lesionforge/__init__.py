"""lesionforge: synthetic longitudinal lesion datasets and segmentation metrics.

A library and CLI for generating fully synthetic longitudinal training data
for lesion segmentation (stochastic lesion-evolution masks plus
domain-randomized synthetic scans) and for evaluating segmentations with
voxel, lesion-wise, surface-distance and statistical tooling. Inference
plumbing for two-channel (scan + prior mask) predictors is included; the
predictor itself is abstract.
"""

__version__ = "0.1.0"
