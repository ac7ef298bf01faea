"""Geometry-guided facial expression removal, synthesis and transfer.

Subpackages and modules:

- ``autodiff``: reverse-mode automatic differentiation on float64 numpy arrays
- ``shape_model``: PCA landmark shape model
- ``heatmap``: Gaussian landmark heatmaps used as conditioning
- ``networks``: U-Net generators, PatchGAN discriminators, identity net
- ``training``: losses, alternating updates, checkpointing
- ``pipeline``: inference procedures and evaluation metrics
- ``data``: procedural synthetic faces and dataset I/O
- ``cli``: command-line entry points
"""

__version__ = "0.1.0"
