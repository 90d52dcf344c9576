"""No-reference point cloud quality assessment.

Projects colored point clouds to six-view texture/depth/occupancy images,
extracts a global feature from class-token attention maps of a transformer
encoder, feeds the maps back into a region-aware dynamic convolution branch,
and regresses coarse-to-fine quality scores.
"""

__version__ = "0.1.0"
