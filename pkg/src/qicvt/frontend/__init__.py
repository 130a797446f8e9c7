from .backbone import Backbone, ImageEncoder, downsample_stages, encode_voxels, image_features
from .pointcloud import FeatureVolume, KeypointSet, RawPointCloud, VoxelGridSpec, fps, voxelize
from .roi import RoIPool, pooling_matrix, roi_point_features, roi_pool
from .rpn import Proposal, RPNHead, cell_statistics, decode_boxes, encode_boxes, make_anchors, propose_rois, select_proposals

__all__ = [
    "Backbone", "ImageEncoder", "downsample_stages", "encode_voxels", "image_features",
    "FeatureVolume", "KeypointSet", "RawPointCloud", "VoxelGridSpec", "fps", "voxelize",
    "RoIPool", "pooling_matrix", "roi_point_features", "roi_pool",
    "Proposal", "RPNHead", "cell_statistics", "decode_boxes", "encode_boxes", "make_anchors", "propose_rois", "select_proposals",
]
