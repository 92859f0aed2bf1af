"""Deform an ellipsoid mesh toward a target shape with cascaded graph convolutions."""
from .autograd import Adam, Tensor, backward, no_grad
from .features import CameraIntrinsics, FeatureExtractor, FeaturePyramid, bilinear_pool, perceptual_pool, project
from .gcn import CascadeModel, ModelConfig, forward_cascade, graph_conv, paper_config, unpool_edge, unpool_face
from .losses import LossWeights, chamfer_loss, edge_length_loss, laplacian_loss, normal_loss, total_loss
from .mesh import Mesh, TargetShape, load_default_ellipsoid, make_ellipsoid, make_uv_ellipsoid
from .metrics import chamfer_distance, emd, evaluate, f_score, hausdorff

__version__ = "0.1.0"
