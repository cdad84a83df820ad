"""Point cloud anomaly detection by predicting per-point offsets."""

from .norm_as import generate_pseudo_anomaly, generate_random_direction_anomaly, partition_patches
from .offset_net import OffsetNet, TrainConfig, export_attention, forward, loss_and_grad, train
from .pointcloud import PointCloud, estimate_normals, load_cloud, normalize
from .scoring import auc_pr, auc_roc, evaluate, mean_rank, object_score, point_scores
from .voxel import cloud_features, extract_features, voxelize

__version__ = "0.1.0"
