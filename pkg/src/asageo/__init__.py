"""Adaptive semantic aggregation for UAV / satellite cross-view geo-localization."""

from .asa import ASA, PartFeatures, aggregate, asa_forward, compress, compute_attention, kmeans_1d
from .backbone import TokenSet, VisionTransformer
from .config import BackboneConfig, HeadConfig, PartitionSpec, RunConfig, TrainConfig
from .heads import ClassificationModule, HeadOutputs, ce_loss, total_loss, triplet_loss
from .kernels import BACKEND as KERNEL_BACKEND
from .model import GeoLocalizer

__version__ = "0.1.0"
