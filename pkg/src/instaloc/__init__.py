"""Instance-based global localization for indoor lidar scans."""
from .geometry import Pose, PointCloud, compose, rotation_angle_between, transform_cloud
from .labels import NUM_CLASSES, SemanticClass
from .segmentation import ObjectInstance, SegmentationParams, segment_instances
from .simulator import LidarConfig, LabeledScan, Scene, generate_scene, raycast_scan
from .descriptor import EmbeddingModel, GeometricEngine, LearnedEngine, load_engine, train
from .mapdb import InstanceMap, build_map, load_map, save_map
from .matching import MatchParams, LocalizationResult, localize

__version__ = "0.1.0"
