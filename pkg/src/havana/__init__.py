"""Self-supervised contrastive pre-training for point-cloud segmentation."""

from .cloud import PointCloud, grid_subsample, load_cloud, save_cloud
from .errors import HavanaError

__version__ = "0.1.0"

__all__ = ["PointCloud", "grid_subsample", "load_cloud", "save_cloud", "HavanaError", "__version__"]
