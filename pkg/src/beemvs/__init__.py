"""Multi-view stereo with per-pixel bee colonies and pixelwise view selection."""

import os

import numba

# Prefer OpenMP/workqueue over TBB unless the user chose a layer: an outdated
# TBB install otherwise warns on every parallel launch.
if "NUMBA_THREADING_LAYER" not in os.environ and "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .ambc import AmbcConfig
from .consistency import ConsistencyConfig
from .fusion import FusionConfig, fuse
from .matching import MatchingConfig
from .pipeline import PipelineConfig, PipelineResult, run_pipeline
from .scene_io import CameraView, DepthNormalMap, FusedPointCloud, SceneDataset, load_dataset
from .view_selection import ViewSelectionConfig

__all__ = [
    "AmbcConfig",
    "CameraView",
    "ConsistencyConfig",
    "DepthNormalMap",
    "FusedPointCloud",
    "FusionConfig",
    "MatchingConfig",
    "PipelineConfig",
    "PipelineResult",
    "SceneDataset",
    "ViewSelectionConfig",
    "fuse",
    "load_dataset",
    "run_pipeline",
]
