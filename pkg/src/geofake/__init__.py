"""Real-vs-generated satellite tile classification with saliency explanations.

Modules: :mod:`~geofake.ingest` (manifests and splits), :mod:`~geofake.fixtures`
(procedural tiles with planted artifacts), :mod:`~geofake.transforms`,
:mod:`~geofake.models`, :mod:`~geofake.trainer`, :mod:`~geofake.metrics`,
:mod:`~geofake.explain`, :mod:`~geofake.report` and the :mod:`~geofake.cli`.
"""
from .estimator import ForgeryDetector
from .fixtures import FixtureSpec, build_fixture
from .ingest import DatasetManifest, SplitRatios, assign_splits, scan_tree
from .models import ModelSpec, build
from .trainer import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest", "FixtureSpec", "ForgeryDetector", "ModelSpec", "SplitRatios", "TrainConfig",
    "assign_splits", "build", "build_fixture", "fit", "scan_tree",
]
