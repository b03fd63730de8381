from .batch import BatchPipeline, BatchReport, extract_slide, run_batch
from .encoders import (
    EncoderSpec,
    MeanPoolEncoder,
    PatchEncoder,
    ProjectionEncoder,
    StatsEncoder,
    aggregate_patient,
    pool_slide,
    register_external,
    registered_names,
    registry_get,
    unregister_external,
)
from .protocol import ExternalEncoder
from .store import FeatureStore, is_valid_store

__all__ = [
    "BatchPipeline",
    "BatchReport",
    "EncoderSpec",
    "ExternalEncoder",
    "FeatureStore",
    "MeanPoolEncoder",
    "PatchEncoder",
    "ProjectionEncoder",
    "StatsEncoder",
    "aggregate_patient",
    "extract_slide",
    "is_valid_store",
    "pool_slide",
    "register_external",
    "registered_names",
    "registry_get",
    "run_batch",
    "unregister_external",
]
