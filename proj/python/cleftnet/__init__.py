"""Synaptic cleft detection: feature and label augmentors, CREMI metrics, I/O."""

from ._core import (
    auc,
    cremi_score,
    distance_transform,
    evaluate,
    infer,
    read_vol1,
    run_cli,
    synthesize,
    tanh_distance_map,
    write_vol1,
)

__all__ = [
    "auc",
    "cremi_score",
    "distance_transform",
    "evaluate",
    "infer",
    "read_vol1",
    "run_cli",
    "synthesize",
    "tanh_distance_map",
    "write_vol1",
]
