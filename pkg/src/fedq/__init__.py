"""Federated mixture training with learned environment selection.

The package simulates a fleet of edge environments that jointly train a
small mixture of neural classifiers without sharing raw data. A
Q-learning agent, observing a PCA-compressed view of the global model
parameters, decides which environments participate in each communication
round. Baseline strategies (random selection, full participation, a
single shared model, purely local training) share the same machinery so
their outcomes are directly comparable.
"""

from .data import (
    Dataset,
    EnvironmentShard,
    PartitionConfig,
    SynthSpec,
    audit_shards,
    cluster_dataset,
    load_dataset,
    partition_mixture,
    synth_mixture,
)
from .dqn import DqnConfig, QNetwork, ReplayBuffer, Transition
from .fedem import ComponentSet
from .mlp import LearnerConfig, MlpParameters
from .orchestrator import RoundMetrics, RunConfig, RunResult, compare, evaluate, run
from .pca import PcaProjection, build_state, fit_pca, project

__version__ = "0.1.0"

__all__ = [
    "ComponentSet",
    "Dataset",
    "DqnConfig",
    "EnvironmentShard",
    "LearnerConfig",
    "MlpParameters",
    "PartitionConfig",
    "PcaProjection",
    "QNetwork",
    "ReplayBuffer",
    "RoundMetrics",
    "RunConfig",
    "RunResult",
    "SynthSpec",
    "Transition",
    "audit_shards",
    "build_state",
    "cluster_dataset",
    "compare",
    "evaluate",
    "fit_pca",
    "load_dataset",
    "partition_mixture",
    "project",
    "run",
    "synth_mixture",
]
