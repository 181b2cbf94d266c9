"""Desk-scale VOD dispatch: coupled clustering/policy networks with shared
temporal layers, an asynchronous trainer, and a synthetic CDN simulator."""

from .numerics import (
    OptimizerState,
    ParamSet,
    apply_activation,
    finite_difference_check,
    l2_normalize,
    load_checkpoint,
    mbgd_step,
    save_checkpoint,
    xavier_init,
)
from .temporal import TemporalConfig, temporal_backward, temporal_forward, top_k_pool
from .clustering import BlockPartition, assign_cluster, build_block_partition, cluster_forward
from .policy import accumulate_by_cluster, make_policy_target, policy_forward, policy_loss
from .training import ModelStore, Sample, TrainConfig, run_async, run_interleaved, shuffle_dataset
from .dispatch import (
    DispatchPlan,
    Topology,
    baseline_dispatch,
    build_dispatch_plan,
    compute_cp,
    evaluate_metrics,
    evaluate_objective,
)
from .worldgen import World, WorldConfig, generate_world, pearson, stationarity_report

__all__ = [name for name in dir() if not name.startswith("_")]
