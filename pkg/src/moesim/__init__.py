"""Desk-scale simulator and schedulers for MoE training and inference systems."""

__version__ = "0.1.0"

from .model_spec import (FeasibilityReport, MachineSpec, ModelSpec, check_feasibility,
                         cpu_node_demand, gpu_node_demand, ssd_node_demand, total_params)
from .workload import RoutingTrace, TaskLoad, gen_trace, imbalance_ratio
from .topology import Link, LinkClass, Topology, route, transfer_ns, transfer_time
from .engine import Engine, Timeline
from .collectives import (BucketSet, GradBucket, allgather, alltoall_flat,
                          alltoall_hierarchical, flat_transfers, fuse_slices,
                          hierarchical_transfers, lower_transfers, spin_hops, split_blob)
from .prefetch import AccessOutcome, CacheParams, CPUCache, Outcome, run_2d_schedule
from .ring import RingPlan, build_schedule, peak_memory
from .ring import simulate as ring_simulate
from .elastic import (TaskAssignment, balance_scale_down, balance_scale_up, max_load,
                      simulate_multitask)
from .embedding import CommCounter, EmbShard, backward, forward, partition_table
from .scenario import Scenario, run_scenario
