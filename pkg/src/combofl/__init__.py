"""Segmented gossip aggregation for decentralized federated learning,
with a flow-level network simulator for training-time estimates."""
from ._kernels import BACKEND
from .aggregation import aggregate_model, aggregate_segment, global_average_oracle
from .baselines import FedAvgFederation, fedavg_round, make_naive_gossip_config
from .config import RunConfig
from .gossip import ChurnEvent, ChurnKind, Federation, PullRequest, handle_peer_failure, plan_pulls
from .netsim import Flow, NetConfig, allocate_rates, fedavg_timing, simulate
from .params import ModelParams, Segment, SegmentationScheme, make_scheme, rebuild, split
from .tasks import (BoundParams, LogisticTask, QuadraticTask, SgdConfig, evaluate, local_update,
                    measure_delta, measure_rho, convergence_bound)

__version__ = "0.1.0"
