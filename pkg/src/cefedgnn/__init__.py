"""Communication-efficient, privacy-aware federated GNN simulator."""

from .datagen import GenSpec, gen_planted_cycles, gen_sbm_nodes, partition
from .estimators import EmbeddingState, GradientMA, create_embedding_state, \
    create_gradient_ma, tracking_error_probe, update_embedding, update_gradient
from .federation import CommLedger, GlobalEmbeddingBuffer, Hyperparams, ModelConfig, \
    RoundMetrics, comm_report, local_update, run_experiment, server_round, \
    theorem_schedule
from .graphs import EdgeRecord, NodeRecord, PartitionedGraph, boundary_nodes, \
    build_graph, load_graph_csv, save_graph_csv
from .metrics import SplitSpec, class_weights, macro_f1, make_splits
from .models import GCN, GIN, SAGE_MEAN, ForwardTrace, Gradients, ModelParams, Target, \
    backward, federated_objective, forward_exact, forward_stochastic, init_params, \
    load_params, save_params
from .privacy import NoiseConfig, PrivacyReport, aia_attack, clip_and_noise, \
    mdp_epsilon, privacy_report, rho_percentiles
from .sampling import Minibatch, sample_minibatch

__version__ = "0.1.0"
