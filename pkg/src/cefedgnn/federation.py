"""Server/client round loop, release buffer, aggregation, and accounting.

One experiment runs R rounds.  Each round, every client performs K local
steps (sample, estimator refresh, stop-gradient backward, gradient
moving average, SGD step), then the server averages models and gradient
estimators in ascending client order, applies release-time perturbation,
and overwrites buffer entries for boundary nodes touched this round.
Clients read the buffer as frozen at the previous round's close.

Algorithms:

  ce_fedgnn     full method
  fedavg        cross-client edges dropped from training views, buffer empty
  single_client no aggregation, no buffer; clients train independently
  stale_emb     releases carry the last instantaneous top-layer value
                instead of the moving average
  no_grad_ma    forces beta = 1

The whole trace is a pure function of (graph, hyper, model config,
master seed): all randomness flows through per-(domain, client, round,
step) streams and reductions run in fixed order.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng as rngmod
from .estimators import EmbeddingState, GradientMA, create_embedding_state, \
    create_gradient_ma, update_gradient
from .graphs import EdgeRecord, NodeRecord, PartitionedGraph, build_graph
from .metrics import EDGE_TASK, NODE_TASK, SplitSpec, Splits, class_weights, \
    infer_task, macro_f1, make_splits, num_classes_of
from .models import ConfigurationError, ForwardTrace, Gradients, ModelParams, Target, \
    backward, federated_objective, forward_exact, forward_stochastic, \
    gradient_norm_sq, init_params, zeros_like_params
from .privacy import clip_and_noise
from .sampling import Minibatch, sample_minibatch

ALGO_CE_FEDGNN = "ce_fedgnn"
ALGO_FEDAVG = "fedavg"
ALGO_SINGLE_CLIENT = "single_client"
ALGO_STALE_EMB = "stale_emb"
ALGO_NO_GRAD_MA = "no_grad_ma"
ALGORITHMS = (ALGO_CE_FEDGNN, ALGO_FEDAVG, ALGO_SINGLE_CLIENT,
              ALGO_STALE_EMB, ALGO_NO_GRAD_MA)

TENSOR_HEADER_BYTES = 16
NODE_ID_BYTES = 8
FLOAT_BYTES = 8

METRICS_HEADER = ["round", "mean_macro_f1", "grad_norm_sq", "bytes_up",
                  "bytes_down", "emb_released", "wall_ms"]


class ProtocolError(RuntimeError):
    """Missing client output or divergent tensors during aggregation."""


class SimulationError(RuntimeError):
    """Non-finite values encountered during local updates."""


@dataclass
class Hyperparams:
    rounds: int = 100
    k_local: int = 32
    eta: float = 0.1
    gamma: float = 0.5
    beta: float = 0.9
    batch_size: int = 32
    fanouts: tuple[int, ...] = (10, 10)
    sigma0: float = 0.0
    sigma1: float = 0.0
    sigma2: float = 0.0
    clip_embed: float = 5.0
    clip_model: float = 15.0
    algorithm: str = ALGO_CE_FEDGNN

    def validate(self) -> None:
        if self.rounds < 1 or self.k_local < 1 or self.batch_size < 1:
            raise ConfigurationError("rounds, k_local, and batch_size must be >= 1")
        for name in ("eta", "gamma", "beta"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ConfigurationError(f"{name} must lie in (0, 1], got {v}")
        if min(self.sigma0, self.sigma1, self.sigma2) < 0:
            raise ConfigurationError("noise levels must be >= 0")
        if self.clip_embed <= 0 or self.clip_model <= 0:
            raise ConfigurationError("clipping thresholds must be > 0")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if not self.fanouts or any(f < 1 for f in self.fanouts):
            raise ConfigurationError("fanouts must be positive")


@dataclass
class ModelConfig:
    arch: str = "sage_mean"
    hidden_dims: tuple[int, ...] = (16, 16)
    gin_eps: float = 0.0
    activation: str = "tanh"
    class_weighting: bool = True
    edge_dim: Optional[int] = None


def theorem_schedule(total_steps: int, c: float = 1.0) -> tuple[int, int, float]:
    """(rounds, k_local, rate) with K = ceil(R^(1/3)) and R*K closest to the
    step budget; rate = c * R^(-2/3) serves as eta = beta = gamma."""
    best = None
    for rounds in range(1, total_steps + 1):
        k = int(np.ceil(rounds ** (1.0 / 3.0)))
        gap = abs(rounds * k - total_steps)
        if best is None or gap < best[0]:
            best = (gap, rounds, k)
        if rounds * k > total_steps and gap > best[0]:
            break
    _, rounds, k = best
    rate = min(1.0, c * rounds ** (-2.0 / 3.0))
    return rounds, k, rate


# -- release buffer ----------------------------------------------------------


@dataclass
class BufferEntry:
    value: np.ndarray
    release_round: int
    release_count: int


class GlobalEmbeddingBuffer:
    """Server-side store of last-released boundary-node embeddings.

    Reads return the stored value unchanged however stale it is; the
    release count R'(v) increments exactly when a fresh value is stored.
    Only boundary nodes may be released.
    """

    def __init__(self, boundary_ids: set[int]):
        self.boundary = set(boundary_ids)
        self.entries: dict[int, BufferEntry] = {}

    def release(self, node_id: int, value: np.ndarray, round_idx: int) -> None:
        if node_id not in self.boundary:
            raise ProtocolError(f"node {node_id} is not a boundary node")
        prior = self.entries.get(node_id)
        count = 1 if prior is None else prior.release_count + 1
        self.entries[node_id] = BufferEntry(np.asarray(value, dtype=np.float64).copy(),
                                            round_idx, count)

    def snapshot(self) -> dict[int, tuple[np.ndarray, int]]:
        return {v: (e.value, e.release_round) for v, e in self.entries.items()}

    def values(self) -> dict[int, np.ndarray]:
        return {v: e.value for v, e in self.entries.items()}

    def release_counts(self) -> dict[int, int]:
        return {v: e.release_count for v, e in self.entries.items()}

    def max_release_count(self) -> int:
        return max((e.release_count for e in self.entries.values()), default=0)


# -- communication accounting -------------------------------------------------


def tensor_bytes(params_like) -> int:
    return sum(TENSOR_HEADER_BYTES + FLOAT_BYTES * w.size for _, w in params_like.tensors())


@dataclass
class RoundTraffic:
    round_idx: int
    bytes_up: int = 0
    bytes_down: int = 0
    emb_released: int = 0
    param_grad_bytes: int = 0
    emb_bytes: int = 0


@dataclass
class CommLedger:
    rounds: list[RoundTraffic] = field(default_factory=list)

    def totals(self) -> dict[str, int]:
        keys = ("bytes_up", "bytes_down", "emb_released", "param_grad_bytes", "emb_bytes")
        return {k: sum(getattr(r, k) for r in self.rounds) for k in keys}


def comm_report(ledger: CommLedger) -> dict:
    """Totals plus per-round series for the traffic ledger."""
    totals = ledger.totals()
    series = {
        "round": [r.round_idx for r in ledger.rounds],
        "bytes_up": [r.bytes_up for r in ledger.rounds],
        "bytes_down": [r.bytes_down for r in ledger.rounds],
        "emb_released": [r.emb_released for r in ledger.rounds],
    }
    return {"totals": totals, "per_round": series}


# -- local update -------------------------------------------------------------


@dataclass
class LocalUpdateResult:
    params: ModelParams
    grad_ma: GradientMA
    released: dict[int, np.ndarray]
    steps_run: int
    empty_steps: int


def local_update(
    graph: PartitionedGraph,
    client: int,
    params_in: ModelParams,
    grad_ma_in: GradientMA,
    state: EmbeddingState,
    buffer_view: dict[int, tuple[np.ndarray, int]],
    hyper: Hyperparams,
    master_seed: int,
    round_idx: int,
    *,
    task: str,
    train_pool: np.ndarray,
    cls_weights: np.ndarray,
) -> LocalUpdateResult:
    """Run K local steps for one client and collect its release set.

    params_in/grad_ma_in are the round-start broadcast and are not
    mutated; the embedding state carries over between rounds.  Released
    embeddings are the end-of-round top-layer estimates (or instantaneous
    values when the state tracks them) of boundary nodes touched as a
    seed endpoint or top-layer sampled neighbor.
    """
    hyper.validate()
    params = params_in.copy()
    ma = GradientMA(values=Gradients(
        layers=[w.copy() for w in grad_ma_in.values.layers],
        task_head=grad_ma_in.values.task_head.copy(),
        edge_head=None if grad_ma_in.values.edge_head is None
        else grad_ma_in.values.edge_head.copy()),
        beta=grad_ma_in.beta, last_step=grad_ma_in.last_step)

    view = graph.view(client)
    touched: set[int] = set()
    empty_steps = 0
    for k in range(hyper.k_local):
        srng = rngmod.sampling_stream(master_seed, client, round_idx, k)
        mb = sample_minibatch(graph, client, hyper.batch_size, hyper.fanouts, srng,
                              task=task, seed_pool=train_pool,
                              round_idx=round_idx, step_idx=k)
        if mb.empty:
            empty_steps += 1
            ghat = zeros_like_params(params)
        else:
            trace = forward_stochastic(params, graph, mb, state, buffer_view,
                                       class_weights=cls_weights)
            ghat = backward(trace, params)
            touched.update(int(view.local_ids[r]) for r in mb.release_candidates)
        update_gradient(ma, ghat, step_idx=round_idx * hyper.k_local + k)
        for (_, w), (_, g) in zip(params.tensors(), ma.values.tensors()):
            w -= hyper.eta * g
        for name, w in params.tensors():
            if not np.all(np.isfinite(w)):
                raise SimulationError(
                    f"client {client} round {round_idx} step {k}: non-finite {name}")

    released: dict[int, np.ndarray] = {}
    source = state.instant_top if state.instant_top is not None else state.h_act[-1]
    for nid in sorted(touched & set(int(b) for b in view.boundary_ids)):
        released[nid] = source[view.row_of(nid)].copy()
    return LocalUpdateResult(params=params, grad_ma=ma, released=released,
                             steps_run=hyper.k_local, empty_steps=empty_steps)


# -- server aggregation --------------------------------------------------------


def server_round(
    clients_outputs: list[Optional[LocalUpdateResult]],
    hyper: Hyperparams,
    buffer: GlobalEmbeddingBuffer,
    round_idx: int,
    noise_rng: np.random.Generator,
) -> tuple[ModelParams, GradientMA]:
    """Average client models and gradient estimators, perturb at the
    communication point when configured, and refresh the release buffer.

    Clients are reduced in ascending id order; all receive the same
    (possibly noised) aggregate.  Buffer entries are overwritten only for
    nodes released this round.
    """
    if any(out is None for out in clients_outputs):
        missing = [i for i, o in enumerate(clients_outputs) if o is None]
        raise ProtocolError(f"missing client outputs: {missing}")
    n = len(clients_outputs)

    mean_params = clients_outputs[0].params.copy()
    for _, w in mean_params.tensors():
        w /= n
    for out in clients_outputs[1:]:
        for (_, acc), (_, w) in zip(mean_params.tensors(), out.params.tensors()):
            acc += w / n
    mean_g = zeros_like_params(mean_params)
    for out in clients_outputs:
        for (_, acc), (_, g) in zip(mean_g.tensors(), out.grad_ma.values.tensors()):
            acc += g / n

    # release-time perturbation only; sigma == 0 bypasses the noise path
    for out in clients_outputs:
        for nid in sorted(out.released):
            value = out.released[nid]
            if hyper.sigma0 > 0:
                value = clip_and_noise(value, hyper.clip_embed, hyper.sigma0, noise_rng)
            buffer.release(nid, value, round_idx)
    if hyper.sigma1 > 0:
        for _, w in mean_params.tensors():
            w[...] = clip_and_noise(w.ravel(), hyper.clip_model, hyper.sigma1,
                                    noise_rng).reshape(w.shape)
    if hyper.sigma2 > 0:
        for _, g in mean_g.tensors():
            g[...] = clip_and_noise(g.ravel(), hyper.clip_model, hyper.sigma2,
                                    noise_rng).reshape(g.shape)

    return mean_params, GradientMA(values=mean_g, beta=hyper.beta)


# -- experiment loop -----------------------------------------------------------


@dataclass
class RoundMetrics:
    round_idx: int
    mean_macro_f1: float
    grad_norm_sq: float
    bytes_up: int
    bytes_down: int
    emb_released: int
    wall_ms: int


@dataclass
class ExperimentResult:
    metrics: list[RoundMetrics]
    final_params: ModelParams
    per_client_params: Optional[list[ModelParams]]
    buffer: GlobalEmbeddingBuffer
    ledger: CommLedger
    splits: Splits
    task: str
    cls_weights: np.ndarray
    release_log: list[tuple[int, int]]


def drop_cross_edges(graph: PartitionedGraph) -> PartitionedGraph:
    """Copy of the graph without cross-client edges (fedavg training view)."""
    keep = ~graph.cross_edge_mask
    nodes = [NodeRecord(int(graph.node_ids[i]), int(graph.host[i]),
                        graph.features[i],
                        None if graph.node_labels[i] < 0 else int(graph.node_labels[i]))
             for i in range(graph.num_nodes)]
    edges = [EdgeRecord(int(graph.edge_ids[e]),
                        int(graph.node_ids[graph.edge_src[e]]),
                        int(graph.node_ids[graph.edge_dst[e]]),
                        None if graph.edge_features is None else graph.edge_features[e],
                        None if graph.edge_labels[e] < 0 else int(graph.edge_labels[e]))
             for e in np.nonzero(keep)[0]]
    return build_graph(nodes, edges, graph.num_clients)


def _client_pools(graph: PartitionedGraph, splits: Splits, task: str) -> list[np.ndarray]:
    pools = []
    train = set(int(x) for x in splits.train)
    for c in range(graph.num_clients):
        view = graph.view(c)
        if task == EDGE_TASK:
            pool = np.array([e for e in view.edge_pool if int(e) in train], dtype=np.int64)
        else:
            pool = np.array([view.row_of(int(v)) for v in splits.train
                             if view.has_node(int(v))], dtype=np.int64)
        pools.append(pool)
    return pools


def _eval_targets(graph: PartitionedGraph, splits: Splits, task: str
                  ) -> dict[int, list[Target]]:
    out: dict[int, list[Target]] = {c: [] for c in range(graph.num_clients)}
    if task == EDGE_TASK:
        for e in splits.test:
            e = int(e)
            label = int(graph.edge_labels[e])
            for g in {int(graph.host[graph.edge_src[e]]),
                      int(graph.host[graph.edge_dst[e]])}:
                out[g].append(Target(EDGE_TASK, e, label))
    else:
        for v in splits.test:
            v = int(v)
            host = int(graph.host[graph.index_of(v)])
            out[host].append(Target(NODE_TASK, v, int(graph.node_labels[graph.index_of(v)])))
    return out


def _train_targets(graph: PartitionedGraph, splits: Splits, task: str
                   ) -> dict[int, list[Target]]:
    """Per-client training objectives for the exact-gradient probe; cross
    edges appear on both hosts at weight 1/2."""
    out: dict[int, list[Target]] = {c: [] for c in range(graph.num_clients)}
    if task == EDGE_TASK:
        for e in splits.train:
            e = int(e)
            label = int(graph.edge_labels[e])
            hosts = {int(graph.host[graph.edge_src[e]]),
                     int(graph.host[graph.edge_dst[e]])}
            w = 0.5 if len(hosts) == 2 else 1.0
            for g in hosts:
                out[g].append(Target(EDGE_TASK, e, label, w))
    else:
        for v in splits.train:
            v = int(v)
            host = int(graph.host[graph.index_of(v)])
            out[host].append(Target(NODE_TASK, v, int(graph.node_labels[graph.index_of(v)])))
    return out


def evaluate(
    params_per_client: list[ModelParams],
    graph: PartitionedGraph,
    targets_by_client: dict[int, list[Target]],
    buffer_values: dict[int, tuple[np.ndarray, int]],
) -> float:
    """Mean over clients of macro-F1 on their held-out targets, using exact
    local embeddings and buffered remote endpoints."""
    stop = {nid: val for nid, (val, _) in buffer_values.items()}
    scores = []
    for c in range(graph.num_clients):
        targets = targets_by_client.get(c, [])
        if not targets:
            continue
        trace = forward_exact(params_per_client[c], graph.view(c), targets, stop,
                              graph=graph)
        scores.append(macro_f1(trace.labels, trace.predictions))
    return float(np.mean(scores)) if scores else 0.0


def run_experiment(
    graph: PartitionedGraph,
    hyper: Hyperparams,
    model_cfg: ModelConfig,
    master_seed: int,
    *,
    task: Optional[str] = None,
    split_spec: SplitSpec = SplitSpec(),
    compute_grad_norm: Optional[bool] = None,
    timing: bool = False,
) -> ExperimentResult:
    """Deterministic end-to-end training run producing per-round metrics."""
    hyper.validate()
    if hyper.algorithm == ALGO_NO_GRAD_MA:
        hyper = replace(hyper, beta=1.0)
    task = task or infer_task(graph)
    n_classes = num_classes_of(graph, task)

    train_graph = graph
    if hyper.algorithm == ALGO_FEDAVG:
        train_graph = drop_cross_edges(graph)

    splits = make_splits(graph, task, split_spec, rngmod.split_stream(master_seed))
    pools = _client_pools(train_graph, splits, task)
    eval_targets = _eval_targets(graph, splits, task)
    probe_targets = _train_targets(graph, splits, task)
    labels_all = (graph.edge_labels[splits.train] if task == EDGE_TASK
                  else graph.node_labels[[graph.index_of(int(v)) for v in splits.train]])
    cw = class_weights(labels_all, n_classes, model_cfg.class_weighting)

    params = init_params(
        rngmod.init_stream(master_seed), graph.feature_dim, model_cfg.hidden_dims,
        n_classes, arch=model_cfg.arch, task=task, edge_dim=model_cfg.edge_dim,
        gin_eps=model_cfg.gin_eps, activation=model_cfg.activation)
    single = hyper.algorithm == ALGO_SINGLE_CLIENT
    per_client_params = [params.copy() for _ in range(graph.num_clients)] if single else None
    grad_ma = create_gradient_ma(params, hyper.beta)
    per_client_ma = ([create_gradient_ma(params, hyper.beta)
                      for _ in range(graph.num_clients)] if single else None)

    track_instant = hyper.algorithm == ALGO_STALE_EMB
    states = [create_embedding_state(train_graph.view(c), list(model_cfg.hidden_dims),
                                     hyper.gamma, model_cfg.activation,
                                     track_instant=track_instant)
              for c in range(graph.num_clients)]

    all_boundary: set[int] = set()
    for c in range(train_graph.num_clients):
        all_boundary.update(int(b) for b in train_graph.view(c).boundary_ids)
    buffer = GlobalEmbeddingBuffer(all_boundary)
    consumers = train_graph.boundary_consumers()

    if compute_grad_norm is None:
        compute_grad_norm = graph.num_nodes <= 1000 and len(splits.train) <= 20000
    pg_bytes = tensor_bytes(params) + tensor_bytes(grad_ma.values)
    emb_rec_bytes = NODE_ID_BYTES + FLOAT_BYTES * model_cfg.hidden_dims[-1]

    ledger = CommLedger()
    metrics: list[RoundMetrics] = []
    release_log: list[tuple[int, int]] = []

    for r in range(1, hyper.rounds + 1):
        t0 = time.perf_counter()
        frozen = buffer.snapshot()
        outputs: list[Optional[LocalUpdateResult]] = []
        for c in range(graph.num_clients):
            p_in = per_client_params[c] if single else params
            g_in = per_client_ma[c] if single else grad_ma
            view_buffer = {} if hyper.algorithm == ALGO_FEDAVG or single else frozen
            outputs.append(local_update(
                train_graph, c, p_in, g_in, states[c], view_buffer, hyper,
                master_seed, r, task=task, train_pool=pools[c], cls_weights=cw))

        traffic = RoundTraffic(round_idx=r)
        if single:
            for c, out in enumerate(outputs):
                per_client_params[c] = out.params
                per_client_ma[c] = out.grad_ma
        else:
            nrng = rngmod.noise_stream(master_seed, r)
            params, grad_ma = server_round(outputs, hyper, buffer, r, nrng)
            n_released = 0
            emb_down = 0
            for c, out in enumerate(outputs):
                for nid in sorted(out.released):
                    release_log.append((r, nid))
                    n_released += 1
                    emb_down += len(consumers.get(nid, ()))
            traffic.param_grad_bytes = (graph.num_clients + graph.num_clients) * pg_bytes
            traffic.emb_bytes = (n_released + emb_down) * emb_rec_bytes
            traffic.bytes_up = graph.num_clients * pg_bytes + n_released * emb_rec_bytes
            traffic.bytes_down = graph.num_clients * pg_bytes + emb_down * emb_rec_bytes
            traffic.emb_released = n_released
        ledger.rounds.append(traffic)

        eval_params = per_client_params if single else [params] * graph.num_clients
        f1 = evaluate(eval_params, graph, eval_targets, buffer.snapshot())
        if compute_grad_norm:
            if single:
                norms = [gradient_norm_sq(
                    federated_objective(p, graph, probe_targets, class_weights=cw).grads)
                    for p in per_client_params]
                gnorm = float(np.mean(norms))
            else:
                gnorm = gradient_norm_sq(
                    federated_objective(params, graph, probe_targets, class_weights=cw).grads)
        else:
            gnorm = float("nan")
        wall = int(round((time.perf_counter() - t0) * 1000)) if timing else 0
        metrics.append(RoundMetrics(r, f1, gnorm, traffic.bytes_up,
                                    traffic.bytes_down, traffic.emb_released, wall))

    final = per_client_params[0] if single else params
    return ExperimentResult(metrics=metrics, final_params=final,
                            per_client_params=per_client_params, buffer=buffer,
                            ledger=ledger, splits=splits, task=task, cls_weights=cw,
                            release_log=release_log)


def write_metrics_csv(metrics: list[RoundMetrics], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow([m.round_idx, repr(m.mean_macro_f1), repr(m.grad_norm_sq),
                        m.bytes_up, m.bytes_down, m.emb_released, m.wall_ms])
