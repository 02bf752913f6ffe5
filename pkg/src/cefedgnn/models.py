"""Message-passing GNN forward passes, task heads, and manual backward.

Three aggregation variants over a client view's intra-neighbor lists:

  sage_mean : h(v) = phi(W . mean over sampled N(v) u {v} of h_prev)
  gcn       : h(v) = phi(W . sum 1/sqrt(dt_v dt_u) h_prev(u)), dt = deg+1
  gin       : h(v) = phi(W . ((1+eps) h_prev(v) + sum over N(v) h_prev(u)))

Edge targets combine endpoint final-layer embeddings, h(e) =
phi(We . (h(u)+h(v))/2), followed by a linear class head; node targets
apply the head to h(v) directly.  Losses are class-weighted softmax
cross-entropy averaged over the batch.

The exact path computes full-neighborhood embeddings for a view; the
stochastic path refreshes moving-average estimates bottom-up over a
sampled plan and reads cross-client endpoints from the release buffer as
fixed inputs.  Both record a ForwardTrace consumed by `backward`, which
propagates adjoints through the recorded aggregation structure; remote
endpoints are constants (no chain).  Gradients of exact traces match
central finite differences at f64 precision with tanh.

All aggregation goes through one segment-sum kernel so that exact and
stochastic paths produce bit-identical values on identical plans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graphs import ClientView, PartitionedGraph

SAGE_MEAN = "sage_mean"
GCN = "gcn"
GIN = "gin"
ARCHITECTURES = (SAGE_MEAN, GCN, GIN)

TANH = "tanh"
LEAKY_RELU = "leaky_relu"
LEAKY_SLOPE = 0.01

EDGE_TASK = "edge"
NODE_TASK = "node"


class ConfigurationError(ValueError):
    """Inconsistent model configuration (dimension chain, unknown tags)."""


def activate(tag: str, x: np.ndarray) -> np.ndarray:
    if tag == TANH:
        return np.tanh(x)
    if tag == LEAKY_RELU:
        return np.where(x >= 0, x, LEAKY_SLOPE * x)
    raise ConfigurationError(f"unknown activation {tag!r}")


def activate_deriv(tag: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    if tag == TANH:
        return 1.0 - out * out
    if tag == LEAKY_RELU:
        return np.where(pre >= 0, 1.0, LEAKY_SLOPE)
    raise ConfigurationError(f"unknown activation {tag!r}")


@dataclass
class ModelParams:
    """Dense model weights.  layers[l] is (d_{l+1}, d_l) acting on layer-l inputs."""

    layers: list[np.ndarray]
    task_head: np.ndarray
    edge_head: Optional[np.ndarray] = None
    arch: str = SAGE_MEAN
    gin_eps: float = 0.0
    activation: str = TANH

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def out_dim(self) -> int:
        return self.layers[-1].shape[0]

    @property
    def num_classes(self) -> int:
        return self.task_head.shape[0]

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"W{i + 1}", w) for i, w in enumerate(self.layers)]
        if self.edge_head is not None:
            out.append(("We", self.edge_head))
        out.append(("Whead", self.task_head))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            layers=[w.copy() for w in self.layers],
            task_head=self.task_head.copy(),
            edge_head=None if self.edge_head is None else self.edge_head.copy(),
            arch=self.arch, gin_eps=self.gin_eps, activation=self.activation,
        )

    def validate(self, feature_dim: int, task: str = EDGE_TASK) -> None:
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.arch!r}")
        prev = feature_dim
        for i, w in enumerate(self.layers, start=1):
            if w.shape[1] != prev:
                raise ConfigurationError(
                    f"layer {i}: weight expects input dim {w.shape[1]}, got {prev}")
            prev = w.shape[0]
        if task == EDGE_TASK:
            if self.edge_head is None:
                raise ConfigurationError("edge task requires an edge head")
            if self.edge_head.shape[1] != prev:
                raise ConfigurationError(
                    f"edge head: expects input dim {self.edge_head.shape[1]}, got {prev}")
            prev = self.edge_head.shape[0]
        if self.task_head.shape[1] != prev:
            raise ConfigurationError(
                f"task head: expects input dim {self.task_head.shape[1]}, got {prev}")
        for name, w in self.tensors():
            if not np.all(np.isfinite(w)):
                raise ConfigurationError(f"{name}: non-finite entries")


@dataclass
class Gradients:
    """Same shapes as ModelParams; feature_grad only when requested."""

    layers: list[np.ndarray]
    task_head: np.ndarray
    edge_head: Optional[np.ndarray] = None
    feature_grad: Optional[np.ndarray] = None

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"W{i + 1}", w) for i, w in enumerate(self.layers)]
        if self.edge_head is not None:
            out.append(("We", self.edge_head))
        out.append(("Whead", self.task_head))
        return out


def zeros_like_params(params: ModelParams) -> Gradients:
    return Gradients(
        layers=[np.zeros_like(w) for w in params.layers],
        task_head=np.zeros_like(params.task_head),
        edge_head=None if params.edge_head is None else np.zeros_like(params.edge_head),
    )


def init_params(
    rng: np.random.Generator,
    feature_dim: int,
    hidden_dims: Sequence[int],
    num_classes: int,
    *,
    arch: str = SAGE_MEAN,
    task: str = EDGE_TASK,
    edge_dim: Optional[int] = None,
    gin_eps: float = 0.0,
    activation: str = TANH,
) -> ModelParams:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], draw order fixed."""

    def mat(rows: int, cols: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols))

    layers = []
    prev = feature_dim
    for d in hidden_dims:
        layers.append(mat(d, prev))
        prev = d
    edge_head = None
    if task == EDGE_TASK:
        edge_head = mat(edge_dim if edge_dim is not None else prev, prev)
        prev = edge_head.shape[0]
    params = ModelParams(layers=layers, task_head=mat(num_classes, prev),
                         edge_head=edge_head, arch=arch, gin_eps=gin_eps,
                         activation=activation)
    params.validate(feature_dim, task)
    return params


# -- aggregation kernel ------------------------------------------------------


def segment_sums(vals: np.ndarray, indptr: np.ndarray, width: int) -> np.ndarray:
    """Row sums over CSR segments; empty segments yield zero rows."""
    n = len(indptr) - 1
    out = np.zeros((n, width))
    if len(vals) == 0:
        return out
    nonempty = indptr[:-1] < indptr[1:]
    if nonempty.any():
        out[nonempty] = np.add.reduceat(vals, indptr[:-1][nonempty], axis=0)
    return out


@dataclass
class AggPlan:
    """One layer's aggregation structure: nodes, CSR neighbor entries, weights."""

    nodes: np.ndarray
    indptr: np.ndarray
    nbr_rows: np.ndarray
    nbr_w: np.ndarray
    self_w: np.ndarray

    @property
    def seg_lens(self) -> np.ndarray:
        return self.indptr[1:] - self.indptr[:-1]


def _plan_weights(arch: str, gin_eps: float, view: ClientView,
                  nodes: np.ndarray, indptr: np.ndarray, nbr_rows: np.ndarray) -> AggPlan:
    counts = indptr[1:] - indptr[:-1]
    if arch == SAGE_MEAN:
        inv = 1.0 / (counts + 1.0)
        self_w = inv
        nbr_w = np.repeat(inv, counts)
    elif arch == GCN:
        # symmetric normalization with full-view degrees, self loop included
        deg = (view.adj_indptr[1:] - view.adj_indptr[:-1]).astype(np.float64) + 1.0
        sq = np.sqrt(deg)
        self_w = 1.0 / deg[nodes]
        nbr_w = 1.0 / (np.repeat(sq[nodes], counts) * sq[nbr_rows])
    elif arch == GIN:
        self_w = np.full(len(nodes), 1.0 + gin_eps)
        nbr_w = np.ones(len(nbr_rows))
    else:
        raise ConfigurationError(f"unknown architecture {arch!r}")
    return AggPlan(nodes=nodes, indptr=indptr, nbr_rows=nbr_rows,
                   nbr_w=nbr_w, self_w=self_w)


def full_plan(view: ClientView, arch: str, gin_eps: float) -> AggPlan:
    nodes = np.arange(view.num_local, dtype=np.int64)
    return _plan_weights(arch, gin_eps, view, nodes, view.adj_indptr, view.adj_rows)


def aggregate(plan: AggPlan, prev_vals: np.ndarray) -> np.ndarray:
    """Weighted neighbor sums plus self term; prev_vals indexed by local row."""
    width = prev_vals.shape[1]
    vals = prev_vals[plan.nbr_rows] * plan.nbr_w[:, None]
    s = segment_sums(vals, plan.indptr, width)
    return plan.self_w[:, None] * prev_vals[plan.nodes] + s


def scatter_adjoint(plan: AggPlan, delta_agg: np.ndarray, out: np.ndarray) -> None:
    """Adjoint of `aggregate`: accumulate into previous-layer value adjoints."""
    np.add.at(out, plan.nodes, plan.self_w[:, None] * delta_agg)
    if len(plan.nbr_rows):
        expanded = np.repeat(delta_agg, plan.seg_lens, axis=0) * plan.nbr_w[:, None]
        np.add.at(out, plan.nbr_rows, expanded)


# -- layer stacks ------------------------------------------------------------


@dataclass
class LayerStack:
    """Recorded per-view forward state: one AggPlan + (agg, pre, act) per layer.

    value(l) returns the full (num_local, d_l) array of layer-l values as
    seen by consumers: the computed matrix for exact stacks, the estimator
    state for stochastic ones.
    """

    view: ClientView
    plans: list[AggPlan]
    aggs: list[np.ndarray]
    pres: list[np.ndarray]
    acts: list[np.ndarray]
    values: list[np.ndarray]
    features: np.ndarray

    def top(self) -> np.ndarray:
        return self.values[-1]


def compute_stack(params: ModelParams, view: ClientView) -> LayerStack:
    """Exact full-neighborhood embeddings for every local node of a view."""
    plan = full_plan(view, params.arch, params.gin_eps)
    prev = view.features
    plans, aggs, pres, acts, values = [], [], [], [], []
    for w in params.layers:
        agg = aggregate(plan, prev)
        pre = agg @ w.T
        act = activate(params.activation, pre)
        plans.append(plan)
        aggs.append(agg)
        pres.append(pre)
        acts.append(act)
        values.append(act)
        prev = act
    return LayerStack(view=view, plans=plans, aggs=aggs, pres=pres, acts=acts,
                      values=values, features=view.features)


def stack_backward(
    params: ModelParams,
    stack: LayerStack,
    delta_top: np.ndarray,
    grads: Gradients,
    *,
    want_features: bool = False,
) -> Optional[np.ndarray]:
    """Propagate layer-L activation adjoints down one view's stack.

    Accumulates weight gradients into `grads`; returns the feature adjoint
    array when requested.
    """
    delta_act = delta_top
    for l in range(params.depth - 1, -1, -1):
        plan = stack.plans[l]
        # adjoints live in full (num_local, d) arrays for exact and
        # stochastic stacks alike; gather the rows this plan touched
        d_vals = delta_act[plan.nodes]
        d_pre = d_vals * activate_deriv(params.activation, stack.pres[l], stack.acts[l])
        grads.layers[l] += d_pre.T @ stack.aggs[l]
        d_agg = d_pre @ params.layers[l]
        lower_dim = params.layers[l].shape[1]
        delta_prev = np.zeros((stack.view.num_local, lower_dim))
        scatter_adjoint(plan, d_agg, delta_prev)
        delta_act = delta_prev
    return delta_act if want_features else None


# -- targets and traces ------------------------------------------------------


@dataclass(frozen=True)
class Target:
    """One supervised example.

    For edges, `ref` is the graph edge index; weight 0.5 marks a
    double-sampled cross-client copy.  chain_scale compensates endpoint
    chains that only one replica computes (2.0 on the owned endpoint of a
    stop-gradient cross-edge backward, 1.0 otherwise).
    """

    kind: str
    ref: int
    label: int
    weight: float = 1.0
    chain_scale: tuple[float, float] = (1.0, 1.0)


@dataclass
class _Endpoint:
    client: int          # -1 for stop-gradient (remote) endpoints
    row: int
    value: np.ndarray
    chain_scale: float
    node_id: int
    stale_round: Optional[int] = None
    cold: bool = False


@dataclass
class _TraceTarget:
    kind: str
    ref: int
    label: int
    weight: float
    endpoints: list[_Endpoint]
    head_in: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    e_agg: Optional[np.ndarray] = None
    e_pre: Optional[np.ndarray] = None
    e_act: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    """Everything `backward` needs, plus predictions and loss for callers."""

    stacks: dict[int, LayerStack]
    targets: list[_TraceTarget]
    loss: float
    batch_size: int
    class_weights: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    used_stale: list[tuple[int, Optional[int]]] = field(default_factory=list)
    used_cold: list[int] = field(default_factory=list)


def _softmax(z: np.ndarray) -> np.ndarray:
    m = z - z.max()
    e = np.exp(m)
    return e / e.sum()


def _finish_targets(
    params: ModelParams,
    stacks: dict[int, LayerStack],
    raw: list[tuple[Target, list[_Endpoint]]],
    class_weights: Optional[np.ndarray],
    batch_size: Optional[int] = None,
) -> ForwardTrace:
    cw = (np.ones(params.num_classes) if class_weights is None
          else np.asarray(class_weights, dtype=np.float64))
    targets: list[_TraceTarget] = []
    used_stale: list[tuple[int, Optional[int]]] = []
    used_cold: list[int] = []
    loss = 0.0
    for tgt, endpoints in raw:
        if tgt.kind == EDGE_TASK:
            e_agg = 0.5 * (endpoints[0].value + endpoints[1].value)
            e_pre = params.edge_head @ e_agg
            e_act = activate(params.activation, e_pre)
            head_in = e_act
        else:
            e_agg = e_pre = e_act = None
            head_in = endpoints[0].value
        logits = params.task_head @ head_in
        probs = _softmax(logits)
        loss += tgt.weight * cw[tgt.label] * -np.log(max(probs[tgt.label], 1e-300))
        for ep in endpoints:
            if ep.client < 0:
                if ep.cold:
                    used_cold.append(ep.node_id)
                else:
                    used_stale.append((ep.node_id, ep.stale_round))
        targets.append(_TraceTarget(
            kind=tgt.kind, ref=tgt.ref, label=tgt.label, weight=tgt.weight,
            endpoints=endpoints, head_in=head_in, logits=logits, probs=probs,
            e_agg=e_agg, e_pre=e_pre, e_act=e_act))
    b = batch_size if batch_size is not None else max(len(targets), 1)
    preds = np.array([int(np.argmax(t.logits)) for t in targets], dtype=np.int64)
    labels = np.array([t.label for t in targets], dtype=np.int64)
    return ForwardTrace(stacks=stacks, targets=targets, loss=loss / b,
                        batch_size=b, class_weights=cw, predictions=preds,
                        labels=labels, used_stale=used_stale, used_cold=used_cold)


def forward_exact(
    params: ModelParams,
    view: ClientView,
    targets: Sequence[Target],
    stop_gradient_embeddings: Optional[dict[int, np.ndarray]] = None,
    *,
    graph: PartitionedGraph,
    class_weights: Optional[np.ndarray] = None,
) -> ForwardTrace:
    """Full-neighborhood forward over one client view.

    Edge endpoints hosted elsewhere must appear in
    stop_gradient_embeddings (node id -> final-layer vector); they are
    treated as constants.  Missing remote entries fall back to the
    zero-vector cold start and are flagged in the trace.
    """
    params.validate(view.features.shape[1],
                    EDGE_TASK if params.edge_head is not None else NODE_TASK)
    stop = stop_gradient_embeddings or {}
    stack = compute_stack(params, view)
    raw: list[tuple[Target, list[_Endpoint]]] = []
    for tgt in targets:
        if tgt.kind == EDGE_TASK:
            e = tgt.ref
            eps: list[_Endpoint] = []
            for pos, g in enumerate((graph.edge_src[e], graph.edge_dst[e])):
                nid = int(graph.node_ids[g])
                if view.has_node(nid):
                    row = view.row_of(nid)
                    eps.append(_Endpoint(view.client, row, stack.top()[row],
                                         tgt.chain_scale[pos], nid))
                elif nid in stop:
                    eps.append(_Endpoint(-1, -1, np.asarray(stop[nid], dtype=np.float64),
                                         0.0, nid))
                else:
                    eps.append(_Endpoint(-1, -1, np.zeros(params.out_dim), 0.0, nid,
                                         cold=True))
            raw.append((tgt, eps))
        else:
            row = view.row_of(tgt.ref)
            raw.append((tgt, [_Endpoint(view.client, row, stack.top()[row],
                                        tgt.chain_scale[0], tgt.ref)]))
    return _finish_targets(params, {view.client: stack}, raw, class_weights)


def backward(
    trace: ForwardTrace,
    params: ModelParams,
    *,
    feature_grad_node: Optional[tuple[int, int]] = None,
) -> Gradients:
    """Exact reverse-mode gradients of the trace's batch loss.

    Stop-gradient endpoints stay constant.  feature_grad_node, given as
    (client, node_id), additionally returns the loss gradient with
    respect to that node's input features.
    """
    grads = zeros_like_params(params)
    delta_tops = {c: np.zeros_like(s.top()) for c, s in trace.stacks.items()}
    b = trace.batch_size
    for t in trace.targets:
        scale = t.weight * trace.class_weights[t.label] / b
        d_logits = scale * (t.probs - np.eye(len(t.probs))[t.label])
        grads.task_head += np.outer(d_logits, t.head_in)
        d_head_in = params.task_head.T @ d_logits
        if t.kind == EDGE_TASK:
            d_epre = d_head_in * activate_deriv(params.activation, t.e_pre, t.e_act)
            grads.edge_head += np.outer(d_epre, t.e_agg)
            d_eagg = params.edge_head.T @ d_epre
            for ep in t.endpoints:
                if ep.client >= 0 and ep.chain_scale != 0.0:
                    delta_tops[ep.client][ep.row] += 0.5 * ep.chain_scale * d_eagg
        else:
            ep = t.endpoints[0]
            if ep.client >= 0 and ep.chain_scale != 0.0:
                delta_tops[ep.client][ep.row] += ep.chain_scale * d_head_in

    want_client = want_node = None
    if feature_grad_node is not None:
        want_client, want_node = feature_grad_node
    for client, stack in trace.stacks.items():
        want = want_client == client
        feat = stack_backward(params, stack, delta_tops[client], grads,
                              want_features=want)
        if want and feat is not None:
            grads.feature_grad = feat[stack.view.row_of(want_node)].copy()
    return grads


# -- multi-view exact objective ---------------------------------------------


@dataclass
class ObjectiveResult:
    loss: float
    grads: Optional[Gradients]
    stacks: dict[int, LayerStack]
    trace: ForwardTrace


def federated_objective(
    params: ModelParams,
    graph: PartitionedGraph,
    targets_by_client: dict[int, Sequence[Target]],
    *,
    class_weights: Optional[np.ndarray] = None,
    remote_embeddings: Optional[dict[int, np.ndarray]] = None,
    compute_grads: bool = True,
) -> ObjectiveResult:
    """Deterministic objective F = (1/N) sum_i mean over client i's targets.

    Every node's embedding comes from its host view (intra neighbors
    only); edge targets combine the two hosts' values.  With
    remote_embeddings=None the combination uses exact values and the
    gradient chains through both endpoints; passing a buffer dict instead
    resolves non-host endpoints from it as constants (the deployment
    inference path).
    """
    params.validate(graph.feature_dim,
                    EDGE_TASK if params.edge_head is not None else NODE_TASK)
    stacks = {c: compute_stack(params, graph.view(c)) for c in range(graph.num_clients)}
    exact_remote = remote_embeddings is None

    total_loss = 0.0
    grads = zeros_like_params(params) if compute_grads else None
    delta_tops = {c: np.zeros_like(s.top()) for c, s in stacks.items()}
    all_raw: list[tuple[Target, list[_Endpoint], float]] = []
    n = graph.num_clients
    for client in range(n):
        tlist = list(targets_by_client.get(client, ()))
        if not tlist:
            continue
        norm = 1.0 / (n * len(tlist))
        view = graph.view(client)
        for tgt in tlist:
            if tgt.kind == EDGE_TASK:
                eps = []
                for pos, g in enumerate((graph.edge_src[tgt.ref], graph.edge_dst[tgt.ref])):
                    nid = int(graph.node_ids[g])
                    host = int(graph.host[g])
                    if host == client or exact_remote:
                        row = graph.view(host).row_of(nid)
                        eps.append(_Endpoint(host, row, stacks[host].top()[row],
                                             tgt.chain_scale[pos], nid))
                    else:
                        val = remote_embeddings.get(nid)
                        cold = val is None
                        eps.append(_Endpoint(-1, -1,
                                             np.zeros(params.out_dim) if cold
                                             else np.asarray(val, dtype=np.float64),
                                             0.0, nid, cold=cold))
            else:
                row = view.row_of(tgt.ref)
                eps = [_Endpoint(client, row, stacks[client].top()[row],
                                 tgt.chain_scale[0], tgt.ref)]
            all_raw.append((tgt, eps, norm))

    cw = (np.ones(params.num_classes) if class_weights is None
          else np.asarray(class_weights, dtype=np.float64))
    trace_raw = [(t, e) for t, e, _ in all_raw]
    trace = _finish_targets(params, stacks, trace_raw, cw, batch_size=1)
    # re-weight loss with per-client normalization
    total_loss = 0.0
    for (tgt, eps, norm), tt in zip(all_raw, trace.targets):
        total_loss += norm * tgt.weight * cw[tgt.label] * -np.log(max(tt.probs[tgt.label], 1e-300))
    trace.loss = total_loss

    if compute_grads:
        for (tgt, eps, norm), tt in zip(all_raw, trace.targets):
            scale = norm * tgt.weight * cw[tgt.label]
            d_logits = scale * (tt.probs - np.eye(len(tt.probs))[tt.label])
            grads.task_head += np.outer(d_logits, tt.head_in)
            d_head_in = params.task_head.T @ d_logits
            if tgt.kind == EDGE_TASK:
                d_epre = d_head_in * activate_deriv(params.activation, tt.e_pre, tt.e_act)
                grads.edge_head += np.outer(d_epre, tt.e_agg)
                d_eagg = params.edge_head.T @ d_epre
                for ep in tt.endpoints:
                    if ep.client >= 0 and ep.chain_scale != 0.0:
                        delta_tops[ep.client][ep.row] += 0.5 * ep.chain_scale * d_eagg
            else:
                ep = tt.endpoints[0]
                delta_tops[ep.client][ep.row] += ep.chain_scale * d_head_in
        for client, stack in stacks.items():
            stack_backward(params, stack, delta_tops[client], grads)

    return ObjectiveResult(loss=total_loss, grads=grads, stacks=stacks, trace=trace)


def gradient_norm_sq(grads: Gradients) -> float:
    return float(sum(np.sum(w * w) for _, w in grads.tensors()))


# -- stochastic estimator-based forward ---------------------------------------


def forward_stochastic(
    params: ModelParams,
    graph: PartitionedGraph,
    minibatch,
    state,
    buffer_view: Optional[dict] = None,
    *,
    class_weights: Optional[np.ndarray] = None,
) -> ForwardTrace:
    """One local step: refresh estimators bottom-up, then score the seeds.

    Layers are updated in order 1..L so layer l consumes this step's
    layer-(l-1) estimates; nodes outside a layer's plan keep their state.
    Edge targets use the post-update final-layer estimate of the owned
    endpoint and the buffered release of the other; buffer misses fall
    back to the cold-start zero vector and are flagged in the trace.
    Cross-client copies carry weight 1/2 with the owned-endpoint chain
    re-scaled by 2, so client-averaged stop-gradient backward passes stay
    unbiased for the shared objective.
    """
    from .estimators import update_embedding

    view = state.view
    buffer_view = buffer_view or {}
    if minibatch.empty:
        return ForwardTrace(stacks={}, targets=[], loss=0.0, batch_size=1,
                            class_weights=np.ones(params.num_classes),
                            predictions=np.zeros(0, dtype=np.int64),
                            labels=np.zeros(0, dtype=np.int64))

    plans, aggs, pres, acts, values = [], [], [], [], []
    for layer in range(1, params.depth + 1):
        lp = minibatch.plans[layer - 1]
        plan = _plan_weights(params.arch, params.gin_eps, view,
                             lp.nodes, lp.indptr, lp.nbr_rows)
        prev_vals = view.features if layer == 1 else state.h_act[layer - 2]
        agg = aggregate(plan, prev_vals)
        msg = agg @ params.layers[layer - 1].T
        update_embedding(state, lp.nodes, layer, msg,
                         round_idx=minibatch.round_idx, step_idx=minibatch.step_idx)
        plans.append(plan)
        aggs.append(agg)
        pres.append(state.h_tilde[layer - 1][lp.nodes])
        acts.append(state.h_act[layer - 1][lp.nodes])
        values.append(state.h_act[layer - 1])
    stack = LayerStack(view=view, plans=plans, aggs=aggs, pres=pres, acts=acts,
                       values=values, features=view.features)

    raw: list[tuple[Target, list[_Endpoint]]] = []
    top = state.h_act[params.depth - 1]
    if minibatch.task == EDGE_TASK:
        for e in minibatch.seed_edges:
            e = int(e)
            cross = graph.is_cross(e)
            weight = 0.5 if cross else 1.0
            eps: list[_Endpoint] = []
            scales = []
            for g in (graph.edge_src[e], graph.edge_dst[e]):
                nid = int(graph.node_ids[g])
                if view.has_node(nid):
                    row = view.row_of(nid)
                    sc = 2.0 if cross else 1.0
                    eps.append(_Endpoint(view.client, row, top[row].copy(), sc, nid))
                    scales.append(sc)
                else:
                    entry = buffer_view.get(nid)
                    if entry is None:
                        eps.append(_Endpoint(-1, -1, np.zeros(params.out_dim), 0.0,
                                             nid, cold=True))
                    else:
                        value, released_round = entry
                        eps.append(_Endpoint(-1, -1, np.asarray(value, dtype=np.float64),
                                             0.0, nid, stale_round=released_round))
                    scales.append(0.0)
            tgt = Target(EDGE_TASK, e, int(graph.edge_labels[e]), weight,
                         (scales[0], scales[1]))
            raw.append((tgt, eps))
    else:
        for row in minibatch.seed_nodes:
            row = int(row)
            nid = int(view.local_ids[row])
            tgt = Target(NODE_TASK, nid, int(view.labels[row]))
            raw.append((tgt, [_Endpoint(view.client, row, top[row].copy(), 1.0, nid)]))

    return _finish_targets(params, {view.client: stack}, raw, class_weights)


# -- checkpoint io -----------------------------------------------------------
#
# Layout: one UTF-8 JSON header line, then each tensor's float64
# little-endian row-major bytes concatenated in header order.

_MAGIC = "cefedgnn-params-v1"


def save_params(params: ModelParams, path) -> None:
    header = {
        "format": _MAGIC,
        "arch": params.arch,
        "gin_eps": params.gin_eps,
        "activation": params.activation,
        "tensors": [{"name": n, "rows": int(w.shape[0]), "cols": int(w.shape[1])}
                    for n, w in params.tensors()],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, w in params.tensors():
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("format") != _MAGIC:
            raise ConfigurationError(f"{path}: not a {_MAGIC} checkpoint")
        tensors = {}
        for spec in header["tensors"]:
            count = spec["rows"] * spec["cols"]
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise ConfigurationError(f"{path}: truncated tensor {spec['name']}")
            tensors[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(
                spec["rows"], spec["cols"]).copy()
    layers = []
    i = 1
    while f"W{i}" in tensors:
        layers.append(tensors[f"W{i}"])
        i += 1
    return ModelParams(layers=layers, task_head=tensors["Whead"],
                       edge_head=tensors.get("We"), arch=header["arch"],
                       gin_eps=header["gin_eps"], activation=header["activation"])
