"""Seed and neighborhood sampling for local training steps.

A minibatch fixes, for one (client, round, step), the seed targets and a
layered expansion plan: the nodes whose layer-l estimates get refreshed
this step and, per node, the sampled subset of its intra-client neighbors
feeding that refresh.  Hop h sampling is capped by fanouts[h-1]; draws
are uniform without replacement from the client's neighbor list (one
entry per incident edge, so parallel edges count twice).

Sampling is a pure function of its Generator, so replaying the stream
for (master seed, client, round, step) reproduces the batch exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Optional

import numpy as np

from .graphs import NO_LABEL, PartitionedGraph

EDGE_TASK = "edge"
NODE_TASK = "node"


@dataclass
class LayerPlan:
    """Nodes refreshed at one layer plus their sampled neighbor lists (CSR)."""

    nodes: np.ndarray
    indptr: np.ndarray
    nbr_rows: np.ndarray

    def sampled(self, i: int) -> np.ndarray:
        return self.nbr_rows[self.indptr[i]:self.indptr[i + 1]]


@dataclass
class Minibatch:
    client: int
    round_idx: int
    step_idx: int
    task: str
    seed_edges: np.ndarray
    seed_nodes: np.ndarray
    plans: list[LayerPlan]
    release_candidates: np.ndarray
    empty: bool = False


def _sample_neighbors(view, rows: np.ndarray, cap: int, rng: np.random.Generator) -> LayerPlan:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    chunks: list[np.ndarray] = []
    for i, r in enumerate(rows):
        nbr = view.neighbors(int(r))
        if len(nbr) > cap:
            pick = rng.choice(len(nbr), size=cap, replace=False)
            nbr = nbr[np.sort(pick)]
        chunks.append(nbr)
        indptr[i + 1] = indptr[i] + len(nbr)
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return LayerPlan(nodes=rows, indptr=indptr, nbr_rows=flat)


def sample_minibatch(
    graph: PartitionedGraph,
    client: int,
    seed_count: int,
    fanouts: tuple[int, ...],
    rng: np.random.Generator,
    *,
    task: str = EDGE_TASK,
    seed_pool: Optional[np.ndarray] = None,
    round_idx: int = 0,
    step_idx: int = 0,
) -> Minibatch:
    """Draw seeds and the layered neighborhood plan for one local step.

    seed_pool holds graph edge indices (edge task) or local node rows
    (node task); by default every labeled candidate in the client's view.
    An empty pool yields an empty batch, which callers treat as a
    zero-update step.
    """
    if seed_count < 1:
        raise ValueError("seed_count must be >= 1")
    depth = len(fanouts)
    view = graph.view(client)

    if seed_pool is None:
        if task == EDGE_TASK:
            pool = view.edge_pool
            seed_pool = pool[graph.edge_labels[pool] != NO_LABEL]
        elif task == NODE_TASK:
            seed_pool = np.nonzero(view.labels != NO_LABEL)[0].astype(np.int64)
        else:
            raise ValueError(f"unknown task {task!r}")

    if len(seed_pool) == 0:
        return Minibatch(client, round_idx, step_idx, task,
                         np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                         [], np.zeros(0, dtype=np.int64), empty=True)

    k = min(seed_count, len(seed_pool))
    seeds = np.sort(rng.choice(seed_pool, size=k, replace=False))

    if task == EDGE_TASK:
        seed_edges = seeds
        endpoints: set[int] = set()
        for e in seeds:
            for g in (graph.edge_src[e], graph.edge_dst[e]):
                nid = int(graph.node_ids[g])
                if view.has_node(nid):
                    endpoints.add(view.row_of(nid))
        top = np.array(sorted(endpoints), dtype=np.int64)
        seed_nodes = np.zeros(0, dtype=np.int64)
    else:
        seed_edges = np.zeros(0, dtype=np.int64)
        seed_nodes = seeds
        top = seeds

    plans: list[Optional[LayerPlan]] = [None] * depth
    touched = top
    release = top
    for layer in range(depth, 0, -1):
        plan = _sample_neighbors(view, touched, fanouts[depth - layer], rng)
        plans[layer - 1] = plan
        touched = np.unique(np.concatenate([touched, plan.nbr_rows]))
        if layer == depth:
            release = touched

    return Minibatch(client, round_idx, step_idx, task, seed_edges, seed_nodes,
                     plans, release, empty=False)


def seed_inclusion_probability(pool_size: int, incident: int, seed_count: int) -> float:
    """P(node touched by seed draw) under uniform sampling w/o replacement.

    `incident` counts the node's entries in the pool (its labeled incident
    edges for edge tasks, 1 for node tasks).
    """
    b = min(seed_count, pool_size)
    if incident <= 0:
        return 0.0
    if pool_size - incident < b:
        return 1.0
    return 1.0 - comb(pool_size - incident, b) / comb(pool_size, b)


def min_seed_inclusion_probability(graph: PartitionedGraph, client: int, seed_count: int,
                                   *, task: str = EDGE_TASK) -> float:
    """Minimum, over this client's touchable nodes, of seed-inclusion probability."""
    view = graph.view(client)
    if task == NODE_TASK:
        pool = np.nonzero(view.labels != NO_LABEL)[0]
        if len(pool) == 0:
            return 0.0
        return min(seed_count, len(pool)) / len(pool)
    pool = view.edge_pool
    pool = pool[graph.edge_labels[pool] != NO_LABEL]
    if len(pool) == 0:
        return 0.0
    incident: dict[int, int] = {}
    for e in pool:
        for g in (graph.edge_src[e], graph.edge_dst[e]):
            nid = int(graph.node_ids[g])
            if view.has_node(nid):
                incident[nid] = incident.get(nid, 0) + 1
    return min(seed_inclusion_probability(len(pool), c, seed_count) for c in incident.values())
