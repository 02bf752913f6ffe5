"""Seeded synthetic graph generators with cross-client structure.

planted_cycles builds a directed transaction-style multigraph: random
background transfers (label 0) plus planted directed cycles (label 1)
whose nodes alternate between two clients, so every cycle edge crosses a
client boundary and the pattern is invisible to either side alone.
Camouflage edges touch exactly one cycle node, making single-endpoint
detection unreliable.  Node features mix noisy degree/volume statistics
with an activity bump on cycle members; edge features are (amount, time)
with time last.

sbm_nodes builds a stochastic block model for node classification; block
id is the label and clients cut through blocks so same-label cross-client
edges exist.

Identical GenSpec values produce byte-identical CSV output.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .graphs import EdgeRecord, GraphError, NodeRecord, PartitionedGraph, build_graph
from .rng import DOMAIN_DATAGEN, stream

PLANTED_CYCLES = "planted_cycles"
SBM_NODES = "sbm_nodes"
GENERATORS = (PLANTED_CYCLES, SBM_NODES)

ACTIVITY_BUMP = 1.5
STAT_DIMS = 4  # degree/volume statistics occupy the first feature dims


@dataclass(frozen=True)
class GenSpec:
    generator: str = PLANTED_CYCLES
    n: int = 200
    clients: int = 2
    feature_dim: int = 8
    density: float = 2.0
    pattern_count: Optional[int] = None
    pattern_length: int = 6
    illicit_ratio: float = 0.15
    imbalance: float = 1.0
    num_blocks: int = 2
    p_intra: float = 0.1
    p_inter: float = 0.02
    feature_noise: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.generator not in GENERATORS:
            raise GraphError(f"unknown generator {self.generator!r}")
        if self.n < self.clients or self.clients < 1:
            raise GraphError("need n >= clients >= 1")
        if self.pattern_length < 3:
            raise GraphError("pattern_length must be >= 3")
        if not (0.0 < self.illicit_ratio <= 0.5):
            raise GraphError("illicit_ratio must lie in (0, 0.5]")
        if self.feature_dim < STAT_DIMS + 1:
            raise GraphError(f"feature_dim must be > {STAT_DIMS}")
        if self.imbalance < 1.0:
            raise GraphError("imbalance must be >= 1")
        if self.generator == SBM_NODES and self.num_blocks < 2:
            raise GraphError("sbm needs >= 2 blocks")


def _host_assignment(spec: GenSpec, rng: np.random.Generator) -> np.ndarray:
    """Node hosts in shuffled chunks sized by a geometric weight profile."""
    n, ncl = spec.n, spec.clients
    if ncl == 1:
        return np.zeros(n, dtype=np.int64)
    w = spec.imbalance ** (np.arange(ncl) / (ncl - 1))
    sizes = np.floor(n * w / w.sum()).astype(int)
    while sizes.sum() < n:
        sizes[int(np.argmin(sizes / w))] += 1
    order = rng.permutation(n)
    hosts = np.zeros(n, dtype=np.int64)
    start = 0
    for c, s in enumerate(sizes):
        hosts[order[start:start + s]] = c
        start += s
    return hosts


def gen_planted_cycles(spec: GenSpec) -> PartitionedGraph:
    """Edge-labeled transaction graph with client-spanning illicit cycles."""
    spec.validate()
    if spec.generator != PLANTED_CYCLES:
        raise GraphError(f"spec.generator is {spec.generator!r}")
    rng = stream(spec.seed, DOMAIN_DATAGEN, 0)
    n, m = spec.n, spec.pattern_length
    hosts = _host_assignment(spec, rng)

    background = int(round(spec.density * n))
    if spec.pattern_count is None:
        count = int(round(spec.illicit_ratio * background
                          / ((1.0 - spec.illicit_ratio) * m)))
    else:
        count = spec.pattern_count

    cycles: list[list[int]] = []
    cycle_nodes: set[int] = set()
    if count > 0:
        if spec.clients < 2:
            raise GraphError("planted cycles need >= 2 clients to span a boundary")
        per_client = [np.nonzero(hosts == c)[0] for c in range(spec.clients)]
        half = (m + 1) // 2
        if min(len(p) for p in per_client) < half:
            raise GraphError(
                f"pattern_length {m} needs {half} nodes on every client")
        for i in range(count):
            c1 = i % spec.clients
            c2 = (i + 1) % spec.clients
            a = rng.choice(per_client[c1], size=half, replace=False)
            b = rng.choice(per_client[c2], size=m - half, replace=False)
            cyc = []
            for j in range(m):
                cyc.append(int(a[j // 2]) if j % 2 == 0 else int(b[j // 2]))
            cycles.append(cyc)
            cycle_nodes.update(cyc)

    edges: list[tuple[int, int, int]] = []  # (src, dst, label)
    for cyc in cycles:
        for j in range(m):
            edges.append((cyc[j], cyc[(j + 1) % m], 1))

    camo = sorted(cycle_nodes)
    n_camo = min(len(camo), background // 4)
    plain = background - n_camo
    for i in range(n_camo):
        u = camo[i]
        v = int(rng.integers(n))
        while v == u or v in cycle_nodes:
            v = int(rng.integers(n))
        if rng.random() < 0.5:
            u, v = v, u
        edges.append((u, v, 0))
    for _ in range(plain):
        u = int(rng.integers(n))
        v = int(rng.integers(n))
        while v == u:
            v = int(rng.integers(n))
        edges.append((u, v, 0))

    amounts = np.exp(rng.normal(0.0, 1.0, size=len(edges)))
    times = rng.random(size=len(edges))

    deg_out = np.zeros(n)
    deg_in = np.zeros(n)
    amt_out = np.zeros(n)
    amt_in = np.zeros(n)
    for i, (u, v, _) in enumerate(edges):
        deg_out[u] += 1
        deg_in[v] += 1
        amt_out[u] += amounts[i]
        amt_in[v] += amounts[i]
    scale = max(spec.density, 1.0)
    stats = np.stack([deg_out / scale, deg_in / scale,
                      amt_out / (2 * scale), amt_in / (2 * scale)], axis=1)
    feats = rng.normal(0.0, spec.feature_noise, size=(n, spec.feature_dim))
    feats[:, :STAT_DIMS] += stats
    member = np.zeros(n)
    member[sorted(cycle_nodes)] = ACTIVITY_BUMP
    feats[:, STAT_DIMS:] += member[:, None]

    nodes = [NodeRecord(i, int(hosts[i]), feats[i], None) for i in range(n)]
    erecs = [EdgeRecord(i, u, v, np.array([amounts[i], times[i]]), lbl)
             for i, (u, v, lbl) in enumerate(edges)]
    return build_graph(nodes, erecs, spec.clients)


def gen_sbm_nodes(spec: GenSpec) -> PartitionedGraph:
    """Node-labeled stochastic block model cut across clients within blocks."""
    spec.validate()
    rng = stream(spec.seed, DOMAIN_DATAGEN, 1)
    n, blocks = spec.n, spec.num_blocks
    block = np.arange(n) % blocks
    # round-robin within each block so intra-block edges cross clients
    hosts = np.zeros(n, dtype=np.int64)
    for b in range(blocks):
        idx = np.nonzero(block == b)[0]
        hosts[idx] = np.arange(len(idx)) % spec.clients

    iu, ju = np.triu_indices(n, k=1)
    p = np.where(block[iu] == block[ju], spec.p_intra, spec.p_inter)
    mask = rng.random(len(iu)) < p
    srcs, dsts = iu[mask], ju[mask]

    means = rng.normal(0.0, 1.0, size=(blocks, spec.feature_dim))
    feats = means[block] + rng.normal(0.0, spec.feature_noise,
                                      size=(n, spec.feature_dim))

    nodes = [NodeRecord(i, int(hosts[i]), feats[i], int(block[i])) for i in range(n)]
    erecs = [EdgeRecord(i, int(s), int(d), None, None)
             for i, (s, d) in enumerate(zip(srcs, dsts))]
    return build_graph(nodes, erecs, spec.clients)


def generate(spec: GenSpec) -> PartitionedGraph:
    if spec.generator == PLANTED_CYCLES:
        return gen_planted_cycles(spec)
    return gen_sbm_nodes(spec)


def _edge_pool_counts(graph: PartitionedGraph) -> np.ndarray:
    counts = np.zeros(graph.num_clients, dtype=np.int64)
    for c in range(graph.num_clients):
        counts[c] = len(graph.view(c).edge_pool)
    return counts


def partition(graph: PartitionedGraph, num_clients: int, imbalance: float = 1.0,
              *, seed: int = 0, tolerance: float = 0.15, max_tries: int = 40
              ) -> PartitionedGraph:
    """Reassign hosts so the largest/smallest per-client edge-count ratio
    lands within `tolerance` of `imbalance`; best-effort with a warning
    when the target stays out of reach."""
    if num_clients < 1:
        raise GraphError("num_clients must be >= 1")
    if imbalance < 1.0:
        raise GraphError("imbalance must be >= 1")

    def rebuild(hosts: np.ndarray) -> PartitionedGraph:
        nodes = [NodeRecord(int(graph.node_ids[i]), int(hosts[i]), graph.features[i],
                            None if graph.node_labels[i] < 0 else int(graph.node_labels[i]))
                 for i in range(graph.num_nodes)]
        erecs = [EdgeRecord(int(graph.edge_ids[e]),
                            int(graph.node_ids[graph.edge_src[e]]),
                            int(graph.node_ids[graph.edge_dst[e]]),
                            None if graph.edge_features is None else graph.edge_features[e],
                            None if graph.edge_labels[e] < 0 else int(graph.edge_labels[e]))
                 for e in range(graph.num_edges)]
        return build_graph(nodes, erecs, num_clients)

    if num_clients == 1:
        return rebuild(np.zeros(graph.num_nodes, dtype=np.int64))

    best = None
    best_gap = np.inf
    for t in range(max_tries):
        rng = stream(seed, DOMAIN_DATAGEN, 2, t)
        # widen the weight profile as tries fail
        exponent = 1.0 + 0.25 * (t // 8)
        w = (imbalance ** exponent) ** (np.arange(num_clients) / (num_clients - 1))
        sizes = np.floor(graph.num_nodes * w / w.sum()).astype(int)
        sizes = np.maximum(sizes, 1)
        while sizes.sum() > graph.num_nodes:
            sizes[int(np.argmax(sizes))] -= 1
        while sizes.sum() < graph.num_nodes:
            sizes[int(np.argmin(sizes / w))] += 1
        order = rng.permutation(graph.num_nodes)
        hosts = np.zeros(graph.num_nodes, dtype=np.int64)
        start = 0
        for c, s in enumerate(sizes):
            hosts[order[start:start + s]] = c
            start += s
        cand = rebuild(hosts)
        counts = _edge_pool_counts(cand)
        if counts.min() == 0:
            continue
        ratio = counts.max() / counts.min()
        gap = abs(ratio - imbalance) / imbalance
        if gap < best_gap:
            best, best_gap = cand, gap
        if gap <= tolerance:
            return cand
    warnings.warn(f"partition imbalance target {imbalance} unreachable; "
                  f"best relative gap {best_gap:.3f}")
    if best is None:
        raise GraphError("partition failed: a client always ended up without edges")
    return best
