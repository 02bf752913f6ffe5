"""Partitioned graph representation and per-client adjacency views.

A graph is split across N clients by a host map over nodes.  Edges whose
endpoints live on different clients ("cross-client edges") are replicated
into both incident clients' views with identical attributes; node
features stay private to the host.  Message passing treats all edges as
undirected; direction survives only in edge features.

Views expose, per local node, the *intra-client* neighbor list used for
aggregation (remote neighbors never enter aggregation means below the
final layer) plus the cross-edge list used by edge-level task heads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

NO_LABEL = -1


class GraphError(ValueError):
    """Raised for malformed graph inputs (duplicate ids, dangling endpoints)."""


@dataclass(frozen=True)
class NodeRecord:
    node_id: int
    host: int
    features: np.ndarray
    label: Optional[int] = None


@dataclass(frozen=True)
class EdgeRecord:
    edge_id: int
    src: int
    dst: int
    features: Optional[np.ndarray] = None
    label: Optional[int] = None


@dataclass
class ClientView:
    """One client's private slice of the graph.

    local_ids are sorted node ids hosted here; adjacency is CSR over local
    rows and covers intra-client edges only (one entry per incident edge,
    sorted by neighbor id then edge id).  cross_edges lists this client's
    copies of replicated edges as (edge_index, local_row, remote_node_id).
    """

    client: int
    local_ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    adj_indptr: np.ndarray
    adj_rows: np.ndarray
    adj_edge_idx: np.ndarray
    intra_edge_idx: np.ndarray
    cross_edges: list[tuple[int, int, int]]
    boundary_ids: np.ndarray
    _row_of: dict[int, int] = field(default_factory=dict, repr=False)

    @property
    def num_local(self) -> int:
        return len(self.local_ids)

    def row_of(self, node_id: int) -> int:
        return self._row_of[node_id]

    def has_node(self, node_id: int) -> bool:
        return node_id in self._row_of

    def neighbors(self, row: int) -> np.ndarray:
        """Local rows of intra neighbors of `row`, one entry per edge."""
        return self.adj_rows[self.adj_indptr[row]:self.adj_indptr[row + 1]]

    def degree(self, row: int) -> int:
        return int(self.adj_indptr[row + 1] - self.adj_indptr[row])

    @property
    def edge_pool(self) -> np.ndarray:
        """Edge indices usable as seed candidates on this client."""
        cross = np.array([e for e, _, _ in self.cross_edges], dtype=np.int64)
        return np.sort(np.concatenate([self.intra_edge_idx, cross]))


class PartitionedGraph:
    """Immutable partitioned graph with per-client views.

    Construction validates the host map, feature dimensions, and edge
    endpoints, then builds one ClientView per client.  Safe for concurrent
    reads after construction.
    """

    def __init__(self, nodes: Sequence[NodeRecord], edges: Sequence[EdgeRecord], num_clients: int):
        if num_clients < 1:
            raise GraphError("num_clients must be >= 1")
        self.num_clients = int(num_clients)

        seen: set[int] = set()
        for nd in nodes:
            if nd.node_id < 0:
                raise GraphError(f"negative NodeId {nd.node_id}")
            if nd.node_id in seen:
                raise GraphError(f"duplicate NodeId {nd.node_id}")
            seen.add(nd.node_id)
            if not (0 <= nd.host < num_clients):
                raise GraphError(f"node {nd.node_id}: host {nd.host} outside [0, {num_clients})")

        order = np.argsort([nd.node_id for nd in nodes], kind="stable")
        nodes = [nodes[i] for i in order]
        self.node_ids = np.array([nd.node_id for nd in nodes], dtype=np.int64)
        self.host = np.array([nd.host for nd in nodes], dtype=np.int64)
        feats = [np.asarray(nd.features, dtype=np.float64) for nd in nodes]
        dims = {f.shape for f in feats}
        if len(dims) > 1:
            raise GraphError(f"inconsistent node feature dimensions: {sorted(d[0] for d in dims)}")
        self.features = np.vstack(feats) if feats else np.zeros((0, 0))
        self.node_labels = np.array(
            [NO_LABEL if nd.label is None else int(nd.label) for nd in nodes], dtype=np.int64
        )
        self._idx_of = {int(v): i for i, v in enumerate(self.node_ids)}

        eseen: set[int] = set()
        for ed in edges:
            if ed.edge_id in eseen:
                raise GraphError(f"duplicate EdgeId {ed.edge_id}")
            eseen.add(ed.edge_id)
            for endpoint in (ed.src, ed.dst):
                if endpoint not in self._idx_of:
                    raise GraphError(f"edge {ed.edge_id}: dangling endpoint {endpoint}")

        eorder = np.argsort([ed.edge_id for ed in edges], kind="stable")
        edges = [edges[i] for i in eorder]
        self.edge_ids = np.array([ed.edge_id for ed in edges], dtype=np.int64)
        self.edge_src = np.array([self._idx_of[ed.src] for ed in edges], dtype=np.int64)
        self.edge_dst = np.array([self._idx_of[ed.dst] for ed in edges], dtype=np.int64)
        self.edge_labels = np.array(
            [NO_LABEL if ed.label is None else int(ed.label) for ed in edges], dtype=np.int64
        )
        efeats = [ed.features for ed in edges]
        if any(f is not None for f in efeats):
            if any(f is None for f in efeats):
                raise GraphError("edge features must be present on all edges or none")
            efeats = [np.asarray(f, dtype=np.float64) for f in efeats]
            edims = {f.shape for f in efeats}
            if len(edims) > 1:
                raise GraphError(f"inconsistent edge feature dimensions: {sorted(d[0] for d in edims)}")
            self.edge_features: Optional[np.ndarray] = np.vstack(efeats)
        else:
            self.edge_features = None

        self._views = [self._build_view(c) for c in range(self.num_clients)]

    # -- basic accessors ---------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edge_ids)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def index_of(self, node_id: int) -> int:
        return self._idx_of[node_id]

    def view(self, client: int) -> ClientView:
        if not (0 <= client < self.num_clients):
            raise GraphError(f"no such client {client}")
        return self._views[client]

    def is_cross(self, edge_index: int) -> bool:
        return self.host[self.edge_src[edge_index]] != self.host[self.edge_dst[edge_index]]

    @property
    def cross_edge_mask(self) -> np.ndarray:
        return self.host[self.edge_src] != self.host[self.edge_dst]

    def boundary_consumers(self) -> dict[int, set[int]]:
        """For each boundary node id, the set of foreign clients adjacent to it."""
        out: dict[int, set[int]] = {}
        for e in range(self.num_edges):
            s, d = self.edge_src[e], self.edge_dst[e]
            hs, hd = int(self.host[s]), int(self.host[d])
            if hs != hd:
                out.setdefault(int(self.node_ids[s]), set()).add(hd)
                out.setdefault(int(self.node_ids[d]), set()).add(hs)
        return out

    # -- construction ------------------------------------------------------

    def _build_view(self, client: int) -> ClientView:
        local_mask = self.host == client
        local_ids = self.node_ids[local_mask]
        row_of = {int(v): i for i, v in enumerate(local_ids)}
        gidx = np.nonzero(local_mask)[0]

        nbrs: list[list[tuple[int, int, int]]] = [[] for _ in range(len(local_ids))]
        intra: list[int] = []
        cross: list[tuple[int, int, int]] = []
        for e in range(self.num_edges):
            s, d = int(self.edge_src[e]), int(self.edge_dst[e])
            hs, hd = int(self.host[s]), int(self.host[d])
            if hs != client and hd != client:
                continue
            sid, did = int(self.node_ids[s]), int(self.node_ids[d])
            if hs == client and hd == client:
                intra.append(e)
                nbrs[row_of[sid]].append((did, e, row_of[did]))
                if sid != did:
                    nbrs[row_of[did]].append((sid, e, row_of[sid]))
            elif hs == client:
                cross.append((e, row_of[sid], did))
            else:
                cross.append((e, row_of[did], sid))

        indptr = np.zeros(len(local_ids) + 1, dtype=np.int64)
        rows: list[int] = []
        eidx: list[int] = []
        for i, entries in enumerate(nbrs):
            entries.sort()
            rows.extend(r for _, _, r in entries)
            eidx.extend(e for _, e, _ in entries)
            indptr[i + 1] = len(rows)

        boundary = sorted({self.node_ids[g] for g in gidx} & self._boundary_of(client))
        return ClientView(
            client=client,
            local_ids=local_ids,
            features=self.features[local_mask],
            labels=self.node_labels[local_mask],
            adj_indptr=indptr,
            adj_rows=np.array(rows, dtype=np.int64),
            adj_edge_idx=np.array(eidx, dtype=np.int64),
            intra_edge_idx=np.array(sorted(intra), dtype=np.int64),
            cross_edges=sorted(cross),
            boundary_ids=np.array(boundary, dtype=np.int64),
            _row_of=row_of,
        )

    def _boundary_of(self, client: int) -> set[int]:
        out: set[int] = set()
        for e in range(self.num_edges):
            s, d = self.edge_src[e], self.edge_dst[e]
            hs, hd = int(self.host[s]), int(self.host[d])
            if hs == client and hd != client:
                out.add(int(self.node_ids[s]))
            elif hd == client and hs != client:
                out.add(int(self.node_ids[d]))
        return out


def build_graph(nodes: Iterable[NodeRecord], edges: Iterable[EdgeRecord], num_clients: int) -> PartitionedGraph:
    return PartitionedGraph(list(nodes), list(edges), num_clients)


def boundary_nodes(graph: PartitionedGraph, client: int) -> set[int]:
    """Nodes hosted by `client` with at least one neighbor hosted elsewhere."""
    return set(int(v) for v in graph.view(client).boundary_ids)


# -- CSV interchange -------------------------------------------------------
#
# nodes.csv: node_id,client_id,label,f0,...,f{d0-1}   (label empty if absent)
# edges.csv: edge_id,src,dst,label,e0,...,e{p-1}
# Header row required; ragged rows rejected with their line number.


def _fmt(x: float) -> str:
    return repr(float(x))


def save_graph_csv(graph: PartitionedGraph, nodes_path, edges_path) -> None:
    d0 = graph.feature_dim
    with open(nodes_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["node_id", "client_id", "label"] + [f"f{i}" for i in range(d0)])
        for i in range(graph.num_nodes):
            lbl = "" if graph.node_labels[i] == NO_LABEL else str(int(graph.node_labels[i]))
            w.writerow([int(graph.node_ids[i]), int(graph.host[i]), lbl]
                       + [_fmt(x) for x in graph.features[i]])
    p = 0 if graph.edge_features is None else graph.edge_features.shape[1]
    with open(edges_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["edge_id", "src", "dst", "label"] + [f"e{i}" for i in range(p)])
        for e in range(graph.num_edges):
            lbl = "" if graph.edge_labels[e] == NO_LABEL else str(int(graph.edge_labels[e]))
            row = [int(graph.edge_ids[e]),
                   int(graph.node_ids[graph.edge_src[e]]),
                   int(graph.node_ids[graph.edge_dst[e]]), lbl]
            if graph.edge_features is not None:
                row += [_fmt(x) for x in graph.edge_features[e]]
            w.writerow(row)


def _read_rows(path, expected_prefix: list[str]):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise GraphError(f"{path}: missing header row") from None
        if header[: len(expected_prefix)] != expected_prefix:
            raise GraphError(f"{path}: header must start with {','.join(expected_prefix)}")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise GraphError(f"{path} line {lineno}: expected {width} fields, got {len(row)}")
            yield lineno, row


def load_graph_csv(nodes_path, edges_path, num_clients: int) -> PartitionedGraph:
    nodes = []
    for lineno, row in _read_rows(nodes_path, ["node_id", "client_id", "label"]):
        try:
            label = None if row[2] == "" else int(row[2])
            nodes.append(NodeRecord(int(row[0]), int(row[1]),
                                    np.array([float(x) for x in row[3:]]), label))
        except ValueError as exc:
            raise GraphError(f"{nodes_path} line {lineno}: {exc}") from None
    edges = []
    for lineno, row in _read_rows(edges_path, ["edge_id", "src", "dst", "label"]):
        try:
            label = None if row[3] == "" else int(row[3])
            feats = np.array([float(x) for x in row[4:]]) if len(row) > 4 else None
            edges.append(EdgeRecord(int(row[0]), int(row[1]), int(row[2]), feats, label))
        except ValueError as exc:
            raise GraphError(f"{edges_path} line {lineno}: {exc}") from None
    return build_graph(nodes, edges, num_clients)
