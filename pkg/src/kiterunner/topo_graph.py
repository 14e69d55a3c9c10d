"""Topology graph of visited places, shortest distances and localization."""
from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (DanglingEdge, DimensionMismatch, DuplicateNodeId, EmptyGraph, MalformedFile,
                     UnknownNode)

_UNIT_TOL = 1e-6


@dataclass
class TopoNode:
    id: int
    pose: tuple[float, float]
    embeddings: np.ndarray  # (m, d), rows unit-norm
    image_refs: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.id = int(self.id)
        self.pose = (float(self.pose[0]), float(self.pose[1]))
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.image_refs = list(self.image_refs)


@dataclass(frozen=True)
class TopoEdge:
    u: int
    v: int
    cost: float


class TopologyGraph:
    """Undirected graph with per-node image embeddings.

    Validates on construction: unique ids, no self loops, one edge per
    unordered pair, non-negative costs, consistent unit-norm embeddings.
    """

    def __init__(self, nodes, edges, embedding_dim: int | None = None):
        self.nodes: dict[int, TopoNode] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise DuplicateNodeId(f"node id {node.id} appears twice")
            self.nodes[node.id] = node
        if embedding_dim is None:
            embedding_dim = next(iter(self.nodes.values())).embeddings.shape[1] if self.nodes else 0
        self.embedding_dim = int(embedding_dim)
        for node in self.nodes.values():
            emb = node.embeddings
            if emb.shape[0] == 0:
                raise ValueError(f"node {node.id} has no embeddings")
            if emb.shape[1] != self.embedding_dim:
                raise DimensionMismatch(
                    f"node {node.id} embedding dim {emb.shape[1]} != {self.embedding_dim}")
            norms = np.linalg.norm(emb, axis=1)
            if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
                raise ValueError(f"node {node.id} embeddings are not unit-norm")

        self.adjacency: dict[int, dict[int, float]] = {nid: {} for nid in self.nodes}
        self.edges: list[TopoEdge] = []
        for e in edges:
            u, v, cost = int(e.u), int(e.v), float(e.cost)
            if u not in self.nodes or v not in self.nodes:
                raise DanglingEdge(f"edge ({u}, {v}) references a missing node")
            if u == v:
                raise ValueError(f"self loop on node {u}")
            if not cost >= 0:
                raise ValueError(f"edge ({u}, {v}) has negative cost {cost}")
            if v in self.adjacency[u]:
                raise ValueError(f"duplicate edge between {u} and {v}")
            self.adjacency[u][v] = cost
            self.adjacency[v][u] = cost
            self.edges.append(TopoEdge(u, v, cost))
        self._ids = sorted(self.nodes)
        self._stack = None

    def __len__(self):
        return len(self.nodes)

    def __eq__(self, other):
        if not isinstance(other, TopologyGraph):
            return NotImplemented
        if self.embedding_dim != other.embedding_dim or self._ids != other._ids:
            return False
        for nid in self._ids:
            a, b = self.nodes[nid], other.nodes[nid]
            if (a.pose != b.pose or a.image_refs != b.image_refs
                    or not np.array_equal(a.embeddings, b.embeddings)):
                return False
        return self.edges == other.edges

    @property
    def node_ids(self):
        return list(self._ids)

    def pose(self, nid):
        return self.nodes[nid].pose

    def edge_cost(self, u, v):
        return self.adjacency[u][v]

    def hops_from(self, start, max_hops=None):
        """Breadth-first hop counts from ``start`` (bounded by ``max_hops``)."""
        if start not in self.nodes:
            raise UnknownNode(start)
        hops = {start: 0}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            if max_hops is not None and hops[u] >= max_hops:
                continue
            for v in self.adjacency[u]:
                if v not in hops:
                    hops[v] = hops[u] + 1
                    queue.append(v)
        return hops

    def _embedding_stack(self):
        if self._stack is None:
            owners, rows = [], []
            for nid in self._ids:
                emb = self.nodes[nid].embeddings
                owners.extend([nid] * len(emb))
                rows.append(emb)
            self._stack = (np.asarray(owners), np.vstack(rows) if rows else np.zeros((0, 0)))
        return self._stack


def shortest_paths(graph: TopologyGraph, start: int):
    """Dijkstra from ``start``; returns (distance map, predecessor map)."""
    if start not in graph.nodes:
        raise UnknownNode(start)
    dist = {start: 0.0}
    pred: dict[int, int | None] = {start: None}
    done = set()
    heap = [(0.0, start)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, cost in graph.adjacency[u].items():
            nd = d + cost
            if v not in dist or nd < dist[v] or (nd == dist[v] and u < pred[v]):
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
    return dist, pred


def shortest_distances(graph: TopologyGraph, start: int) -> dict[int, float]:
    return shortest_paths(graph, start)[0]


def localize(graph: TopologyGraph, observation_embedding, prior: int | None = None,
             hop_window: int | None = None) -> int:
    """Node whose stored images best match the observation.

    Similarity is the max dot product over a node's embeddings. With a
    ``prior`` the search is limited to nodes within ``hop_window`` hops of it
    (``None`` means unbounded). Ties go to the smallest node id.
    """
    if len(graph) == 0:
        raise EmptyGraph("cannot localize in an empty graph")
    obs = np.asarray(observation_embedding, dtype=np.float64).ravel()
    if obs.shape[0] != graph.embedding_dim:
        raise DimensionMismatch(f"observation dim {obs.shape[0]} != {graph.embedding_dim}")
    if prior is not None:
        if hop_window is not None and hop_window < 0:
            raise ValueError("hop_window must be >= 0")
        allowed = graph.hops_from(prior, hop_window)
    else:
        allowed = None
    owners, stack = graph._embedding_stack()
    scores = stack @ obs
    best_id, best = None, -math.inf
    for nid, s in zip(owners.tolist(), scores.tolist()):
        if allowed is not None and nid not in allowed:
            continue
        if s > best or (s == best and nid < best_id):
            best_id, best = nid, s
    return best_id


def graph_to_dict(graph: TopologyGraph) -> dict:
    return {
        "embedding_dim": graph.embedding_dim,
        "nodes": [{"id": n.id, "pose": list(n.pose), "embeddings": n.embeddings.tolist(),
                   "image_refs": n.image_refs} for n in (graph.nodes[i] for i in graph.node_ids)],
        "edges": [{"from": e.u, "to": e.v, "cost": e.cost} for e in graph.edges],
    }


def save_graph(graph: TopologyGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(graph), fh)


def graph_from_dict(doc) -> TopologyGraph:
    try:
        dim = int(doc["embedding_dim"])
        nodes = [TopoNode(n["id"], tuple(n["pose"]), np.asarray(n["embeddings"], dtype=np.float64),
                          n.get("image_refs", [])) for n in doc["nodes"]]
        edges = [TopoEdge(int(e["from"]), int(e["to"]), float(e["cost"])) for e in doc["edges"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"graph document invalid: {exc!r}") from exc
    return TopologyGraph(nodes, edges, dim)


def load_graph(path) -> TopologyGraph:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    return graph_from_dict(doc)
