"""Vision-language processing: landmarks, image-landmark similarity, routing.

The language model and the image/text encoders are pluggable providers. The
package ships a rule-based landmark extractor and two deterministic
embedding providers (a hash-based one and a tag oracle for simulated worlds).
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import re
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import DimensionMismatch, NoLandmarksFound, UnknownNode, Unreachable
from .topo_graph import TopologyGraph, shortest_distances

DEFAULT_BETA_COST = 0.05

_CONNECTIVES = re.compile(
    r"\s*(?:[,;.!]|\bthen\b|\bafterwards\b|\bafter\b|\bpast\b|\band\b|\bfinally\b|\bnext\b)\s*")
_INNER_PREPS = re.compile(r"\s+(?:to|towards|toward|until|into|onto)\s+")
_LEAD_WORDS = frozenset("""
go walk head move drive pass reach turn proceed continue navigate travel stop find approach
cross follow arrive get come run visit return keep take make wait start enter exit leave circle
then and finally first next please now you your way the a an to toward towards at by near past
through along around until into onto over up down left right straight ahead on in of there
""".split())


@dataclass(frozen=True)
class LandmarkList:
    landmarks: tuple[str, ...]

    def __post_init__(self):
        if not self.landmarks:
            raise NoLandmarksFound("landmark list is empty")

    def __len__(self):
        return len(self.landmarks)

    def __iter__(self):
        return iter(self.landmarks)


class LandmarkExtractor(Protocol):
    def extract(self, instruction: str) -> LandmarkList: ...


def _strip_phrase(words):
    lo, hi = 0, len(words)
    while lo < hi and words[lo] in _LEAD_WORDS:
        lo += 1
    while hi > lo and words[hi - 1] in _LEAD_WORDS:
        hi -= 1
    return " ".join(words[lo:hi])


def extract_landmarks_rulebased(instruction: str) -> LandmarkList:
    """Ordered noun phrases from a route instruction.

    Splits on sequencing connectives and punctuation, then trims leading and
    trailing verbs, articles and prepositions from each piece.
    """
    text = instruction.strip().lower()
    if not text:
        raise NoLandmarksFound("empty instruction")
    found = []
    for chunk in _CONNECTIVES.split(text):
        for piece in _INNER_PREPS.split(f" {chunk} "):
            words = re.findall(r"[a-z0-9][a-z0-9'-]*", piece)
            phrase = _strip_phrase(words)
            if phrase:
                found.append(phrase)
    if not found:
        raise NoLandmarksFound(f"no landmarks in {instruction!r}")
    return LandmarkList(tuple(found))


class RuleBasedExtractor:
    def extract(self, instruction: str) -> LandmarkList:
        return extract_landmarks_rulebased(instruction)


class EmbeddingProvider(Protocol):
    dim: int

    def embed_image(self, image_ref: str) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _hash_unit(key: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class HashEmbeddingProvider:
    """Unit vectors seeded from a SHA-256 of the input; no semantics."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def embed_image(self, image_ref):
        return _hash_unit(f"img:{image_ref}", self.dim)

    def embed_text(self, text):
        return _hash_unit(f"txt:{text.strip().lower()}", self.dim)


class TagOracleProvider:
    """Embeds synthetic image refs by their ground-truth tags.

    Every vocabulary term owns one orthonormal basis direction. An image ref
    such as ``"scene=grass;tags=gate;weight=0.9;noise=0.05;var=3"`` embeds to
    ``weight * sum(tag dirs)/sqrt(m) + (1 - weight) * scene dir`` plus a
    hashed perturbation of size ``noise``, renormalized. Text matching a
    vocabulary term embeds to its basis direction.
    """

    def __init__(self, vocabulary: Sequence[str], dim: int = 64):
        vocab = [v.strip().lower() for v in vocabulary]
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary terms must be unique")
        if len(vocab) > dim:
            raise ValueError(f"{len(vocab)} terms do not fit in dimension {dim}")
        self.dim = dim
        self.vocabulary = vocab
        self._index = {term: i for i, term in enumerate(vocab)}

    def _basis(self, term):
        v = np.zeros(self.dim)
        v[self._index[term]] = 1.0
        return v

    def embed_text(self, text):
        term = text.strip().lower()
        if term in self._index:
            return self._basis(term)
        return _hash_unit(f"txt:{term}", self.dim)

    def embed_image(self, image_ref):
        fields = dict(part.split("=", 1) for part in image_ref.split(";") if "=" in part)
        if "scene" not in fields and "tags" not in fields:
            return _hash_unit(f"img:{image_ref}", self.dim)
        tags = [t for t in fields.get("tags", "").split(",") if t]
        weight = float(fields.get("weight", 1.0 if tags else 0.0))
        noise = float(fields.get("noise", 0.0))
        v = np.zeros(self.dim)
        if tags:
            v += weight * sum(self._basis(t) for t in tags) / np.sqrt(len(tags))
        if "scene" in fields:
            v += (1.0 - weight) * self._basis(fields["scene"])
        if noise > 0:
            v += noise * _hash_unit(f"img:{image_ref}", self.dim)
        return v / np.linalg.norm(v)


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (|V|, n)
    node_index: list[int]
    landmark_index: list[str]

    def row(self, node_id):
        return self.values[self.node_index.index(node_id)]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["node", *self.landmark_index])
            for nid, row in zip(self.node_index, self.values):
                w.writerow([nid, *(repr(float(v)) for v in row)])


def similarity_matrix(graph: TopologyGraph, landmarks: LandmarkList,
                      provider: EmbeddingProvider) -> SimilarityMatrix:
    if graph.embedding_dim != provider.dim:
        raise DimensionMismatch(f"graph dim {graph.embedding_dim} != provider dim {provider.dim}")
    text = np.stack([provider.embed_text(l) for l in landmarks])  # (n, d)
    ids = graph.node_ids
    values = np.stack([(graph.nodes[i].embeddings @ text.T).max(axis=0) for i in ids])
    return SimilarityMatrix(values, ids, list(landmarks))


@dataclass
class OptimalPath:
    nodes: list[int]
    matched_landmarks: list[int]
    total_value: float
    length: float


def path_length(graph: TopologyGraph, nodes: Sequence[int]) -> float:
    total = 0.0
    for u, v in zip(nodes[:-1], nodes[1:]):
        total += graph.edge_cost(u, v)
    return total


def plan_route(graph: TopologyGraph, S: SimilarityMatrix, distances: dict | None = None,
               v_start: int = 0, beta_cost: float = DEFAULT_BETA_COST) -> OptimalPath:
    """Best route that matches every landmark in order.

    Searches states ``(node, landmarks matched so far)``. Matching landmark j
    at node v earns ``S[v, j]``; traversing an edge costs ``beta_cost`` per
    meter. Layers are processed in landmark order with a multi-source
    Dijkstra inside each layer. Labels compare by (cost, length, node
    sequence), which implements the tie rule: higher value, then shorter
    path, then lexicographically smaller node ids.
    """
    if v_start not in graph.nodes:
        raise UnknownNode(v_start)
    if beta_cost < 0:
        raise ValueError("beta_cost must be >= 0")
    n = S.values.shape[1]
    if S.values.shape[0] != len(graph) or sorted(S.node_index) != graph.node_ids:
        raise DimensionMismatch("similarity matrix rows do not match graph nodes")
    if distances is None:
        distances = shortest_distances(graph, v_start)
    reachable = set(distances)
    row_of = {nid: i for i, nid in enumerate(S.node_index)}
    vals = S.values
    for j in range(n):
        top = S.node_index[int(np.argmax(vals[:, j]))]
        if top not in reachable:
            raise Unreachable(f"landmark {S.landmark_index[j]!r} best matches node {top}, "
                              f"which is not reachable from {v_start}")

    # label: (cost, length, seq, matches)
    labels = {v_start: (0.0, 0.0, (v_start,), ())}
    for j in range(n):
        labels = _layer_dijkstra(graph, labels, beta_cost, reachable)
        labels = {v: (c - float(vals[row_of[v], j]), L, seq, m + (v,))
                  for v, (c, L, seq, m) in labels.items()}
    best = min(labels.values(), key=lambda lab: lab[:3])
    _, length, seq, matches = best
    value = sum(float(vals[row_of[m], j]) for j, m in enumerate(matches)) - beta_cost * length
    return OptimalPath(list(seq), list(matches), value, length)


def _layer_dijkstra(graph, sources, beta_cost, reachable):
    best = dict(sources)
    heap = [(lab[0], lab[1], lab[2], v) for v, lab in sources.items()]
    heapq.heapify(heap)
    done = set()
    while heap:
        c, L, seq, u = heapq.heappop(heap)
        if u in done or best[u][:3] != (c, L, seq):
            continue
        done.add(u)
        matches = best[u][3]
        for v, cost in graph.adjacency[u].items():
            if v in done or v not in reachable:
                continue
            cand = (c + beta_cost * cost, L + cost, seq + (v,))
            if v not in best or cand < best[v][:3]:
                best[v] = (*cand, matches)
                heapq.heappush(heap, (*cand, v))
    return best


def route_polyline(graph: TopologyGraph, path: OptimalPath) -> np.ndarray:
    return np.array([graph.pose(v) for v in path.nodes], dtype=np.float64)
