"""Deterministic 2-D navigation simulator.

Worlds are 1 m grids with a boolean ground-truth traversability layer, a
noisy feature raster for the traversability classifier, dynamic obstacles on
looping paths and a topology graph whose node images are tagged for the
:class:`~kiterunner.vlp.TagOracleProvider`.

A trial plans a route with the VLP, then runs a receding-horizon loop:
propose candidates (diffusion planner, or a straight segment for the
GP-only ablation), select one (global-planner score, or closest endpoint for
the LP-only ablation), advance the robot, and apply interventions when the
robot collides, strays from the route or stalls.
"""
from __future__ import annotations

import enum
import hashlib
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _binio
from .diffusion_lp import (PATCH_SIZE, ConditioningContext, DiffusionLocalPlanner,
                           make_trajectory_dataset, train_noise_predictor)
from .errors import NoTraversablePointOnRoute, SizeTooSmall
from .geo_raster import FeatureRaster, GeoRef, ProbabilityRaster, world_to_cells
from .global_planner import (FocalLossParams, TraversabilityClassifier, WaypointWeightParams,
                             predict_map, select_best)
from .topo_graph import (TopologyGraph, TopoEdge, TopoNode, graph_from_dict, graph_to_dict, localize,
                         shortest_distances, shortest_paths)
from .vlp import (OptimalPath, TagOracleProvider, extract_landmarks_rulebased, plan_route,
                  route_polyline, similarity_matrix)

SPEED = 1.5
DT = 0.25
ROBOT_RADIUS = 0.3
DEVIATION_LIMIT = 5.0
STALL_WINDOW = 30
STALL_EPS = 0.05
INTERVENTION_PENALTY = 10.0
GOAL_TOLERANCE = 1.0
CAPTURE_RADIUS = 1.5
TIMEOUT = 1200.0
EMBED_DIM = 64
BENCH_BETA_COST = 0.001
ROUTE_LENGTH_RANGE = (400.0, 450.0)
MIN_SIZE = 50

LANDMARKS = ("red road post", "solar panel", "gate", "bench", "light pole", "fountain", "statue",
             "kiosk", "sign board", "flag pole", "trash bin", "water tower")
CLUTTER = ("tree", "lamp", "hedge", "bicycle rack", "mailbox", "planter")
SCENES = ("paved path", "lawn", "grass field")
VOCABULARY = LANDMARKS + CLUTTER + SCENES

_WORLD_MAGIC = b"KRWB"


class Mode(str, enum.Enum):
    LP_ONLY = "LP_ONLY"
    GP_ONLY = "GP_ONLY"
    LP_GP = "LP_GP"


class InterventionCause(str, enum.Enum):
    COLLISION = "collision"
    DEVIATION = "deviation"
    STALL = "stall"


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labelled parts."""
    key = "/".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass
class DynamicObstacle:
    loop: np.ndarray  # (M, 2) closed loop of waypoints
    speed: float
    radius: float
    phase: float = 0.0
    kind: str = "pedestrian"

    def __post_init__(self):
        self.loop = np.asarray(self.loop, dtype=np.float64).reshape(-1, 2)
        if not self.radius > 0:
            raise ValueError("obstacle radius must be > 0")
        nxt = np.roll(self.loop, -1, axis=0)
        seg = np.hypot(*(nxt - self.loop).T)
        self._seg = seg
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.perimeter = float(self._cum[-1])

    def position(self, t: float) -> np.ndarray:
        if self.perimeter == 0.0:
            return self.loop[0].copy()
        s = math.fmod(self.phase + self.speed * t, self.perimeter)
        if s < 0:
            s += self.perimeter
        i = int(np.searchsorted(self._cum, s, side="right")) - 1
        i = min(i, len(self._seg) - 1)
        frac = (s - self._cum[i]) / self._seg[i] if self._seg[i] > 0 else 0.0
        nxt = self.loop[(i + 1) % len(self.loop)]
        return self.loop[i] + frac * (nxt - self.loop[i])


@dataclass
class World:
    kind: str
    seed: int
    georef: GeoRef
    traversable: np.ndarray  # (H, W) bool
    features: FeatureRaster
    obstacles: list
    graph: TopologyGraph
    spawn_node: int
    instruction: str
    vocabulary: tuple = VOCABULARY

    def __post_init__(self):
        self.traversable = np.asarray(self.traversable, dtype=bool)
        self.traversable.setflags(write=False)
        if not self.is_traversable(self.graph.pose(self.spawn_node)):
            raise ValueError("spawn must be on a traversable cell")

    @property
    def spawn(self):
        return np.array(self.graph.pose(self.spawn_node))

    def provider(self):
        return TagOracleProvider(self.vocabulary, self.graph.embedding_dim)

    def is_traversable(self, point) -> bool:
        rows, cols, inside = world_to_cells(self.georef, [point])
        return bool(inside[0] and self.traversable[rows[0], cols[0]])

    def traversable_many(self, points):
        rows, cols, inside = world_to_cells(self.georef, points)
        out = np.zeros(len(rows), dtype=bool)
        out[inside] = self.traversable[rows[inside], cols[inside]]
        return out

    def obstacle_state(self, t):
        """(positions (M, 2), radii (M,)) of dynamic obstacles at time t."""
        if not self.obstacles:
            return np.zeros((0, 2)), np.zeros(0)
        pos = np.array([o.position(t) for o in self.obstacles])
        rad = np.array([o.radius for o in self.obstacles])
        return pos, rad

    def free_many(self, points, t, margin=0.0):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        ok = self.traversable_many(pts)
        pos, rad = self.obstacle_state(t)
        if len(pos):
            d = np.hypot(pts[:, None, 0] - pos[None, :, 0], pts[:, None, 1] - pos[None, :, 1])
            ok &= ~np.any(d < rad[None, :] + ROBOT_RADIUS + margin, axis=1)
        return ok

    def patch(self, center, t, size=PATCH_SIZE):
        """Robot-centric occupancy patch (1 = free) on a 1 m lattice."""
        half = (size - 1) / 2.0
        offs = np.arange(size) - half
        gx, gy = np.meshgrid(offs, offs)
        pts = np.column_stack([gx.ravel() + center[0], gy.ravel() + center[1]])
        return self.free_many(pts, t).astype(np.float64)

    def live_probability(self, base: ProbabilityRaster, t, around=None, reach=10.0, margin=0.5,
                         lookahead=4.0, dt_obs=0.5, speed=SPEED, slack=1.5):
        """Base map with current and predicted obstacle footprints set to 0.

        Each obstacle's velocity is observed over the last ``dt_obs`` seconds
        and extrapolated. A predicted position ``tau`` seconds ahead is
        stamped only when the robot, moving at ``speed`` from ``around``,
        would arrive there within ``slack`` seconds of ``tau``.
        """
        pos, rad = self.obstacle_state(t)
        if around is not None and len(pos):
            keep = np.hypot(*(pos - np.asarray(around)).T) < reach + rad
        else:
            keep = np.ones(len(pos), dtype=bool)
        if not np.any(keep):
            return base
        past, _ = self.obstacle_state(t - dt_obs)
        vel = (pos - past) / dt_obs
        taus = np.arange(0.0, lookahead + 1e-9, 0.25)
        discs = []
        for p, v, r, k in zip(pos, vel, rad, keep):
            if not k:
                continue
            discs.append((p, r))
            if around is None:
                continue
            for tau in taus[1:]:
                q = p + tau * v
                arrive = max(float(np.hypot(*(q - around))) - r - ROBOT_RADIUS, 0.0) / speed
                if abs(arrive - tau) <= slack:
                    discs.append((q, r))
        cells = np.array(base.cells)
        g = base.georef
        for (x, y), r in discs:
            rr = r + ROBOT_RADIUS + margin
            c0 = max(int(math.floor((x - rr - g.origin_x) / g.resolution)), 0)
            c1 = min(int(math.floor((x + rr - g.origin_x) / g.resolution)), g.width - 1)
            r0 = max(int(math.floor((y - rr - g.origin_y) / g.resolution)), 0)
            r1 = min(int(math.floor((y + rr - g.origin_y) / g.resolution)), g.height - 1)
            if c0 > c1 or r0 > r1:
                continue
            cx = g.origin_x + (np.arange(c0, c1 + 1) + 0.5) * g.resolution
            cy = g.origin_y + (np.arange(r0, r1 + 1) + 0.5) * g.resolution
            inside = (cx[None, :] - x) ** 2 + (cy[:, None] - y) ** 2 <= rr * rr
            block = cells[r0:r1 + 1, c0:c1 + 1]
            block[inside] = 0.0
        return ProbabilityRaster(g, cells)

    # training data for the traversability classifier
    def traversability_samples(self, n_per_class=2000, seed=0):
        """(features, labels): cells along graph edges (1) vs blocked cells (0).

        Blocked cells may be drawn twice when a near-graph and a uniform
        draw coincide.
        """
        rng = np.random.default_rng(seed)
        H, W = self.traversable.shape
        on_route = np.zeros((H, W), dtype=bool)
        for e in self.graph.edges:
            pts = _segment_points(self.graph.pose(e.u), self.graph.pose(e.v), 0.5)
            rows, cols, inside = world_to_cells(self.georef, pts)
            on_route[rows[inside], cols[inside]] = True
        near = ndimage.binary_dilation(on_route, iterations=4)
        on_route = ndimage.binary_dilation(on_route, iterations=2) & self.traversable
        pos = np.flatnonzero(on_route.ravel())
        pos = rng.choice(pos, size=min(n_per_class, len(pos)), replace=False)
        # half the negatives come from blocked cells close to the graph
        near_neg = np.flatnonzero((near & ~self.traversable).ravel())
        far_neg = np.flatnonzero(~self.traversable.ravel())
        k = min(n_per_class // 2, len(near_neg))
        neg = np.concatenate([rng.choice(near_neg, size=k, replace=False),
                              rng.choice(far_neg, size=min(n_per_class - k, len(far_neg)),
                                         replace=False)])
        flat = self.features.cells.reshape(H * W, -1).astype(np.float64)
        X = np.concatenate([flat[pos], flat[neg]])
        y = np.concatenate([np.ones(len(pos), dtype=np.int64), np.zeros(len(neg), dtype=np.int64)])
        return X, y


def _segment_points(a, b, step):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = max(int(math.ceil(np.hypot(*(b - a)) / step)), 1)
    s = np.linspace(0.0, 1.0, n + 1)
    return a[None, :] + s[:, None] * (b - a)[None, :]


# --------------------------------------------------------------------------
# world generation


def _features_from_classes(classes, signatures, rng, noise=0.3):
    """Per-cell feature vectors: class signature plus Gaussian noise."""
    sig = np.asarray(signatures, dtype=np.float64)
    feats = sig[classes] + rng.normal(0.0, noise, size=classes.shape + (sig.shape[1],))
    return feats.astype(np.float32)


def _image_refs(scene, tags, weight, noise, count, key):
    tag_part = f";tags={','.join(tags)}" if tags else ""
    return [f"scene={scene}{tag_part};weight={weight};noise={noise};var={key}.{k}"
            for k in range(count)]


def _build_graph(poses, edges, refs, provider):
    nodes = [TopoNode(i, tuple(p), np.stack([provider.embed_image(r) for r in refs[i]]), refs[i])
             for i, p in enumerate(poses)]
    es = [TopoEdge(u, v, float(np.hypot(*(np.asarray(poses[u]) - poses[v])))) for u, v in edges]
    return TopologyGraph(nodes, es, provider.dim)


def _chain_length(dist_cache, graph, chain):
    total = 0.0
    for a, b in zip(chain[:-1], chain[1:]):
        if a not in dist_cache:
            dist_cache[a] = shortest_distances(graph, a)
        if b not in dist_cache[a]:
            return math.inf
        total += dist_cache[a][b]
    return total


def _pick_route(graph, rng, candidates, n_landmarks=3, length_range=ROUTE_LENGTH_RANGE,
                tries=4000):
    """Spawn node and ordered landmark nodes whose chained route length fits the range."""
    cache = {}
    ids = np.array(graph.node_ids)
    cand = np.array(candidates)
    best = None
    for _ in range(tries):
        spawn = int(rng.choice(ids))
        chain = [spawn] + [int(v) for v in rng.choice(cand, size=n_landmarks, replace=False)]
        if spawn in chain[1:]:
            continue
        L = _chain_length(cache, graph, chain)
        if not math.isfinite(L):
            continue
        # consecutive landmarks must be at least 40 m apart to avoid trivial legs
        legs = [_chain_length(cache, graph, chain[i:i + 2]) for i in range(n_landmarks)]
        if min(legs) < 40.0:
            continue
        if length_range[0] <= L <= length_range[1]:
            return chain, L
        gap = min(abs(L - length_range[0]), abs(L - length_range[1]))
        if best is None or gap < best[0]:
            best = (gap, chain, L)
    return best[1], best[2]


def _ping_pong(center, direction, half_len):
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return np.array([center - half_len * d, center + half_len * d])


def _crossing_obstacles(graph, chain, rng, spacing=70.0):
    """Pedestrians (and a few vehicles) crossing the landmark route."""
    route = [chain[0]]
    for a, b in zip(chain[:-1], chain[1:]):
        _, pred = shortest_paths(graph, a)
        seg = [b]
        while seg[-1] != a:
            seg.append(pred[seg[-1]])
        route.extend(reversed(seg[:-1]))
    pts = np.array([graph.pose(v) for v in route])
    seglen = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    obstacles = []
    n = max(int(total // spacing), 1)
    for k in range(n):
        s = (k + rng.uniform(0.3, 0.7)) * total / n
        if s < 15.0 or s > total - 15.0:
            continue
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seglen) - 1)
        if seglen[i] == 0:
            continue
        d = (pts[i + 1] - pts[i]) / seglen[i]
        c = pts[i] + (s - cum[i]) * d
        normal = np.array([-d[1], d[0]])
        vehicle = rng.random() < 0.15
        half = rng.uniform(3.0, 5.0) if not vehicle else rng.uniform(6.0, 9.0)
        loop = _ping_pong(c, normal, half)
        speed = rng.uniform(0.4, 0.9) if not vehicle else rng.uniform(1.5, 2.5)
        radius = 0.35 if not vehicle else 0.9
        obstacles.append(DynamicObstacle(loop, speed, radius, rng.uniform(0.0, 4 * half),
                                         "vehicle" if vehicle else "pedestrian"))
    return obstacles


def _structured(size, rng):
    n_roads = max(2, size // 40)
    margin = 10.0
    lines = np.linspace(margin, size - margin, n_roads)
    half_w = 3.5
    centers = np.arange(size) + 0.5
    on_x = np.any(np.abs(centers[:, None] - lines[None, :]) <= half_w, axis=1)
    road = on_x[:, None] | on_x[None, :]  # rows are y, cols are x

    # nodes every ~9 m along each road centerline, intersections shared
    node_index = {}
    poses = []

    def node_at(x, y):
        key = (round(x, 6), round(y, 6))
        if key not in node_index:
            node_index[key] = len(poses)
            poses.append((x, y))
        return node_index[key]

    edges = set()
    lo, hi = lines[0], lines[-1]
    for fixed in lines:
        for horizontal in (True, False):
            stops = [lo]
            for a, b in zip(lines[:-1], lines[1:]):
                k = int(math.ceil((b - a) / 9.0))
                stops += list(a + (b - a) * np.arange(1, k + 1) / k)
            ids = [node_at(s, fixed) if horizontal else node_at(fixed, s) for s in stops]
            for u, v in zip(ids[:-1], ids[1:]):
                edges.add((min(u, v), max(u, v)))
    edges = sorted(edges)
    poses_arr = np.array(poses)

    classes = np.where(road, 0, 1)  # 0 paved, 1 lawn/hedge, 2 post/bench
    blocked = ~road

    # road posts: a few on the centerline (bounded so >= 95% of edges stay clear), rest offset
    def far_from_nodes(x, y, d=3.0):
        return np.min(np.hypot(poses_arr[:, 0] - x, poses_arr[:, 1] - y)) >= d

    n_edges = len(edges)
    n_center = max(int(0.04 * n_edges), 1)
    n_posts = int(size * len(lines) * 2 / 22)
    placed = 0
    attempts = 0
    while placed < n_posts and attempts < 50 * n_posts:
        attempts += 1
        fixed = rng.choice(lines)
        along = rng.uniform(lo + 6, hi - 6)
        if np.min(np.abs(lines - along)) < 6:
            continue
        offset = 0.0 if placed < n_center else rng.choice([-1.0, 1.0]) * rng.uniform(1.0, 2.5)
        if rng.random() < 0.5:
            x, y = along, fixed + offset
        else:
            x, y = fixed + offset, along
        if not far_from_nodes(x, y):
            continue
        r, c = int(math.floor(y)), int(math.floor(x))
        if not road[r, c] or classes[r, c] == 2:
            continue
        classes[r, c] = 2
        blocked[r, c] = True
        placed += 1

    sigs = [[1.0, 0.0, 0.0, 0.2], [0.0, 1.0, 0.2, 0.0], [0.0, 0.2, 1.0, 1.0]]
    feats = _features_from_classes(classes, sigs, rng, noise=0.25)
    return ~blocked, feats, poses, edges


def _unstructured(size, rng):
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=6.0)
    noise = (noise - noise.mean()) / noise.std()
    rough = noise > 1.3  # rough ground patches
    bushes = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(int(size * size / 140)):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(0.9, 1.5)
        bushes |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    blocked = rough | bushes
    border = np.zeros_like(blocked)
    border[:2, :] = border[-2:, :] = border[:, :2] = border[:, -2:] = True
    blocked |= border
    classes = np.where(rough | border, 2, np.where(bushes, 1, 0))  # 0 grass, 1 bush, 2 rough

    clearance = ndimage.distance_transform_edt(~blocked)
    ok = np.argwhere(clearance >= 2.5)
    order = rng.permutation(len(ok))
    min_sep = 8.0
    # dart throwing on a coarse occupancy grid (cell side < min_sep / sqrt 2)
    cell = min_sep / 1.5
    gw = int(size / cell) + 1
    grid = -np.ones((gw, gw), dtype=np.int64)
    poses = []
    for idx in order:
        r, c = ok[idx]
        x, y = c + 0.5, r + 0.5
        gx, gy = int(x / cell), int(y / cell)
        near = grid[max(gy - 2, 0):gy + 3, max(gx - 2, 0):gx + 3]
        if any((x - poses[k][0]) ** 2 + (y - poses[k][1]) ** 2 < min_sep ** 2
               for k in near[near >= 0].tolist()):
            continue
        grid[gy, gx] = len(poses)
        poses.append((x, y))
    P = np.array(poses)
    edges = []
    for i in range(len(P)):
        d = np.hypot(*(P - P[i]).T)
        for j in np.flatnonzero((d > 0) & (d <= 12.5)):
            if j <= i:
                continue
            pts = _segment_points(P[i], P[j], 0.25)
            rr = np.floor(pts[:, 1]).astype(int)
            cc = np.floor(pts[:, 0]).astype(int)
            frac = 1.0 - blocked[rr, cc].mean()
            if frac >= 0.85:
                edges.append((i, int(j)))

    # keep the largest connected component
    adj = {i: [] for i in range(len(P))}
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen, best = set(), []
    for s in range(len(P)):
        if s in seen:
            continue
        comp, stack = [], [s]
        seen.add(s)
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if len(comp) > len(best):
            best = comp
    keep = sorted(best)
    remap = {old: new for new, old in enumerate(keep)}
    poses = [poses[i] for i in keep]
    edges = sorted((remap[u], remap[v]) for u, v in edges if u in remap and v in remap)

    sigs = [[1.0, 0.1, 0.0, 0.3], [0.1, 1.0, 0.6, 0.0], [0.2, 0.3, 1.0, 0.9]]
    feats = _features_from_classes(classes, sigs, rng, noise=0.25)
    return ~blocked, feats, poses, edges


def generate_world(kind: str = "structured", size: int = 200, seed: int = 0) -> World:
    """Deterministic synthetic park of ``size x size`` one-metre cells."""
    if kind not in ("structured", "unstructured"):
        raise ValueError(f"unknown world kind {kind!r}")
    if size < MIN_SIZE:
        raise SizeTooSmall(f"size {size} < {MIN_SIZE}")
    rng = np.random.default_rng(derive_seed("world", kind, size, seed))
    if kind == "structured":
        traversable, feats, poses, edges = _structured(size, rng)
        scene, lm_weight, lm_noise, bg_noise = "paved path", 0.85, 0.1, 0.3
    else:
        traversable, feats, poses, edges = _unstructured(size, rng)
        scene, lm_weight, lm_noise, bg_noise = "grass field", 0.4, 0.1, 0.12

    provider = TagOracleProvider(VOCABULARY, EMBED_DIM)
    plain_refs = {}
    for i in range(len(poses)):
        if kind == "structured":
            tag = [CLUTTER[int(rng.integers(len(CLUTTER)))]]
            plain_refs[i] = _image_refs(scene, tag, 0.6, bg_noise, 2, f"{seed}.{i}")
        else:
            plain_refs[i] = _image_refs(scene, [], 0.0, bg_noise, 2, f"{seed}.{i}")
    skeleton = _build_graph(poses, edges, plain_refs, provider)

    chain, _ = _pick_route(skeleton, rng, skeleton.node_ids)
    names = list(rng.permutation(len(LANDMARKS)))
    route_names = [LANDMARKS[k] for k in names[:3]]
    distractor_names = [LANDMARKS[k] for k in names[3:3 + (6 if kind == "structured" else 2)]]
    refs = dict(plain_refs)
    for node, name in zip(chain[1:], route_names):
        refs[node] = _image_refs(scene, [name], lm_weight, lm_noise, 2, f"{seed}.{node}")
    free_nodes = [v for v in skeleton.node_ids if v not in chain]
    for node, name in zip(rng.choice(free_nodes, size=len(distractor_names), replace=False),
                          distractor_names):
        refs[int(node)] = _image_refs(scene, [name], lm_weight, lm_noise, 2, f"{seed}.{node}")
    graph = _build_graph(poses, edges, refs, provider)

    obstacles = _crossing_obstacles(graph, chain, rng)
    instruction = "go to the " + " then the ".join(route_names)
    georef = GeoRef(0.0, 0.0, 1.0, size, size)
    return World(kind, seed, georef, traversable, FeatureRaster(georef, feats), obstacles, graph,
                 chain[0], instruction)


def mean_pairwise_similarity(graph: TopologyGraph) -> float:
    means = np.stack([graph.nodes[i].embeddings.mean(axis=0) for i in graph.node_ids])
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    G = means @ means.T
    n = len(G)
    return float((G.sum() - np.trace(G)) / (n * (n - 1)))


def edge_clear_fraction(world: World) -> float:
    """Fraction of graph edges whose straight segment stays on traversable cells."""
    clear = 0
    for e in world.graph.edges:
        pts = _segment_points(world.graph.pose(e.u), world.graph.pose(e.v), 0.1)
        clear += bool(np.all(world.traversable_many(pts)))
    return clear / max(len(world.graph.edges), 1)


def save_world(world: World, path) -> None:
    meta = {
        "kind": world.kind, "seed": world.seed, "spawn_node": world.spawn_node,
        "instruction": world.instruction, "vocabulary": list(world.vocabulary),
        "georef": [world.georef.origin_x, world.georef.origin_y, world.georef.resolution,
                   world.georef.width, world.georef.height],
        "obstacles": [{"speed": o.speed, "radius": o.radius, "phase": o.phase, "kind": o.kind}
                      for o in world.obstacles],
        "graph": graph_to_dict(world.graph),
    }
    arrays = {"traversable": world.traversable.astype(np.uint8), "features": world.features.cells}
    for i, o in enumerate(world.obstacles):
        arrays[f"loop{i}"] = o.loop
    _binio.write_bundle(path, _WORLD_MAGIC, 1, meta, arrays)


def load_world(path) -> World:
    _, meta, arrays = _binio.read_bundle(path, _WORLD_MAGIC)
    ox, oy, res, w, h = meta["georef"]
    georef = GeoRef(ox, oy, res, int(w), int(h))
    obstacles = [DynamicObstacle(arrays[f"loop{i}"], o["speed"], o["radius"], o["phase"], o["kind"])
                 for i, o in enumerate(meta["obstacles"])]
    return World(meta["kind"], meta["seed"], georef, arrays["traversable"].astype(bool),
                 FeatureRaster(georef, arrays["features"]), obstacles,
                 graph_from_dict(meta["graph"]), meta["spawn_node"], meta["instruction"],
                 tuple(meta["vocabulary"]))


# --------------------------------------------------------------------------
# robot, route tracking and interventions


@dataclass(frozen=True)
class RobotState:
    pose: tuple
    heading: float = 0.0
    time: float = 0.0
    odometer: float = 0.0
    interventions: int = 0

    @property
    def position(self):
        return np.array(self.pose, dtype=np.float64)


def step(world: World, robot: RobotState, selected, dt: float = DT, speed: float = SPEED) -> RobotState:
    """Advance ``speed * dt`` meters along the selected world-frame trajectory.

    Obstacles are functions of time, so advancing the clock moves them.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    pts = np.vstack([robot.position, np.asarray(selected, dtype=np.float64).reshape(-1, 2)])
    remaining = speed * dt
    pos = pts[0].copy()
    for nxt in pts[1:]:
        seg = nxt - pos
        L = float(np.hypot(*seg))
        if L == 0.0:
            continue
        if L >= remaining:
            pos = pos + seg * (remaining / L)
            remaining = 0.0
            break
        pos = nxt.copy()
        remaining -= L
    disp = pos - robot.position
    moved = float(np.hypot(*disp))
    heading = math.atan2(disp[1], disp[0]) if moved > 0 else robot.heading
    return RobotState((float(pos[0]), float(pos[1])), heading, robot.time + dt,
                      robot.odometer + moved, robot.interventions)


def _project(points, a, b):
    ab = b - a
    L2 = float(ab @ ab)
    if L2 == 0.0:
        return np.zeros(len(points))
    return np.clip(((points - a) @ ab) / L2, 0.0, 1.0)


def _point_segment_distance(p, a, b):
    u = _project(np.atleast_2d(p), a, b)[0]
    q = a + u * (b - a)
    return float(np.hypot(*(np.asarray(p) - q)))


def route_lower_bound(route, capture_radius=CAPTURE_RADIUS, goal_tolerance=GOAL_TOLERANCE) -> float:
    """Certified lower bound on any path from ``route[0]`` through the capture discs.

    The polyline length is convex in the vertex positions, so moving vertex i
    anywhere within radius r lowers it by at most ``r * |grad_i|``; for an
    interior vertex the gradient norm is ``|d_in - d_out|`` and for the goal
    it is 1.
    """
    pts = np.asarray(route, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    seg = np.diff(pts, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    units = np.zeros_like(seg)
    nz = lens > 0
    units[nz] = seg[nz] / lens[nz, None]
    slack = 0.0
    for i in range(1, len(pts) - 1):
        slack += capture_radius * float(np.hypot(*(units[i - 1] - units[i])))
    slack += goal_tolerance if lens[-1] > 0 else 0.0
    return max(float(lens.sum()) - slack, 0.0)


class RouteTracker:
    """Progress along the planned route polyline.

    Route vertices must be reached in order: vertex k counts as captured
    when a robot position comes within ``capture_radius`` of it. Also keeps
    the distance-to-subgoal history used for stall detection.
    """

    def __init__(self, route, capture_radius=CAPTURE_RADIUS, goal_tolerance=GOAL_TOLERANCE):
        self.route = np.asarray(route, dtype=np.float64).reshape(-1, 2)
        self.capture_radius = capture_radius
        self.goal_tolerance = goal_tolerance
        seg = np.diff(self.route, axis=0)
        self.cum = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
        self.k = 1 if len(self.route) > 1 else 0
        self.history = []

    @property
    def last(self):
        return len(self.route) - 1

    @property
    def subgoal(self):
        return self.route[self.k]

    @property
    def goal(self):
        return self.route[-1]

    def reached_goal(self, pos):
        return self.k == self.last and np.hypot(*(np.asarray(pos) - self.goal)) <= self.goal_tolerance

    def capture(self, pos):
        pos = np.asarray(pos, dtype=np.float64)
        changed = False
        while self.k < self.last and np.hypot(*(pos - self.route[self.k])) <= self.capture_radius:
            self.k += 1
            changed = True
        if changed:
            self.history.clear()

    def capture_along(self, a, b):
        """Capture vertices passed within the radius by the straight move a -> b."""
        changed = False
        while (self.k < self.last and
               _point_segment_distance(self.route[self.k], np.asarray(a), np.asarray(b))
               <= self.capture_radius):
            self.k += 1
            changed = True
        if changed:
            self.history.clear()

    def record(self, pos):
        self.history.append(float(np.hypot(*(np.asarray(pos) - self.subgoal))))

    def deviation(self, pos):
        """Distance from ``pos`` to the route polyline."""
        pos = np.asarray(pos, dtype=np.float64)
        a, b = self.route[:-1], self.route[1:]
        ab = b - a
        L2 = np.einsum("ij,ij->i", ab, ab)
        u = np.einsum("ij,ij->i", pos - a, ab) / np.where(L2 > 0, L2, 1.0)
        q = a + np.clip(u, 0.0, 1.0)[:, None] * ab
        return float(np.min(np.hypot(q[:, 0] - pos[0], q[:, 1] - pos[1])))

    def progress(self, pos):
        """Arc length of the projection onto the active segment."""
        a, b = self.route[max(self.k - 1, 0)], self.route[self.k]
        u = _project(np.atleast_2d(pos), a, b)[0]
        return self.cum[max(self.k - 1, 0)] + u * (self.cum[self.k] - self.cum[max(self.k - 1, 0)])

    def point_at(self, s):
        s = np.asarray(s, dtype=np.float64)
        i = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.route) - 2)
        L = self.cum[i + 1] - self.cum[i]
        frac = np.where(L > 0, (s - self.cum[i]) / np.where(L > 0, L, 1.0), 0.0)
        return self.route[i] + frac[:, None] * (self.route[i + 1] - self.route[i])


def detect_intervention(world: World, robot: RobotState, tracker: RouteTracker,
                        window: int = STALL_WINDOW):
    pos = robot.position
    if not world.is_traversable(pos):
        return InterventionCause.COLLISION
    obs, rad = world.obstacle_state(robot.time)
    if len(obs) and np.any(np.hypot(*(obs - pos).T) < rad + ROBOT_RADIUS):
        return InterventionCause.COLLISION
    if len(tracker.route) > 1 and tracker.deviation(pos) > DEVIATION_LIMIT:
        return InterventionCause.DEVIATION
    h = tracker.history
    if len(h) > window and h[-1 - window] - h[-1] < STALL_EPS:
        return InterventionCause.STALL
    return None


def apply_intervention(world: World, robot: RobotState, tracker: RouteTracker,
                       penalty: float = INTERVENTION_PENALTY, resolution: float = 0.05,
                       clear_ahead: float = 1.0) -> RobotState:
    """Operator surrogate: carry the robot back onto the route.

    The robot is placed at the first free route point at or beyond its
    current progress that has ``clear_ahead`` meters of free route after
    it, so an obstacle sitting on the route is passed rather than
    re-encountered. The jump distance is added to the odometer.
    """
    pos = robot.position
    s0 = tracker.progress(pos)
    s = np.arange(s0, tracker.cum[-1] + resolution, resolution)
    s = np.minimum(s, tracker.cum[-1])
    pts = tracker.point_at(s)
    free = world.free_many(pts, robot.time, margin=0.2)
    # the landing point needs a clear stretch of route ahead of it
    ahead = max(int(round(clear_ahead / resolution)), 1)
    blocked = np.cumsum(~free)
    stop = np.minimum(np.arange(len(free)) + ahead, len(free) - 1)
    start_blocked = np.concatenate([[0], blocked[:-1]])
    ok = (blocked[stop] - start_blocked) == 0
    if not np.any(ok):
        ok = free
    if not np.any(ok):
        raise NoTraversablePointOnRoute("no free point on the remaining route")
    target = pts[int(np.argmax(ok))]
    tracker.capture_along(pos, target)
    tracker.history.clear()
    jump = float(np.hypot(*(target - pos)))
    return RobotState((float(target[0]), float(target[1])), robot.heading, robot.time + penalty,
                      robot.odometer + jump, robot.interventions + 1)


# --------------------------------------------------------------------------
# trials


@dataclass
class PolicyConfig:
    mode: Mode = Mode.LP_GP
    beta_cost: float = BENCH_BETA_COST
    weight_params: WaypointWeightParams = field(default_factory=WaypointWeightParams)
    n_candidates: int = 8
    dt: float = DT
    speed: float = SPEED
    timeout: float = TIMEOUT
    stall_window: int = STALL_WINDOW
    planner: DiffusionLocalPlanner | None = None
    probability_map: ProbabilityRaster | None = None
    instruction: str | None = None
    hop_window: int = 3
    inflate: int = 1
    log_events: bool = True

    def __post_init__(self):
        self.mode = Mode(self.mode)


@dataclass
class TrialResult:
    interventions: int
    actual_path_length: float
    optimal_path_length: float
    sim_time: float
    reached_goal: bool
    events: list = field(default_factory=list)
    mode: str = ""
    world_kind: str = ""
    seed: int = 0
    route: list = field(default_factory=list)
    causes: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def summary(self):
        return {"mode": self.mode, "world": self.world_kind, "seed": self.seed,
                "interventions": self.interventions, "actual_path_length": self.actual_path_length,
                "optimal_path_length": self.optimal_path_length, "sim_time": self.sim_time,
                "reached_goal": self.reached_goal, "causes": self.causes, "route": self.route}


def default_planner(seed=0, n_samples=2000, bend=3.5, epochs=150) -> DiffusionLocalPlanner:
    data = make_trajectory_dataset(n_samples, seed=derive_seed("lp-data", seed), bend=bend)
    return train_noise_predictor(data, epochs=epochs, seed=derive_seed("lp-fit", seed))


def world_probability_map(world: World, seed=0, params=FocalLossParams(), epochs=200, hidden_units=16):
    """Train the per-cell classifier on this world and predict its map."""
    X, y = world.traversability_samples(seed=derive_seed("gp-data", seed))
    model = TraversabilityClassifier(params.lambda_, params.gamma, hidden_units=hidden_units,
                                     epochs=epochs,
                                     random_state=derive_seed("gp-fit", seed) % (2 ** 32))
    model.fit(X, y)
    return predict_map(model, world.features), model


def inflate_map(raster: ProbabilityRaster, cells: int = 1) -> ProbabilityRaster:
    """Each cell takes the minimum over its (2c+1)^2 neighbourhood (robot footprint margin)."""
    out = ndimage.minimum_filter(np.asarray(raster.cells), size=2 * cells + 1, mode="nearest")
    return ProbabilityRaster(raster.georef, out)


def plan_world_route(world: World, instruction=None, beta_cost=BENCH_BETA_COST) -> OptimalPath:
    landmarks = extract_landmarks_rulebased(instruction or world.instruction)
    S = similarity_matrix(world.graph, landmarks, world.provider())
    return plan_route(world.graph, S, None, world.spawn_node, beta_cost)


def straight_candidate(pos, subgoal, n_waypoints=8, spacing=0.5):
    g = np.asarray(subgoal, dtype=np.float64) - pos
    d = float(np.hypot(*g))
    if d == 0:
        return np.tile(pos, (n_waypoints, 1))
    step_len = min(spacing, d / n_waypoints)
    s = step_len * np.arange(1, n_waypoints + 1)
    return pos + s[:, None] * (g / d)[None, :]


def run_trial(world: World, policy: PolicyConfig, seed: int = 0) -> TrialResult:
    """One navigation episode; a pure function of (world, policy, seed)."""
    wall0 = _time.perf_counter()
    mode = policy.mode
    uses_lp = mode in (Mode.LP_ONLY, Mode.LP_GP)
    uses_gp = mode in (Mode.GP_ONLY, Mode.LP_GP)
    planner = policy.planner
    if uses_lp and planner is None:
        planner = default_planner(seed)
    base_map = policy.probability_map
    if uses_gp and base_map is None:
        base_map, _ = world_probability_map(world, seed)

    if uses_gp and policy.inflate:
        base_map = inflate_map(base_map, policy.inflate)

    path = plan_world_route(world, policy.instruction, policy.beta_cost)
    route = route_polyline(world.graph, path)
    tracker = RouteTracker(route)
    optimal = route_lower_bound(route)
    provider = world.provider()
    node_ids = world.graph.node_ids
    node_pos = np.array([world.graph.pose(i) for i in node_ids])

    start = route[0]
    heading = math.atan2(*(route[min(1, len(route) - 1)] - start)[::-1]) if len(route) > 1 else 0.0
    robot = RobotState((float(start[0]), float(start[1])), heading)
    located = path.nodes[0]
    events = []
    causes = {c.value: 0 for c in InterventionCause}
    cycle = 0
    reached = tracker.reached_goal(robot.position)
    while not reached and robot.time < policy.timeout:
        pos = robot.position
        tracker.capture(pos)
        if tracker.reached_goal(pos):
            reached = True
            break
        sub = tracker.subgoal

        # localization against the topology graph from a simulated view
        nearest = node_ids[int(np.argmin(np.hypot(*(node_pos - pos).T)))]
        obs = provider.embed_image(world.graph.nodes[nearest].image_refs[0] + f";var=obs{seed}.{cycle}")
        located = localize(world.graph, obs, prior=located, hop_window=policy.hop_window)

        if uses_lp:
            ctx = ConditioningContext(world.patch(pos, robot.time), sub - pos,
                                      np.asarray(world.graph.pose(located)))
            cands = planner.sample(ctx, seed=(seed, cycle)).candidates + pos
        else:
            cands = straight_candidate(pos, sub)[None]

        scores = None
        if uses_gp:
            live = world.live_probability(base_map, robot.time, around=pos)
            idx, _, scores = select_best(cands, live, pos, sub, policy.weight_params,
                                         return_scores=True)
        else:
            d = np.hypot(cands[:, -1, 0] - sub[0], cands[:, -1, 1] - sub[1])
            idx = int(np.argmin(d))

        robot = step(world, robot, cands[idx], policy.dt, policy.speed)
        tracker.capture(robot.position)
        tracker.record(robot.position)
        cause = detect_intervention(world, robot, tracker, policy.stall_window)
        before = robot.pose
        if cause is not None:
            causes[cause.value] += 1
            robot = apply_intervention(world, robot, tracker)
        if policy.log_events:
            ev = {"t": robot.time, "pose": [robot.pose[0], robot.pose[1]], "mode": mode.value,
                  "selected_candidate": idx, "score": None if scores is None else scores[idx],
                  "subgoal": int(path.nodes[tracker.k]), "localized_node": int(located)}
            if scores is not None:
                ev["scores"] = scores
            if cause is not None:
                ev["intervention_cause"] = cause.value
                ev["intervention_pose"] = [before[0], before[1]]
            events.append(ev)
        cycle += 1
        reached = tracker.reached_goal(robot.position)

    return TrialResult(robot.interventions, robot.odometer, optimal, robot.time, bool(reached),
                       events, mode.value, world.kind, int(seed), [int(v) for v in path.nodes],
                       causes, _time.perf_counter() - wall0)
