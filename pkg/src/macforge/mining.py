"""Training-tuple mining from 3D-reconstruction visibility graphs.

A scene cluster is a bipartite graph between images (with known cameras)
and 3D points. Queries are drawn per cluster; a hard positive comes from
the camera-neighborhood pool by one of three methods (m1 descriptor
distance, m2 co-observation count, m3 random under overlap and scale
constraints); hard negatives are the most similar descriptors from other
clusters, either unrestricted (N1) or at most one per cluster (N2).

All argmin/argmax ties break toward the lower image-id so every selection
is reproducible and oracle-comparable.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .ioutil import FormatError
from .numeric import SeededStream


class GraphError(ValueError):
    """Visibility graph violates a structural invariant."""


class MiningError(ValueError):
    """Tuple mining cannot proceed for a query."""


class NoPositiveError(MiningError):
    """No feasible positive exists for the query."""


class NoSharedPointsError(MiningError):
    """Scale change is undefined: the image pair co-observes nothing."""


class GeometryError(MiningError):
    """A shared point has non-positive depth in one of the cameras."""


class ShortListError(MiningError):
    """Fewer negative candidates than requested."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: rows of `rotation` are the camera axes in world
    coordinates (third row = optical axis), so camera coordinates of a
    world point P are rotation @ (P - center)."""

    center: np.ndarray
    rotation: np.ndarray
    focal: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64)
        rotation = np.asarray(self.rotation, dtype=np.float64)
        if center.shape != (3,) or rotation.shape != (3, 3):
            raise GraphError("camera needs a 3-vector center and 3x3 rotation")
        if np.max(np.abs(rotation @ rotation.T - np.eye(3))) > 1e-9:
            raise GraphError("camera rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise GraphError("camera rotation must have determinant +1")
        if not self.focal > 0:
            raise GraphError("camera focal must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "focal", float(self.focal))

    def depth_of(self, point: np.ndarray) -> float:
        return float(self.rotation[2] @ (np.asarray(point) - self.center))


@dataclass
class VisibilityGraph:
    """One reconstructed cluster: images with cameras, points, and the
    image-observes-point edge set."""

    cluster_id: str
    images: dict  # image-id -> Camera
    points: dict  # point-id -> (3,) world position
    edges: set   # of (image-id, point-id)

    def validate(self) -> None:
        for img, pid in self.edges:
            if img not in self.images:
                raise GraphError(f"edge references unknown image {img!r}")
            if pid not in self.points:
                raise GraphError(f"edge references unknown point {pid!r}")
        observers = {pid: 0 for pid in self.points}
        for _, pid in self.edges:
            observers[pid] += 1
        thin = sorted(pid for pid, n in observers.items() if n < 2)
        if thin:
            raise GraphError(
                f"points observed by fewer than 2 images: {thin[:5]}"
                + ("..." if len(thin) > 5 else ""))

    def observation_map(self) -> dict:
        """image-id -> frozenset of observed point-ids (cached)."""
        cache = self.__dict__.get("_obs_cache")
        if cache is None:
            sets = {img: set() for img in self.images}
            for img, pid in self.edges:
                sets[img].add(pid)
            cache = {img: frozenset(s) for img, s in sets.items()}
            self.__dict__["_obs_cache"] = cache
        return cache


@dataclass(frozen=True)
class MiningConfig:
    pool_size: int = 100
    inlier_overlap: float = 0.2
    scale_threshold: float = 1.5
    negatives: int = 5
    candidate_negatives_per_cluster: int = 20

    def __post_init__(self):
        if self.pool_size < 1 or self.negatives < 1:
            raise ValueError("pool_size and negatives must be >= 1")
        if not 0 < self.inlier_overlap <= 1:
            raise ValueError("inlier_overlap must lie in (0, 1]")
        if self.scale_threshold < 1:
            raise ValueError("scale_threshold must be >= 1")


@dataclass(frozen=True)
class TrainingTuple:
    query: str
    positive: str
    negatives: tuple

    def __post_init__(self):
        if self.positive == self.query:
            raise MiningError("positive must differ from the query")
        object.__setattr__(self, "negatives", tuple(self.negatives))


def observed_points(g: VisibilityGraph, image_id: str) -> frozenset:
    """Point-ids with an edge to the image."""
    obs = g.observation_map()
    if image_id not in obs:
        raise GraphError(f"unknown image {image_id!r}")
    return obs[image_id]


def candidate_pool(g: VisibilityGraph, query: str, k: int) -> list:
    """The k cluster images with camera centers closest to the query's."""
    if query not in g.images:
        raise GraphError(f"unknown image {query!r}")
    qc = g.images[query].center
    ranked = sorted(
        (float(np.linalg.norm(cam.center - qc)), img)
        for img, cam in g.images.items() if img != query
    )
    return [img for _, img in ranked[:k]]


def positive_m1(query: str, pool: list, descriptors: dict) -> str:
    """Pool member with the smallest descriptor distance to the query."""
    if not pool:
        raise NoPositiveError(f"empty candidate pool for {query!r}")
    dq = np.asarray(descriptors[query], dtype=np.float64)
    best = min(
        (float(np.linalg.norm(np.asarray(descriptors[i], dtype=np.float64) - dq)), i)
        for i in pool
    )
    return best[1]


def positive_m2(query: str, pool: list, g: VisibilityGraph) -> str:
    """Pool member co-observing the most 3D points with the query."""
    if not pool:
        raise NoPositiveError(f"empty candidate pool for {query!r}")
    pq = observed_points(g, query)
    best = min((-len(pq & observed_points(g, i)), i) for i in pool)
    return best[1]


def scale_change(g: VisibilityGraph, i: str, q: str) -> float:
    """Relative scale between two views of their shared points.

    Uses focal length over median shared-point depth as the scale of each
    view; the result is the larger of the ratio and its inverse, so it is
    symmetric and >= 1.
    """
    shared = observed_points(g, i) & observed_points(g, q)
    if not shared:
        raise NoSharedPointsError(f"{i!r} and {q!r} share no points")
    scales = {}
    for img in (i, q):
        cam = g.images[img]
        depths = np.array([cam.depth_of(g.points[pid]) for pid in sorted(shared)])
        if np.min(depths) <= 0:
            raise GeometryError(f"shared point behind camera {img!r}")
        scales[img] = cam.focal / float(np.median(depths))
    r = scales[i] / scales[q]
    return max(r, 1.0 / r)


def positive_m3(query: str, pool: list, g: VisibilityGraph, cfg: MiningConfig,
                stream: SeededStream) -> str:
    """Uniform draw over pool members with enough co-observed points and a
    bounded scale change; the feasible set is enumerated in ascending
    image-id order."""
    if not pool:
        raise NoPositiveError(f"empty candidate pool for {query!r}")
    pq = observed_points(g, query)
    feasible = []
    for i in sorted(pool):
        shared = pq & observed_points(g, i)
        if not pq or len(shared) / len(pq) < cfg.inlier_overlap:
            continue
        if scale_change(g, i, query) > cfg.scale_threshold:
            continue
        feasible.append(i)
    if not feasible:
        raise NoPositiveError(f"no feasible positive for {query!r}")
    return feasible[int(stream.integers(0, len(feasible)))]


def mine_negatives(query: str, descriptors: dict, cluster_of, n: int,
                   variant: str = "N2") -> list:
    """Most-similar images from other clusters, most similar first.

    N1 takes the top n outright; N2 greedily keeps at most one image per
    cluster. Ties in similarity break toward the lower image-id.
    """
    if variant not in ("N1", "N2"):
        raise ValueError(f"unknown negative variant {variant!r}")
    q_cluster = cluster_of(query)
    dq = np.asarray(descriptors[query], dtype=np.float64)
    ranked = sorted(
        (-float(np.asarray(vec, dtype=np.float64) @ dq), img)
        for img, vec in descriptors.items()
        if cluster_of(img) != q_cluster
    )
    chosen = []
    seen_clusters = set()
    for _, img in ranked:
        if variant == "N2":
            c = cluster_of(img)
            if c in seen_clusters:
                continue
            seen_clusters.add(c)
        chosen.append(img)
        if len(chosen) == n:
            return chosen
    raise ShortListError(
        f"need {n} negatives for {query!r}, only {len(chosen)} available"
        f" (deficit {n - len(chosen)})")


def choose_queries(g: VisibilityGraph, stream: SeededStream) -> list:
    """Per-cluster query sample: 10% of the cluster (rounded up) for
    clusters of at most 300 images, else 30."""
    ids = sorted(g.images)
    size = len(ids)
    count = math.ceil(0.10 * size) if size <= 300 else 30
    order = stream.permutation(size)
    return sorted(ids[int(j)] for j in order[:count])


def build_tuples(graphs: list, descriptors: dict, cfg: MiningConfig,
                 positive_method: str = "m3", negative_variant: str = "N2",
                 stream: SeededStream | None = None,
                 query_clusters: set | None = None,
                 all_images_as_queries: bool = False):
    """Mine one tuple per feasible query across all clusters.

    Returns (tuples, skipped) where skipped lists (query_id, reason) for
    queries with no feasible positive or too few negative candidates. The
    candidate-negative universe holds, per cluster, a fixed seeded sample
    of candidate_negatives_per_cluster images plus the cluster's queries
    and chosen positives. query_clusters, when given, restricts which
    clusters contribute queries; every cluster still supplies negatives,
    which lets a small held-out split borrow negatives from the rest.
    all_images_as_queries skips the per-cluster query subsample and mines
    a tuple for every image; whitening fits need the denser pair set to
    estimate a stable intraclass scatter, training does not.
    """
    if positive_method not in ("m1", "m2", "m3"):
        raise ValueError(f"unknown positive method {positive_method!r}")
    if stream is None:
        stream = SeededStream(0)
    by_cluster = {g.cluster_id: g for g in graphs}
    cluster_ids = sorted(by_cluster)
    if query_clusters is None:
        query_cluster_ids = cluster_ids
    else:
        wanted = set(query_clusters)
        query_cluster_ids = [c for c in cluster_ids if c in wanted]
    cluster_of_img = {}
    for g in graphs:
        for img in g.images:
            cluster_of_img[img] = g.cluster_id

    queries = {}
    for cid in query_cluster_ids:
        if all_images_as_queries:
            queries[cid] = sorted(by_cluster[cid].images)
        else:
            queries[cid] = choose_queries(by_cluster[cid],
                                          stream.derive("queries", cid))

    positives = {}
    skipped = []
    for cid in query_cluster_ids:
        g = by_cluster[cid]
        for q in queries[cid]:
            pool = candidate_pool(g, q, cfg.pool_size)
            try:
                if positive_method == "m1":
                    positives[q] = positive_m1(q, pool, descriptors)
                elif positive_method == "m2":
                    positives[q] = positive_m2(q, pool, g)
                else:
                    positives[q] = positive_m3(q, pool, g, cfg,
                                               stream.derive("m3", q))
            except NoPositiveError as exc:
                skipped.append((q, str(exc)))

    universe = negative_universe(graphs, queries, positives, cfg, stream)
    cluster_of = cluster_of_img.__getitem__

    tuples = []
    for cid in query_cluster_ids:
        for q in queries[cid]:
            if q not in positives:
                continue
            cand = {i: descriptors[i] for i in universe}
            cand[q] = descriptors[q]
            try:
                negs = mine_negatives(q, cand, cluster_of, cfg.negatives,
                                      negative_variant)
            except ShortListError as exc:
                skipped.append((q, str(exc)))
                continue
            tuples.append(TrainingTuple(q, positives[q], tuple(negs)))
    return tuples, skipped


def negative_universe(graphs: list, queries: dict, positives: dict,
                      cfg: MiningConfig, stream: SeededStream) -> list:
    """Fixed candidate-negative id list: per cluster, a seeded sample plus
    that cluster's queries and positives (sorted, de-duplicated)."""
    universe = set()
    for g in sorted(graphs, key=lambda g: g.cluster_id):
        ids = sorted(g.images)
        take = min(cfg.candidate_negatives_per_cluster, len(ids))
        order = stream.derive("negpool", g.cluster_id).permutation(len(ids))
        universe.update(ids[int(j)] for j in order[:take])
        universe.update(queries.get(g.cluster_id, ()))
        universe.update(p for q, p in positives.items()
                        if q in queries.get(g.cluster_id, ()))
    return sorted(universe)


class TupleMiner:
    """Owns the fixed mining state across a training run.

    Queries, positives, and the candidate-negative universe are chosen once
    at construction (positives never change afterwards); remine() refreshes
    descriptors with the caller's embedding and re-selects only negatives.
    """

    def __init__(self, graphs, images: dict, cfg: MiningConfig, embed,
                 positive_method: str = "m3", negative_variant: str = "N2",
                 stream: SeededStream | None = None):
        self.graphs = list(graphs)
        self.images = images
        self.cfg = cfg
        self.positive_method = positive_method
        self.negative_variant = negative_variant
        self.stream = stream if stream is not None else SeededStream(0)
        self.cluster_of = {}
        for g in self.graphs:
            for img in g.images:
                self.cluster_of[img] = g.cluster_id
        descriptors = {img: embed(images[img]) for img in sorted(self.cluster_of)}
        self.tuples, self.skipped = build_tuples(
            self.graphs, descriptors, cfg, positive_method, negative_variant,
            self.stream)
        queries = {}
        positives = {}
        for t in self.tuples:
            cid = self.cluster_of[t.query]
            queries.setdefault(cid, []).append(t.query)
            positives[t.query] = t.positive
        self._queries = queries
        self._positives = positives
        self.universe = negative_universe(self.graphs, queries, positives,
                                          cfg, self.stream)

    def current_tuples(self) -> list:
        return list(self.tuples)

    def image(self, image_id: str):
        return self.images[image_id]

    def remine(self, embed) -> None:
        """Re-select negatives under a fresh embedding; positives stay."""
        ids = sorted(set(self.universe) | set(self._positives))
        descriptors = {i: embed(self.images[i]) for i in ids}
        cluster_of = self.cluster_of.__getitem__
        new_tuples = []
        for t in self.tuples:
            cand = {i: descriptors[i] for i in self.universe}
            cand[t.query] = descriptors[t.query]
            negs = mine_negatives(t.query, cand, cluster_of,
                                  self.cfg.negatives, self.negative_variant)
            new_tuples.append(TrainingTuple(t.query, t.positive, tuple(negs)))
        self.tuples = new_tuples


# ---------------------------------------------------------------------------
# Scene and tuple files
# ---------------------------------------------------------------------------


def save_scene(path, g: VisibilityGraph) -> None:
    doc = {
        "cluster_id": g.cluster_id,
        "images": [
            {"id": img,
             "camera": {
                 "center": [float(v) for v in cam.center],
                 "rotation": [float(v) for v in cam.rotation.reshape(-1)],
                 "focal": float(cam.focal),
             }}
            for img, cam in sorted(g.images.items())
        ],
        "points": [
            {"id": pid, "xyz": [float(v) for v in xyz]}
            for pid, xyz in sorted(g.points.items())
        ],
        "edges": sorted([img, pid] for img, pid in g.edges),
    }
    with open(os.fspath(path), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_scene(path) -> VisibilityGraph:
    try:
        with open(os.fspath(path)) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"scene file is not valid JSON: {exc}") from exc
    try:
        images = {}
        for rec in doc["images"]:
            cam = rec["camera"]
            images[rec["id"]] = Camera(
                np.array(cam["center"], dtype=np.float64),
                np.array(cam["rotation"], dtype=np.float64).reshape(3, 3),
                float(cam["focal"]))
        points = {rec["id"]: np.array(rec["xyz"], dtype=np.float64)
                  for rec in doc["points"]}
        edges = {(img, pid) for img, pid in doc["edges"]}
        g = VisibilityGraph(str(doc["cluster_id"]), images, points, edges)
    except (KeyError, TypeError, ValueError, GraphError) as exc:
        raise FormatError(f"malformed scene file: {exc}") from exc
    try:
        g.validate()
    except GraphError as exc:
        raise FormatError(f"invalid scene graph: {exc}") from exc
    return g


def save_tuples(path, tuples: list) -> None:
    with open(os.fspath(path), "w") as f:
        for t in tuples:
            json.dump({"q": t.query, "m": t.positive,
                       "negatives": list(t.negatives)}, f, sort_keys=True)
            f.write("\n")


def load_tuples(path) -> list:
    out = []
    with open(os.fspath(path)) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                out.append(TrainingTuple(doc["q"], doc["m"],
                                         tuple(doc["negatives"])))
            except (json.JSONDecodeError, KeyError, TypeError,
                    MiningError) as exc:
                raise FormatError(f"bad tuple on line {lineno}: {exc}") from exc
    return out
