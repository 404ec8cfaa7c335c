"""Synthetic 3D scenes: clustered point clouds, orbiting pinhole
cameras, visibility graphs, and deterministic blob-splat rendering.

Each cluster is an independent Gaussian point cloud observed by cameras
on randomized orbits that look at the cloud centroid. A visibility edge
(image, point) exists iff the point projects inside the frame with
positive depth and survives an occlusion coin flip. Appearance (point
colors, background texture) is derived by hashing ids against a fixed
constant, which makes render() a pure function of (graph, image id).
"""

import math
from dataclasses import dataclass

import numpy as np

from .mining import Camera, GraphError, VisibilityGraph
from .numeric import SeededStream

DEFAULT_IMAGE_SIZE = 96

# base seed of the appearance hash; not a tunable
_APPEARANCE_SEED = 0x4D414346


class GenerationError(RuntimeError):
    """A cluster came out empty under the requested configuration."""


@dataclass(frozen=True)
class SceneConfig:
    clusters: int = 20
    images_per_cluster: tuple = (25, 40)
    points_per_cluster: tuple = (150, 300)
    image_size: int = DEFAULT_IMAGE_SIZE
    camera_orbit_radius: tuple = (2.5, 4.0)
    zoom_range: tuple = (0.7, 1.5)
    occlusion_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.clusters < 1:
            raise ValueError("need at least one cluster")
        for name in ("images_per_cluster", "points_per_cluster",
                     "camera_orbit_radius", "zoom_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive (lo, hi) "
                                 f"range, got ({lo}, {hi})")
        if self.images_per_cluster[0] < 2:
            raise ValueError("clusters need at least 2 images so points "
                             "can have 2 observers")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must be in [0, 1]")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """Rotation whose rows are the camera axes [right; down; forward]."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera center coincides with its target")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    if abs(forward @ up) > 0.999 * np.linalg.norm(up):
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def project(camera, point, size):
    """Pinhole projection to (u, v, depth); principal point = center."""
    cam = camera.rotation @ (np.asarray(point, dtype=np.float64)
                             - camera.center)
    depth = cam[2]
    if depth <= 0.0:
        return None, None, depth
    half = size / 2.0
    u = camera.focal * cam[0] / depth + half
    v = camera.focal * cam[1] / depth + half
    return u, v, depth


def _cluster_tag(index):
    return f"c{index:02d}"


def _generate_cluster(cfg, index, stream):
    tag = _cluster_tag(index)
    n_points = int(stream.integers(cfg.points_per_cluster[0],
                                   cfg.points_per_cluster[1] + 1))
    n_images = int(stream.integers(cfg.images_per_cluster[0],
                                   cfg.images_per_cluster[1] + 1))
    positions = 0.5 * stream.derive("points").normal(size=(n_points, 3))
    points = {f"{tag}/p{j:04d}": positions[j] for j in range(n_points)}

    images = {}
    for i in range(n_images):
        s = stream.derive("camera", i)
        direction = s.normal(size=3)
        direction = direction / np.linalg.norm(direction)
        radius = float(s.uniform(*cfg.camera_orbit_radius))
        center = radius * direction
        focal = cfg.image_size * float(s.uniform(*cfg.zoom_range))
        images[f"{tag}/i{i:03d}"] = Camera(
            center=center, rotation=look_at(center, np.zeros(3)),
            focal=focal)

    edges = set()
    point_ids = sorted(points)
    for image_id in sorted(images):
        camera = images[image_id]
        coins = stream.derive("occlusion", image_id).random(len(point_ids))
        for j, point_id in enumerate(point_ids):
            u, v, depth = project(camera, points[point_id], cfg.image_size)
            if depth <= 0.0:
                continue
            if not (0.0 <= u < cfg.image_size and 0.0 <= v < cfg.image_size):
                continue
            if coins[j] < cfg.occlusion_rate:
                continue
            edges.add((image_id, point_id))

    observers = {}
    for image_id, point_id in edges:
        observers.setdefault(point_id, set()).add(image_id)
    kept = {p for p, obs in observers.items() if len(obs) >= 2}
    if not kept:
        raise GenerationError(
            f"cluster {tag} retained no points; loosen the configuration")
    points = {p: points[p] for p in sorted(kept)}
    edges = {(i, p) for i, p in edges if p in kept}
    graph = VisibilityGraph(cluster_id=tag, images=images, points=points,
                            edges=edges)
    graph.validate()
    return graph


def generate(cfg):
    """Build one visibility graph per cluster; point ids are disjoint
    across clusters by construction."""
    root = SeededStream(cfg.seed)
    return [_generate_cluster(cfg, k, root.derive("cluster", k))
            for k in range(cfg.clusters)]


def _appearance(*labels):
    return SeededStream(_APPEARANCE_SEED).derive(*labels)


def _point_color(cluster_id, point_id):
    # every cluster owns a small anchor palette; points jitter around
    # one anchor, so cluster identity is carried by stable colors that
    # persist across viewpoints
    anchors = 0.2 + 0.8 * _appearance("palette", cluster_id).random((3, 3))
    s = _appearance("color", cluster_id, point_id)
    anchor = anchors[int(s.integers(0, 3))]
    return np.clip(anchor + s.uniform(-0.08, 0.08, size=3), 0.0, 1.0)


def _add_waves(img, coords, freqs, weights, phases):
    for h in range(len(phases)):
        wave = np.sin(2.0 * math.pi
                      * (freqs[h, 0] * coords[None, :]
                         + freqs[h, 1] * coords[:, None]) + phases[h])
        img += weights[h][:, None, None] * wave[None, :, :]


def _background(cluster_id, image_id, size):
    # the background is mostly per-image nuisance (random tint and
    # waves) with only a faint cluster-fixed pattern, so cluster
    # identity lives in the splatted points rather than the backdrop
    s = _appearance("background", cluster_id)
    cluster_freqs = s.uniform(0.5, 3.0, size=(3, 2))
    cluster_weights = 0.015 + 0.015 * s.random((3, 3))
    cluster_phases = s.uniform(0.0, 2.0 * math.pi, size=3)
    si = _appearance("image", cluster_id, image_id)
    base = 0.2 + 0.3 * si.random(3)
    image_freqs = si.uniform(1.0, 4.0, size=(2, 2))
    image_weights = 0.05 + 0.06 * si.random((2, 3))
    image_phases = si.uniform(0.0, 2.0 * math.pi, size=2)

    coords = (np.arange(size) + 0.5) / size
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    _add_waves(img, coords, cluster_freqs, cluster_weights, cluster_phases)
    _add_waves(img, coords, image_freqs, image_weights, image_phases)
    return np.clip(img, 0.0, 1.0)


def render(graph, image_id, size=DEFAULT_IMAGE_SIZE):
    """Splat the image's visible points over a procedural background.

    Pure in (graph, image_id, size): repeated calls are bit-identical.
    Splats are painted far to near so closer points occlude.
    """
    if image_id not in graph.images:
        raise GraphError(f"unknown image id {image_id!r}")
    camera = graph.images[image_id]
    img = _background(graph.cluster_id, image_id, size)

    visible = sorted(p for i, p in graph.edges if i == image_id)
    splats = []
    for point_id in visible:
        u, v, depth = project(camera, graph.points[point_id], size)
        if depth <= 0.0:
            continue
        splats.append((depth, point_id, u, v))
    splats.sort(key=lambda s: (-s[0], s[1]))

    # perspective splat width: world radius scaled by focal over depth,
    # clamped so distant points stay visible and near ones stay local
    radius = 0.1
    for depth, point_id, u, v in splats:
        sigma = min(max(radius * camera.focal / depth, size / 96.0),
                    size / 12.0)
        support = int(math.ceil(3.0 * sigma))
        x0 = max(0, int(math.floor(u - support)))
        x1 = min(size, int(math.ceil(u + support)) + 1)
        y0 = max(0, int(math.floor(v - support)))
        y1 = min(size, int(math.ceil(v + support)) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        alpha = np.exp(-((xs[None, :] - u) ** 2 + (ys[:, None] - v) ** 2)
                       / (2.0 * sigma * sigma))
        color = _point_color(graph.cluster_id, point_id)
        patch = img[:, y0:y1, x0:x1]
        img[:, y0:y1, x0:x1] = (patch * (1.0 - alpha)
                                + color[:, None, None] * alpha)
    return img.astype(np.float32)
