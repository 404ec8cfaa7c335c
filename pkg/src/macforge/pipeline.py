"""High-level wiring between the library modules.

Everything a pipeline stage needs beyond a single module lives here:
the Extractor (backbone forward + pooling + optional projection, with
the two query-crop modes), parallel embedding with deterministic
output, cluster train/val splitting, benchmark ground truth, and the
stage functions the command-line layer calls.
"""

import glob
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .backbone import (
    CONV,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    tiny_spec,
)
from .descriptor import (
    BBox,
    crop_activations,
    l2n,
    load_descriptors,
    mac,
    receptive_geometry,
    rmac,
    rmac_regions,
    save_descriptors,
)
from .images import read_ppm, resize_max_side, write_ppm
from .mining import (
    MiningConfig,
    TupleMiner,
    build_tuples,
    load_scene,
    load_tuples,
    save_scene,
    save_tuples,
)
from .numeric import DimensionError, SeededStream
from .retrieval import QueryGroundTruth, save_ground_truth
from .synthscene import generate, render
from .training import (
    LossConfig,
    TrainConfig,
    embed_image,
    train,
    write_metrics_csv,
)
from .whitening import (
    KIND_LW,
    KIND_PCAW,
    apply_projection,
    fit_lw,
    fit_pcaw,
    save_projection,
)


class Extractor:
    """Turns images into normalized global descriptors.

    MAC by default; rmac_scales switches to the regional grid. A fitted
    projection is applied per region before aggregation for PCAw and to
    the aggregated descriptor for Lw. extract_region implements the
    activation-space crop used by the Crop_X query mode.
    """

    def __init__(self, spec, params, rmac_scales=0, projection=None,
                 out_dim=None, max_side=None):
        self.spec = spec
        self.params = params
        self.rmac_scales = int(rmac_scales)
        self.projection = projection
        if projection is not None:
            feature_dim = 0
            for layer in spec:
                if layer.kind == CONV:
                    feature_dim = layer.out_maps
            if feature_dim and projection.dim != feature_dim:
                raise DimensionError(
                    f"projection dim {projection.dim} does not match "
                    f"backbone feature dim {feature_dim}")
            self.out_dim = projection.dim if out_dim is None else int(out_dim)
            if not 1 <= self.out_dim <= projection.dim:
                raise DimensionError(
                    f"out_dim {out_dim} exceeds projection dim "
                    f"{projection.dim}")
        else:
            self.out_dim = None
        self.max_side = max_side
        self.geometry = receptive_geometry(spec)

    def _prepare(self, image):
        image = np.asarray(image, dtype=np.float32)
        if self.max_side is not None:
            image = resize_max_side(image, self.max_side)
        return image

    def _pool(self, activations):
        if self.rmac_scales < 1:
            f = l2n(mac(activations))
            if self.projection is not None:
                f = apply_projection(self.projection, f, self.out_dim)
            return f
        height, width = activations.shape[1], activations.shape[2]
        transform = None
        if self.projection is not None and self.projection.kind == KIND_PCAW:
            transform = self.projection.reducer(self.out_dim)
        grid = rmac_regions(width, height, self.rmac_scales)
        f = rmac(activations, grid, region_transform=transform)
        if self.projection is not None and self.projection.kind == KIND_LW:
            f = apply_projection(self.projection, f, self.out_dim)
        return f

    def extract(self, image):
        out, _ = forward(self.params, self.spec, self._prepare(image))
        return self._pool(out)

    def extract_region(self, image, bbox):
        image = np.asarray(image, dtype=np.float32)
        bbox = BBox(*bbox)
        if self.max_side is not None:
            resized = resize_max_side(image, self.max_side)
            if resized.shape != image.shape:
                sy = resized.shape[1] / image.shape[1]
                sx = resized.shape[2] / image.shape[2]
                x0 = int(round(bbox.x0 * sx))
                y0 = int(round(bbox.y0 * sy))
                bbox = BBox(x0, y0,
                            max(x0 + 1, int(round(bbox.x1 * sx))),
                            max(y0 + 1, int(round(bbox.y1 * sy))))
            image = resized
        out, _ = forward(self.params, self.spec, image)
        return self._pool(crop_activations(out, bbox, self.geometry))


def embed_images(extractor, images, threads=1):
    """Embed id -> image maps into id -> descriptor, in sorted-id order.

    Extraction is pure, so a thread pool changes timing only; results
    are collected in submission order and stay deterministic.
    """
    ids = sorted(images)
    if threads <= 1:
        return {i: extractor.extract(images[i]) for i in ids}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        vectors = list(pool.map(lambda i: extractor.extract(images[i]), ids))
    return dict(zip(ids, vectors))


def split_clusters(graphs, val_fraction):
    """Deterministic split: the last ceil(fraction) clusters by sorted
    cluster id become the held-out set."""
    ordered = sorted(graphs, key=lambda g: g.cluster_id)
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    n_val = int(round(val_fraction * len(ordered)))
    if val_fraction > 0.0:
        n_val = max(1, n_val)
    if n_val >= len(ordered) and val_fraction > 0.0:
        raise ValueError("val_fraction leaves no training clusters")
    if n_val == 0:
        return ordered, []
    return ordered[:-n_val], ordered[-n_val:]


def render_images(graphs, size):
    images = {}
    for graph in graphs:
        for image_id in sorted(graph.images):
            images[image_id] = render(graph, image_id, size=size)
    return images


def benchmark_ground_truth(graphs, image_size=None):
    """Every image queries for the rest of its cluster; the query
    itself is ignored. Full-image bboxes let crop modes run too."""
    gt = {}
    bbox = None
    if image_size is not None:
        bbox = BBox(0, 0, image_size, image_size)
    for graph in graphs:
        ids = sorted(graph.images)
        if len(ids) < 2:
            continue
        for query_id in ids:
            gt[query_id] = QueryGroundTruth(
                frozenset(i for i in ids if i != query_id),
                frozenset({query_id}), bbox)
    return gt


def load_scenes_dir(scenes_dir):
    paths = sorted(glob.glob(os.path.join(scenes_dir, "*.json")))
    if not paths:
        raise FileNotFoundError(f"no scene files in {scenes_dir!r}")
    return [load_scene(p) for p in paths]


def load_images_dir(images_dir):
    pattern = os.path.join(images_dir, "**", "*.ppm")
    paths = sorted(glob.glob(pattern, recursive=True))
    if not paths:
        raise FileNotFoundError(f"no PPM images under {images_dir!r}")
    images = {}
    for path in paths:
        rel = os.path.relpath(path, images_dir)
        image_id = rel[:-len(".ppm")].replace(os.sep, "/")
        images[image_id] = read_ppm(path)
    return images


def image_path(images_dir, image_id):
    return os.path.join(images_dir, *image_id.split("/")) + ".ppm"


def stage_synth(scene_cfg, out_dir):
    """Generate scenes, render every image to PPM, emit ground truth.

    Layout: <out>/scenes/<cluster>.json, <out>/images/<image-id>.ppm,
    <out>/ground_truth.json. Returns (clusters, images, points).
    """
    graphs = generate(scene_cfg)
    scenes_dir = os.path.join(out_dir, "scenes")
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(scenes_dir, exist_ok=True)
    n_images = 0
    n_points = 0
    for graph in graphs:
        save_scene(os.path.join(scenes_dir, f"{graph.cluster_id}.json"),
                   graph)
        n_points += len(graph.points)
        for image_id in sorted(graph.images):
            path = image_path(images_dir, image_id)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            write_ppm(path, render(graph, image_id,
                                   size=scene_cfg.image_size))
            n_images += 1
    save_ground_truth(os.path.join(out_dir, "ground_truth.json"),
                      benchmark_ground_truth(graphs, scene_cfg.image_size))
    return len(graphs), n_images, n_points


def stage_embed(checkpoint_path, images_dir, out_path, rmac_scales=0,
                projection=None, out_dim=None, max_side=None, threads=1):
    spec, params, _ = load_checkpoint(checkpoint_path)
    extractor = Extractor(spec, params, rmac_scales=rmac_scales,
                          projection=projection, out_dim=out_dim,
                          max_side=max_side)
    images = load_images_dir(images_dir)
    descriptors = embed_images(extractor, images, threads=threads)
    save_descriptors(out_path, {i: np.asarray(v, dtype=np.float32)
                                for i, v in descriptors.items()})
    return len(descriptors)


def stage_mine(scenes_dir, descriptors_path, out_path, mining_cfg,
               positive_method, negative_variant, seed,
               all_images_as_queries=False):
    graphs = load_scenes_dir(scenes_dir)
    descriptors = load_descriptors(descriptors_path)
    tuples, skipped = build_tuples(graphs, descriptors, mining_cfg,
                                   positive_method, negative_variant,
                                   SeededStream(seed),
                                   all_images_as_queries=all_images_as_queries)
    save_tuples(out_path, tuples)
    return tuples, skipped


def stage_train(scenes_dir, images_dir, out_dir, train_cfg, loss_cfg,
                mining_cfg, positive_method, negative_variant, loss_kind,
                val_fraction, seed, spec=None, init_params_from=None):
    """Mine tuples on the training clusters, fine-tune, keep the best
    checkpoint by held-out mAP. Returns the TrainResult."""
    graphs = load_scenes_dir(scenes_dir)
    train_graphs, val_graphs = split_clusters(graphs, val_fraction)
    if not train_graphs:
        raise ValueError("no training clusters after split")
    images = load_images_dir(images_dir)

    stream = SeededStream(seed)
    if spec is None:
        spec = tiny_spec()
    if init_params_from is not None:
        loaded_spec, params, _ = load_checkpoint(init_params_from)
        spec = loaded_spec
    else:
        params = init_params(spec, stream.derive("init"))

    params0 = params.copy()

    def embed_initial(image):
        return embed_image(params0, spec, image)

    miner = TupleMiner(train_graphs, images, mining_cfg,
                       embed_initial, positive_method, negative_variant,
                       stream.derive("mine"))
    val_tuples = []
    if val_graphs:
        # negatives for a held-out query may come from any cluster, so
        # the whole graph set is embedded and passed in; queries stay
        # restricted to the held-out clusters
        val_descriptors = {}
        for graph in graphs:
            for image_id in sorted(graph.images):
                val_descriptors[image_id] = embed_initial(images[image_id])
        val_tuples, _ = build_tuples(
            graphs, val_descriptors, mining_cfg, positive_method,
            negative_variant, stream.derive("valmine"),
            query_clusters={g.cluster_id for g in val_graphs})
    if not val_tuples:
        raise ValueError("validation split produced no tuples")

    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, "init.mfck"), spec, params0,
                    meta={"epoch": 0, "loss": loss_kind})
    result = train(miner, val_tuples, spec, params, train_cfg, loss_cfg,
                   stream.derive("train"), loss_kind=loss_kind)
    save_checkpoint(os.path.join(out_dir, "best.mfck"), spec,
                    result.best_params,
                    meta={"epoch": result.best_epoch,
                          "val_map": result.best_val_map,
                          "loss": loss_kind})
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), result.metrics,
                      note=f"loss={loss_kind}")
    return result


def stage_whiten(descriptors_path, out_path, kind, tuples_path=None):
    """Fit Lw from mined tuples (query-positive matching pairs, query-
    negative non-matching pairs) or PCAw from the descriptor set."""
    descriptors = load_descriptors(descriptors_path)
    if kind == KIND_PCAW:
        model = fit_pcaw([descriptors[i] for i in sorted(descriptors)])
    elif kind == KIND_LW:
        if tuples_path is None:
            raise ValueError("Lw fitting needs a tuples file")
        tuples = load_tuples(tuples_path)
        matching = []
        nonmatching = []
        for t in tuples:
            matching.append((descriptors[t.query], descriptors[t.positive]))
            for negative in t.negatives:
                nonmatching.append((descriptors[t.query],
                                    descriptors[negative]))
        mean_source = [descriptors[i] for i in sorted(descriptors)]
        model = fit_lw(matching, nonmatching, mean_source)
    else:
        raise ValueError(f"unknown whitening kind {kind!r}")
    save_projection(out_path, model)
    return model
