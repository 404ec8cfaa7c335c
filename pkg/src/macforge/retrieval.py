"""Ranked retrieval over descriptor databases and mAP evaluation.

Retrieval is exhaustive inner-product search with deterministic
tie-breaking. Evaluation supports three query modes: Full (whole
image), Crop_I (crop pixels, then extract), and Crop_X (extract on the
full image, then crop the activation grid before pooling).
"""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .descriptor import BBox
from .ioutil import FormatError
from .numeric import DimensionError

MODE_FULL = "Full"
MODE_CROP_I = "Crop_I"
MODE_CROP_X = "Crop_X"
MODES = (MODE_FULL, MODE_CROP_I, MODE_CROP_X)


class ProtocolError(ValueError):
    """Evaluation request violates the benchmark protocol."""


@dataclass(frozen=True)
class QueryGroundTruth:
    """Relevance labels for one query; ignored ids are deleted from
    rankings before precision is counted."""

    relevant: frozenset
    ignored: frozenset = frozenset()
    bbox: Optional[BBox] = None

    def __post_init__(self):
        relevant = frozenset(self.relevant)
        ignored = frozenset(self.ignored)
        if relevant & ignored:
            raise ProtocolError("relevant and ignored sets overlap: "
                                f"{sorted(relevant & ignored)}")
        bbox = None if self.bbox is None else BBox(*self.bbox)
        object.__setattr__(self, "relevant", relevant)
        object.__setattr__(self, "ignored", ignored)
        object.__setattr__(self, "bbox", bbox)


class DescriptorDB:
    """Immutable id -> descriptor store with a stacked matrix.

    Ids are kept in ascending order so a stable sort on similarity
    breaks ties by lower id for free.
    """

    def __init__(self, descriptors):
        if not descriptors:
            raise ValueError("descriptor database must be non-empty")
        self.ids = sorted(descriptors)
        rows = []
        dim = None
        for image_id in self.ids:
            vec = np.asarray(descriptors[image_id], dtype=np.float64)
            if vec.ndim != 1:
                raise DimensionError(f"descriptor {image_id!r} is not 1-D")
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise DimensionError(
                    f"descriptor {image_id!r} has dim {vec.shape[0]}, "
                    f"expected {dim}")
            rows.append(vec)
        self.matrix = np.stack(rows)

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.ids)


def search(db, query, topn):
    """Top-n database entries by inner product, ties by lower id."""
    if topn < 1:
        raise ValueError("topn must be at least 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (db.dim,):
        raise DimensionError(f"query has shape {q.shape}, "
                             f"database dim is {db.dim}")
    sims = db.matrix @ q
    order = np.argsort(-sims, kind="stable")[:topn]
    return [(db.ids[i], float(sims[i])) for i in order]


def average_precision(ranking, gt):
    """Rank-based AP after deleting ignored ids from the ranking.

    Relevant ids absent from the ranking contribute zero precision.
    """
    if not gt.relevant:
        raise ProtocolError("query has an empty relevant set")
    hits = 0
    total = 0.0
    rank = 0
    for image_id in ranking:
        if image_id in gt.ignored:
            continue
        rank += 1
        if image_id in gt.relevant:
            hits += 1
            total += hits / rank
    return total / len(gt.relevant)


def _crop_pixels(image, bbox):
    x0, y0, x1, y1 = bbox
    height, width = image.shape[1], image.shape[2]
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ValueError(f"bbox {tuple(bbox)} outside image "
                         f"{width}x{height} or empty")
    return image[:, y0:y1, x0:x1]


def evaluate(db, queries, gt, mode, extractor):
    """Rank the database for each query and average the per-query APs.

    queries: list of (query_id, image, bbox-or-None); the extractor
    must provide extract(image) and extract_region(image, bbox).
    Returns (mAP, list of (query_id, ap) in query order).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if not queries:
        raise ValueError("no queries to evaluate")
    per_query = []
    for query_id, image, bbox in queries:
        if query_id not in gt:
            raise ProtocolError(f"no ground truth for query {query_id!r}")
        if mode == MODE_FULL:
            descriptor = extractor.extract(image)
        else:
            if bbox is None:
                raise ProtocolError(
                    f"mode {mode} requires a bbox for query {query_id!r}")
            if mode == MODE_CROP_I:
                descriptor = extractor.extract(_crop_pixels(image, bbox))
            else:
                descriptor = extractor.extract_region(image, BBox(*bbox))
        ranking = [image_id for image_id, _ in search(db, descriptor,
                                                      len(db))]
        per_query.append((query_id, average_precision(ranking,
                                                      gt[query_id])))
    mean_ap = sum(ap for _, ap in per_query) / len(per_query)
    return mean_ap, per_query


def save_ground_truth(path, gt):
    payload = {}
    for query_id, entry in gt.items():
        record = {"relevant": sorted(entry.relevant),
                  "ignored": sorted(entry.ignored)}
        if entry.bbox is not None:
            record["bbox"] = list(entry.bbox)
        payload[query_id] = record
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(payload, indent=1, sort_keys=True))
        f.write("\n")


def load_ground_truth(path):
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"ground truth is not valid JSON: {exc}") \
                from None
    if not isinstance(payload, dict):
        raise FormatError("ground truth must be a JSON object")
    gt = {}
    for query_id, record in payload.items():
        if not isinstance(record, dict):
            raise FormatError(f"entry for {query_id!r} must be an object")
        for key in ("relevant", "ignored"):
            value = record.get(key, [])
            if not (isinstance(value, list)
                    and all(isinstance(i, str) for i in value)):
                raise FormatError(f"{key} of {query_id!r} must be a "
                                  "list of image ids")
        bbox = record.get("bbox")
        if bbox is not None:
            if not (isinstance(bbox, list) and len(bbox) == 4
                    and all(isinstance(v, int) for v in bbox)):
                raise FormatError(f"bbox of {query_id!r} must be four "
                                  "integers")
            bbox = BBox(*bbox)
        try:
            gt[query_id] = QueryGroundTruth(
                frozenset(record.get("relevant", [])),
                frozenset(record.get("ignored", [])), bbox)
        except ProtocolError as exc:
            raise FormatError(f"entry for {query_id!r}: {exc}") from None
    return gt


def write_eval_csv(path, per_query, mean_ap):
    lines = ["query_id,ap"]
    lines.extend(f"{query_id},{ap:.6f}" for query_id, ap in per_query)
    lines.append(f"mAP,{mean_ap:.6f}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
        f.write("\n")
