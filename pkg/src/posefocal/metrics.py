"""Evaluation metrics and their median/accuracy aggregation.

Six per-image errors: rotation geodesic angle, normalized translation,
normalized point-matching, relative focal length, bbox-normalized
reprojection, and detection IoU. Medians use the lower-median convention
for even counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import (BBox, ModelPoints, ParamState, bbox_iou,
                       geodesic_distance)

ROT_ACC_THRESHOLD = math.pi / 6.0
PROJ_ACC_THRESHOLD = 0.1
IOU_ACC_THRESHOLD = 0.5

HISTOGRAM_EDGES = {
    "e_rot": np.linspace(0.0, math.pi, 19),
    "e_trans": np.linspace(0.0, 1.0, 21),
    "e_pose": np.linspace(0.0, 0.5, 21),
    "e_focal": np.linspace(0.0, 1.0, 21),
    "e_proj": np.linspace(0.0, 0.5, 21),
}


@dataclass(frozen=True)
class EvalPair:
    """A prediction/ground-truth pair plus the context metrics need."""

    pred: ParamState
    gt: ParamState
    points: ModelPoints
    bbox_gt: BBox
    img_diag: float
    bbox_pred: BBox | None = None

    def __post_init__(self):
        if self.img_diag <= 0:
            raise DomainError("image diagonal must be positive")


@dataclass(frozen=True)
class MetricRecord:
    e_rot: float
    e_trans: float
    e_pose: float
    e_focal: float
    e_proj: float
    iou: float | None = None

    def to_dict(self) -> dict:
        return {"e_rot": self.e_rot, "e_trans": self.e_trans, "e_pose": self.e_pose,
                "e_focal": self.e_focal, "e_proj": self.e_proj, "iou": self.iou}


def err_rot(pair: EvalPair) -> float:
    """Geodesic rotation angle between prediction and ground truth."""
    return geodesic_distance(pair.pred.rotation, pair.gt.rotation)


def err_trans(pair: EvalPair) -> float:
    """Translation error normalized by the ground-truth distance."""
    t_hat = pair.gt.translation
    norm = np.linalg.norm(t_hat)
    if norm <= 0:
        raise DomainError("ground-truth translation must be non-zero")
    return float(np.linalg.norm(pair.pred.translation - t_hat) / norm)


def err_pose(pair: EvalPair) -> float:
    """Point-matching error, normalized and scaled by the relative object size."""
    t_hat = pair.gt.translation
    norm = np.linalg.norm(t_hat)
    if norm <= 0:
        raise DomainError("ground-truth translation must be non-zero")
    pts = pair.points.points
    diff = (pts @ pair.pred.rotation.as_matrix().T + pair.pred.translation) \
        - (pts @ pair.gt.rotation.as_matrix().T + t_hat)
    avg = np.linalg.norm(diff, axis=1).mean()
    return float(pair.bbox_gt.diagonal / pair.img_diag * avg / norm)


def err_focal(pair: EvalPair) -> float:
    """Relative focal length error."""
    return abs(pair.gt.focal - pair.pred.focal) / pair.gt.focal


def err_proj(pair: EvalPair) -> float:
    """Average reprojection distance over the bbox diagonal.

    A prediction that puts any model point behind the camera is maximally
    penalized with +inf rather than dropped.
    """
    pts = pair.points.points
    cam = pts @ pair.pred.rotation.as_matrix().T + pair.pred.translation
    if np.any(cam[:, 2] <= 0):
        return math.inf
    cam_hat = pts @ pair.gt.rotation.as_matrix().T + pair.gt.translation
    if np.any(cam_hat[:, 2] <= 0):
        raise DomainError("ground truth puts a model point behind the camera")
    uv = pair.pred.focal * cam[:, :2] / cam[:, 2:3]
    uv_hat = pair.gt.focal * cam_hat[:, :2] / cam_hat[:, 2:3]
    avg = np.linalg.norm(uv - uv_hat, axis=1).mean()
    return float(avg / pair.bbox_gt.diagonal)


def evaluate_pair(pair: EvalPair) -> MetricRecord:
    """All six errors for one pair; IoU is None without a predicted bbox."""
    iou = bbox_iou(pair.bbox_gt, pair.bbox_pred) if pair.bbox_pred is not None else None
    return MetricRecord(
        e_rot=err_rot(pair),
        e_trans=err_trans(pair),
        e_pose=err_pose(pair),
        e_focal=err_focal(pair),
        e_proj=err_proj(pair),
        iou=iou,
    )


def lower_median(values) -> float:
    """Element at index ceil(n/2) - 1 of the sorted values."""
    v = sorted(values)
    if not v:
        raise DomainError("median of empty sequence")
    return float(v[(len(v) + 1) // 2 - 1])


def aggregate(records, rot_threshold: float = ROT_ACC_THRESHOLD,
              proj_threshold: float = PROJ_ACC_THRESHOLD,
              iou_threshold: float = IOU_ACC_THRESHOLD) -> dict:
    """Medians, accuracies, and fixed-bin histograms over metric records.

    The detection accuracy uses strict inequality (IoU larger than the
    threshold) and is only reported when predicted boxes are present.
    """
    records = list(records)
    if not records:
        raise DomainError("no metric records to aggregate")
    n = len(records)
    fields = ("e_rot", "e_trans", "e_pose", "e_focal", "e_proj")
    columns = {f: [getattr(r, f) for r in records] for f in fields}

    summary = {
        "count": n,
        "medians": {f: lower_median(columns[f]) for f in fields},
        "accuracies": {
            "acc_rot_pi6": sum(v <= rot_threshold for v in columns["e_rot"]) / n,
            "acc_proj_0.1": sum(v <= proj_threshold for v in columns["e_proj"]) / n,
        },
    }
    ious = [r.iou for r in records if r.iou is not None]
    if ious:
        summary["accuracies"]["acc_det_0.5"] = \
            sum(v > iou_threshold for v in ious) / len(ious)

    histograms = {}
    for f in fields:
        edges = HISTOGRAM_EDGES[f]
        finite = [v for v in columns[f] if math.isfinite(v)]
        counts, _ = np.histogram(finite, bins=edges)
        histograms[f] = {"edges": edges.tolist(), "counts": counts.tolist(),
                         "overflow": len(columns[f]) - int(counts.sum())}
    summary["histograms"] = histograms
    return summary
