"""Detection metrics for the runway detector: IoU, OKS and average precision.

Also the R² goodness-of-fit score and an ODD coverage indicator that measures
how much of the gridded domain lies near some training point.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .bsv import make_grid
from .odd import OddPoint, OddSpace
from .surrogate import normalize

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
DEFAULT_OKS_K = 0.05
CONFIDENCE_FLOOR = 0.7
MAX_DETECTIONS_BOX = 100
MAX_DETECTIONS_KEYPOINT = 20
# values reported for the production detector; shown next to results, never asserted
REFERENCE_AP = {"ap_bb": 0.89, "ap_kp": 0.99}


class UndefinedMetricError(ValueError):
    """The metric has no meaningful value for the given inputs."""


class MetricsSchemaError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.to_list()}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        if len(values) != 4:
            raise MetricsSchemaError(f"box needs 4 values, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visibility: int = 1

    def to_list(self) -> list:
        return [self.x, self.y, self.visibility]

    @classmethod
    def from_list(cls, values) -> "Keypoint":
        if len(values) == 2:
            return cls(float(values[0]), float(values[1]))
        if len(values) == 3:
            return cls(float(values[0]), float(values[1]), int(values[2]))
        raise MetricsSchemaError(f"keypoint needs 2 or 3 values, got {len(values)}")


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    keypoints: tuple[Keypoint, ...] = ()
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruthAnnotation:
    box: BoundingBox
    keypoints: tuple[Keypoint, ...] = ()
    area: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        if self.area is None:
            object.__setattr__(self, "area", self.box.area)
        elif abs(self.area - self.box.area) > 1e-6:
            raise ValueError(f"area {self.area} differs from box area {self.box.area}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def _k_vector(k, n: int) -> np.ndarray:
    k = np.broadcast_to(np.asarray(k, dtype=float), (n,))
    if np.any(k <= 0):
        raise ValueError("keypoint constants must be positive")
    return k


def oks(det: Detection, gt: GroundTruthAnnotation, k: Union[float, Sequence[float]] = DEFAULT_OKS_K) -> float:
    """Object keypoint similarity, averaged over the ground truth's visible keypoints."""
    if len(det.keypoints) != len(gt.keypoints):
        raise MetricsSchemaError(f"{len(det.keypoints)} predicted vs {len(gt.keypoints)} annotated keypoints")
    visible = np.array([kp.visibility > 0 for kp in gt.keypoints], dtype=bool)
    if not visible.any():
        raise UndefinedMetricError("ground truth has no visible keypoints")
    kv = _k_vector(k, len(gt.keypoints))
    p = np.array([(kp.x, kp.y) for kp in det.keypoints], dtype=float)
    g = np.array([(kp.x, kp.y) for kp in gt.keypoints], dtype=float)
    d2 = np.sum((p - g) ** 2, axis=1)
    terms = np.exp(-d2 / (2.0 * gt.area * kv**2))
    return float(np.sum(terms[visible]) / np.count_nonzero(visible))


def _gate(detections: Sequence[Detection], floor: float, max_detections: int) -> list[Detection]:
    kept = [(i, d) for i, d in enumerate(detections) if d.confidence >= floor]
    # stable: equal confidences keep input order
    kept.sort(key=lambda item: -item[1].confidence)
    return [d for _, d in kept[:max_detections]]


def gate_detections(
    detections: Sequence[Detection], confidence_floor: float = CONFIDENCE_FLOOR, max_detections: int = MAX_DETECTIONS_BOX
) -> list[Detection]:
    """Drop detections below the confidence floor, then keep the most confident ones."""
    return _gate(detections, confidence_floor, max_detections)


def _similarity_matrix(dets, gts, similarity: str, k) -> np.ndarray:
    S = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            S[i, j] = iou(d.box, g.box) if similarity == "iou" else oks(d, g, k)
    return S


def _greedy_match(S: np.ndarray, threshold: float) -> np.ndarray:
    """True-positive flag per detection row (rows already in confidence order)."""
    taken = np.zeros(S.shape[1], dtype=bool)
    tp = np.zeros(S.shape[0], dtype=bool)
    for i in range(S.shape[0]):
        cand = np.where(taken | (S[i] < threshold), -np.inf, S[i])
        if cand.size and np.isfinite(cand.max()):
            j = int(np.argmax(cand))
            taken[j] = True
            tp[i] = True
    return tp


def interpolated_ap(tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated area under a precision-recall curve.

    ``tp_flags`` lists true/false positives in descending confidence order.
    """
    if n_gt == 0:
        raise UndefinedMetricError("no ground truth")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall at least this large
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(np.mean(values))


@dataclass(frozen=True)
class ApResult:
    ap: float
    per_threshold: dict  # threshold -> AP

    def to_dict(self) -> dict:
        return {"ap": self.ap, "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()}}


def _per_image(items) -> list[list]:
    items = list(items)
    if items and not isinstance(items[0], (list, tuple)):
        return [items]
    return [list(x) for x in items]


def average_precision_detail(
    detections,
    ground_truths,
    similarity: str = "iou",
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    max_detections: int = MAX_DETECTIONS_BOX,
    confidence_floor: float = CONFIDENCE_FLOOR,
    k: Union[float, Sequence[float]] = DEFAULT_OKS_K,
) -> ApResult:
    """AP averaged over similarity thresholds.

    ``detections`` and ``ground_truths`` are per-image lists (a flat list is
    treated as one image). Detections are pooled across images in descending
    confidence order; ties keep image order, then input order.
    """
    if similarity not in ("iou", "oks"):
        raise ValueError(f"unknown similarity {similarity!r}")
    dets, gts = _per_image(detections), _per_image(ground_truths)
    if not dets:
        dets = [[] for _ in gts]
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection images vs {len(gts)} annotation images")
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        raise UndefinedMetricError("no ground truth annotations")
    gated = [_gate(d, confidence_floor, max_detections) for d in dets]
    sims = [_similarity_matrix(d, g, similarity, k) for d, g in zip(gated, gts)]
    conf = np.array([d.confidence for image in gated for d in image])
    order = np.argsort(-conf, kind="stable")
    per = {}
    for t in thresholds:
        flags = np.concatenate([_greedy_match(S, t) for S in sims]) if conf.size else np.zeros(0, bool)
        per[float(t)] = interpolated_ap(flags[order], n_gt)
    return ApResult(float(np.mean(list(per.values()))), per)


def average_precision(detections, ground_truths, similarity: str = "iou", **kwargs) -> float:
    return average_precision_detail(detections, ground_truths, similarity, **kwargs).ap


def r_squared(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(targets, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"{p.shape} predictions vs {y.shape} targets")
    if y.size < 2:
        raise UndefinedMetricError("need at least two targets")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("targets have zero variance")
    return float(1.0 - np.sum((y - p) ** 2) / ss_tot)


def coverage_indicator(
    training_points: Sequence[OddPoint], space: OddSpace, grid_resolution=50, radius: float = 0.05
) -> float:
    """Fraction of grid cells whose center lies within ``radius`` of a training point.

    Distances are Euclidean in unit-hypercube coordinates over the continuous
    dimensions. This is a simple coverage proxy, not an established statistic.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    grid = make_grid(space, grid_resolution)
    if len(training_points) == 0:
        return 0.0
    C = normalize(space, grid.points)
    T = normalize(space, space.to_array(training_points))
    covered = np.zeros(len(C), dtype=bool)
    for start in range(0, len(T), 256):
        block = T[start : start + 256]
        d2 = np.sum((C[:, None, :] - block[None, :, :]) ** 2, axis=-1)
        covered |= np.any(d2 <= radius * radius, axis=1)
    return float(np.mean(covered))


# ---- file formats ---------------------------------------------------------


def _detection_from_dict(d: Mapping) -> Detection:
    conf = d.get("confidence", d.get("score"))
    if conf is None:
        raise MetricsSchemaError("detection missing confidence")
    kps = tuple(Keypoint.from_list(k) for k in d.get("keypoints", ()))
    return Detection(BoundingBox.from_list(d["box"]), kps, float(conf))


def _annotation_from_dict(d: Mapping) -> GroundTruthAnnotation:
    kps = tuple(Keypoint.from_list(k) for k in d.get("keypoints", ()))
    return GroundTruthAnnotation(BoundingBox.from_list(d["box"]), kps, d.get("area"))


def _read_jsonl(path, key: str, parse) -> dict:
    images = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            image_id = row["image_id"]
            items = [parse(x) for x in row.get(key, [])]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MetricsSchemaError(f"{path}:{n}: {exc}") from None
        if image_id in images:
            raise MetricsSchemaError(f"{path}:{n}: duplicate image_id {image_id!r}")
        images[image_id] = items
    return images


def read_predictions(path) -> dict:
    """``{"image_id": ..., "detections": [{"box", "keypoints", "confidence"}]}`` per line."""
    return _read_jsonl(path, "detections", _detection_from_dict)


def read_annotations(path) -> dict:
    """``{"image_id": ..., "annotations": [{"box", "keypoints", "area"?}]}`` per line."""
    return _read_jsonl(path, "annotations", _annotation_from_dict)


def _write_jsonl(path, rows) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def write_predictions(path, images: Mapping) -> None:
    _write_jsonl(
        path,
        [
            {
                "image_id": image_id,
                "detections": [
                    {"box": d.box.to_list(), "keypoints": [k.to_list() for k in d.keypoints], "confidence": d.confidence}
                    for d in dets
                ],
            }
            for image_id, dets in images.items()
        ],
    )


def write_annotations(path, images: Mapping) -> None:
    _write_jsonl(
        path,
        [
            {
                "image_id": image_id,
                "annotations": [
                    {"box": g.box.to_list(), "keypoints": [k.to_list() for k in g.keypoints], "area": g.area}
                    for g in gts
                ],
            }
            for image_id, gts in images.items()
        ],
    )


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    confidence_floor: float = CONFIDENCE_FLOOR
    max_detections_box: int = MAX_DETECTIONS_BOX
    max_detections_keypoint: int = MAX_DETECTIONS_KEYPOINT
    oks_k: tuple[float, ...] = (DEFAULT_OKS_K,)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "confidence_floor": self.confidence_floor,
            "max_detections_box": self.max_detections_box,
            "max_detections_keypoint": self.max_detections_keypoint,
            "oks_k": list(self.oks_k),
            "recall_points": len(RECALL_POINTS),
        }


@dataclass(frozen=True)
class MetricReport:
    box: Optional[ApResult]
    keypoint: Optional[ApResult]
    num_images: int
    config: EvalConfig = field(default_factory=EvalConfig)

    @property
    def ap_bb(self) -> Optional[float]:
        return None if self.box is None else self.box.ap

    @property
    def ap_kp(self) -> Optional[float]:
        return None if self.keypoint is None else self.keypoint.ap

    def to_dict(self) -> dict:
        return {
            "ap_bb": self.ap_bb,
            "ap_kp": self.ap_kp,
            "per_threshold": {
                "iou": None if self.box is None else self.box.to_dict()["per_threshold"],
                "oks": None if self.keypoint is None else self.keypoint.to_dict()["per_threshold"],
            },
            "num_images": self.num_images,
            "config": self.config.to_dict(),
            "reference": dict(REFERENCE_AP),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "threshold", "ap"])
        for name, res in (("ap_bb", self.box), ("ap_kp", self.keypoint)):
            if res is None:
                w.writerow([name, "mean", "n/a"])
                continue
            for t, v in res.per_threshold.items():
                w.writerow([name, f"{t:.2f}", repr(v)])
            w.writerow([name, "mean", repr(res.ap)])
        return buf.getvalue()


def evaluate_files(predictions: Mapping, annotations: Mapping, config: EvalConfig = EvalConfig()) -> MetricReport:
    """Box and keypoint AP over images keyed by id.

    Images without predictions count as having no detections; predictions for
    unknown images are a schema error. A variant whose metric is undefined (no
    ground truth, or no visible keypoints) is reported as not applicable.
    """
    unknown = set(predictions) - set(annotations)
    if unknown:
        raise MetricsSchemaError(f"predictions for unannotated images: {sorted(map(str, unknown))}")
    ids = list(annotations)
    dets = [predictions.get(i, []) for i in ids]
    gts = [annotations[i] for i in ids]
    k = config.oks_k[0] if len(config.oks_k) == 1 else config.oks_k

    def run(similarity, max_det):
        try:
            return average_precision_detail(
                dets, gts, similarity, config.thresholds, max_det, config.confidence_floor, k
            )
        except UndefinedMetricError:
            return None

    return MetricReport(
        run("iou", config.max_detections_box), run("oks", config.max_detections_keypoint), len(ids), config
    )
