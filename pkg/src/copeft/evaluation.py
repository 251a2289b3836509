"""Box decoding, axis-aligned IoU, NMS, average precision, and whole-dataset
evaluation with area filtering."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .pipeline import GridGeometry, HeadOutputs, pipeline_forward
from .scenes import DomainConfig, SceneSample

DEFAULT_SCORE_THR = 0.25
DEFAULT_NMS_IOU = 0.2


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    l: float
    score: float
    cell: int = -1  # flat feature-cell index; tie-break key for NMS

    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.l)


@dataclass
class MetricsReport:
    """One experiment cell's outcome; serialized as a JSON object."""

    method: str = ""
    seed: int = 0
    ap50: float = 0.0
    ap70: float = 0.0
    n_detections: int = 0
    n_gt: int = 0
    params_trainable: int = 0
    params_total: int = 0
    seconds: float = 0.0
    zero_gt: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def iou_aa(a, b) -> float:
    """Intersection over union of two axis-aligned (cx, cy, w, l) boxes."""
    ax, ay, aw, al = a
    bx, by, bw, bl = b
    ix = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    iy = min(ay + al / 2, by + bl / 2) - max(ay - al / 2, by - bl / 2)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * al + bw * bl - inter)


def nms(detections: list[Detection], iou_thr: float) -> list[Detection]:
    """Greedy suppression by descending score; IoU >= `iou_thr` suppresses.

    Score ties break by ascending cell index, so the survivor set does not
    depend on the input order.
    """
    ordered = sorted(detections, key=lambda d: (-d.score, d.cell))
    kept: list[Detection] = []
    for det in ordered:
        if all(iou_aa(det.box(), k.box()) < iou_thr for k in kept):
            kept.append(det)
    return kept


def decode_boxes(heads: HeadOutputs, score_thr: float, nms_iou: float,
                 geometry: GridGeometry) -> list[Detection]:
    """Turn head outputs into detections.

    Cells whose sigmoid logit reaches `score_thr` become candidates; the box
    centre is the cell centre plus the regressed offset in cell units, the
    size is cell * exp(log-size). Greedy NMS follows.
    """
    if not (0 < score_thr < 1 and 0 < nms_iou < 1):
        raise ConfigError(f"thresholds must lie in (0, 1), got {score_thr}, {nms_iou}")
    logits = heads.cls_logits[0]
    scores = 1.0 / (1.0 + np.exp(-logits))
    candidates = []
    for i, j in np.argwhere(scores >= score_thr):
        dx, dy, logw, logl = heads.reg[:, i, j]
        candidates.append(Detection(
            cx=geometry.x_min + (j + 0.5 + dx) * geometry.cell,
            cy=geometry.y_min + (i + 0.5 + dy) * geometry.cell,
            w=geometry.cell * math.exp(logw),
            l=geometry.cell * math.exp(logl),
            score=float(scores[i, j]),
            cell=int(i * geometry.w + j)))
    return nms(candidates, nms_iou)


def _match_frame(dets: list[tuple[int, Detection]], gts: np.ndarray,
                 iou_thr: float) -> list[bool]:
    """Greedy per-frame matching in the given (already sorted) order."""
    taken = np.zeros(len(gts), dtype=bool)
    flags = []
    for _, det in dets:
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(gts):
            if taken[gi]:
                continue
            iou = iou_aa(det.box(), gt)
            if iou >= iou_thr and iou > best_iou:
                best_iou, best_gt = iou, gi
        if best_gt >= 0:
            taken[best_gt] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(dets_per_frame: list[list[Detection]],
                      gts_per_frame: list[np.ndarray], iou_thr: float) -> float:
    """All-point-interpolated AP over pooled detections.

    Detections pool across frames and sort by descending score (ties by
    frame order, then in-frame order); each one greedily matches the
    unmatched ground-truth box with the highest IoU at or above the
    threshold, ties by lowest index. Returns 0.0 when there is no ground
    truth at all.
    """
    if len(dets_per_frame) != len(gts_per_frame):
        raise ConfigError("detections and ground truth must align frame by frame")
    n_gt = sum(len(g) for g in gts_per_frame)
    if n_gt == 0:
        return 0.0
    pooled = [(f, d) for f, dets in enumerate(dets_per_frame) for d in dets]
    pooled.sort(key=lambda fd: -fd[1].score)
    # matching is per frame and respects the pooled score order
    flags_by_frame = {}
    for f, gts in enumerate(gts_per_frame):
        frame_dets = [(fi, d) for fi, d in pooled if fi == f]
        flags_by_frame[f] = iter(_match_frame(frame_dets, gts, iou_thr))
    tp = np.array([next(flags_by_frame[f]) for f, _ in pooled], dtype=np.float64)
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, tp.size + 1)
    # precision envelope from the right, then sum over recall increments
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def _center_in_area(cx: float, cy: float, area) -> bool:
    x_min, x_max, y_min, y_max = area
    return x_min <= cx <= x_max and y_min <= cy <= y_max


def evaluate_model(config, registry, method, samples: list[SceneSample],
                   domain: DomainConfig, area=None,
                   thresholds: tuple[float, float] = (0.5, 0.7),
                   score_thr: float = DEFAULT_SCORE_THR,
                   nms_iou: float = DEFAULT_NMS_IOU) -> MetricsReport:
    """AP over a dataset, excluding boxes and detections centred outside
    the evaluation area (default: the full world extent).

    The returned report carries the AP values and counts; the caller fills
    in method bookkeeping such as wall-clock time.
    """
    if (domain.grid_h, domain.grid_w) != (config.h0, config.w0):
        raise ConfigError(
            f"dataset grid {domain.grid_h}x{domain.grid_w} != model grid "
            f"{config.h0}x{config.w0}")
    if area is None:
        area = (domain.x_min, domain.x_max, domain.y_min, domain.y_max)
    geometry = GridGeometry(domain.x_min, domain.y_min, config.feat_cell_m,
                            config.feat_h, config.feat_w)
    dets_per_frame: list[list[Detection]] = []
    gts_per_frame: list[np.ndarray] = []
    for sample in samples:
        out = pipeline_forward(config, registry, sample.grids, method)
        dets = decode_boxes(out.heads(), score_thr, nms_iou, geometry)
        dets_per_frame.append([d for d in dets if _center_in_area(d.cx, d.cy, area)])
        gts = sample.boxes.reshape(-1, 4)
        keep = [k for k, b in enumerate(gts) if _center_in_area(b[0], b[1], area)]
        gts_per_frame.append(gts[keep])
    n_gt = sum(len(g) for g in gts_per_frame)
    report = MetricsReport(
        ap50=average_precision(dets_per_frame, gts_per_frame, thresholds[0]),
        ap70=average_precision(dets_per_frame, gts_per_frame, thresholds[1]),
        n_detections=sum(len(d) for d in dets_per_frame),
        n_gt=n_gt,
        zero_gt=(n_gt == 0),
    )
    return report
