"""Segmentation metrics, boundary precision/recall, and oracle analyses.

The four summary metrics follow the standard protocol. With n_kl = pixels of
class k predicted as class l, t_k = sum_l n_kl (class-k pixel count) and
s_l = sum_k n_kl (predicted-l count):

  pixel_acc = sum_k n_kk / sum_k t_k
  mean_acc  = mean over {k : t_k > 0} of n_kk / t_k
  iou_k     = n_kk / (t_k + s_k - n_kk), defined where t_k + s_k > 0
  mean_iou  = mean of the defined iou_k
  fw_iou    = sum_k t_k * iou_k / sum_k t_k
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .correspond import CorrespondenceTable, compose_flow
from .errors import ShapeMismatchError, ValidationError
from .grid import IGNORE, FeatureStack, LabelMap, SuperpixelStack


class ConfusionMatrix:
    """Accumulates gt-vs-pred pixel counts; ignore pixels are skipped.

    A pixel counts only when BOTH maps carry a real class: gt-ignore pixels
    are unannotated, pred-ignore pixels are uncovered (propagation oracles),
    and the protocol excludes both.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: LabelMap, gt: LabelMap) -> None:
        if pred.labels.shape != gt.labels.shape:
            raise ShapeMismatchError(
                f"prediction {pred.labels.shape} and ground truth {gt.labels.shape} disagree"
            )
        if pred.num_classes > self.num_classes or gt.num_classes > self.num_classes:
            raise ValidationError(
                f"label maps carry up to {max(pred.num_classes, gt.num_classes)} classes, "
                f"matrix has {self.num_classes}"
            )
        mask = (gt.labels != IGNORE) & (pred.labels != IGNORE)
        g = gt.labels[mask]
        p = pred.labels[mask]
        flat = np.bincount(g * self.num_classes + p, minlength=self.num_classes**2)
        self.counts += flat.reshape(self.num_classes, self.num_classes)


@dataclass(frozen=True)
class Metrics:
    pixel_acc: float
    mean_acc: float
    mean_iou: float
    fw_iou: float

    def as_rows(self) -> list[tuple[str, float]]:
        return [
            ("pixel_acc", self.pixel_acc),
            ("mean_acc", self.mean_acc),
            ("mean_iou", self.mean_iou),
            ("fw_iou", self.fw_iou),
        ]


def metrics(cm: ConfusionMatrix) -> Metrics:
    """The four summary metrics; classes absent from gt and pred drop out."""
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise ValidationError("empty confusion matrix")
    diag = np.diag(counts).astype(np.float64)
    t = counts.sum(axis=1).astype(np.float64)  # gt pixels per class
    s = counts.sum(axis=0).astype(np.float64)  # predicted pixels per class
    pixel_acc = float(diag.sum()) / total
    seen = t > 0
    mean_acc = float(np.sum(diag[seen] / t[seen]) / seen.sum())
    denom = t + s - diag
    defined = denom > 0
    iou = np.zeros_like(diag)
    iou[defined] = diag[defined] / denom[defined]
    mean_iou = float(np.sum(iou[defined]) / defined.sum())
    fw_iou = float(np.sum(t[defined] * iou[defined]) / t.sum())
    return Metrics(pixel_acc=pixel_acc, mean_acc=mean_acc, mean_iou=mean_iou, fw_iou=fw_iou)


def boundary_map(labels: LabelMap, include_ignore_edges: bool = False) -> np.ndarray:
    """Boolean (H, W) map of label boundaries under 4-connectivity.

    A pixel is boundary when its class differs from a 4-neighbor's. Edges
    where either side is the ignore value do not count unless
    include_ignore_edges is set (then an ignore/class edge does, with the
    ignore pixel itself never marked).
    """
    lab = labels.labels
    out = np.zeros(lab.shape, dtype=bool)
    for axis in (0, 1):
        a = np.take(lab, np.arange(lab.shape[axis] - 1), axis=axis)
        b = np.take(lab, np.arange(1, lab.shape[axis]), axis=axis)
        differ = a != b
        both_real = (a != IGNORE) & (b != IGNORE)
        edge = differ & both_real
        if include_ignore_edges:
            edge = differ & ((a != IGNORE) | (b != IGNORE))
        pad_lo = [(0, 0), (0, 0)]
        pad_hi = [(0, 0), (0, 0)]
        pad_lo[axis] = (0, 1)
        pad_hi[axis] = (1, 0)
        out |= np.pad(edge & (a != IGNORE), pad_lo)
        out |= np.pad(edge & (b != IGNORE), pad_hi)
    return out


def boundary_pr(
    pred: LabelMap, gt: LabelMap, tolerance: float = 2.0
) -> tuple[float, float, float]:
    """Boundary precision, recall and F-measure at a pixel tolerance.

    A predicted boundary pixel is correct when some gt boundary pixel lies
    within Euclidean distance `tolerance`, and vice versa for recall. An
    empty boundary makes its own side vacuous (precision/recall 1.0); F is 0
    when precision + recall is 0.
    """
    if pred.labels.shape != gt.labels.shape:
        raise ShapeMismatchError(
            f"prediction {pred.labels.shape} and ground truth {gt.labels.shape} disagree"
        )
    if tolerance < 0:
        raise ValidationError(f"tolerance must be >= 0, got {tolerance}")
    pred_b = boundary_map(pred)
    gt_b = boundary_map(gt)
    precision = _near_fraction(pred_b, gt_b, tolerance)
    recall = _near_fraction(gt_b, pred_b, tolerance)
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f


def _near_fraction(points: np.ndarray, targets: np.ndarray, tolerance: float) -> float:
    if not points.any():
        return 1.0
    if not targets.any():
        return 0.0
    dist = distance_transform_edt(~targets)
    return float(np.mean(dist[points] <= tolerance))


def oracle_label(
    superpixels: SuperpixelStack, frame: int, gt: LabelMap
) -> LabelMap:
    """Best region-constant labeling: per-region majority vote of gt.

    Ties go to the lowest class index; regions whose pixels are all ignored
    stay ignored. This is the upper bound any region-constant prediction on
    these superpixels can reach.
    """
    if (superpixels.height, superpixels.width) != gt.labels.shape:
        raise ShapeMismatchError(
            f"superpixels {superpixels.height}x{superpixels.width} do not match "
            f"gt {gt.labels.shape}"
        )
    region_classes = oracle_region_classes(superpixels, frame, gt)
    out = np.full(gt.labels.shape, IGNORE, dtype=np.int64)
    flat_lab = superpixels.labels[frame]
    for region, cls in region_classes.items():
        if cls != IGNORE:
            out[flat_lab == region] = cls
    return LabelMap(out, gt.num_classes)


def oracle_region_classes(
    superpixels: SuperpixelStack, frame: int, gt: LabelMap
) -> dict[int, int]:
    """Majority-vote class per region (IGNORE for all-ignored regions)."""
    gt_flat = gt.labels.ravel()
    out: dict[int, int] = {}
    for region, flat in superpixels.flat_pixel_sets(frame).items():
        votes = gt_flat[flat]
        votes = votes[votes != IGNORE]
        if votes.size == 0:
            out[region] = IGNORE
            continue
        out[region] = int(np.argmax(np.bincount(votes, minlength=gt.num_classes)))
    return out


def oracle_propagate(
    table: CorrespondenceTable,
    source_frame: int,
    source_gt: LabelMap,
    superpixels: SuperpixelStack,
) -> tuple[LabelMap, float]:
    """Carry region labels from an annotated source frame to the target.

    Each target region matched in source_frame receives the majority-vote
    class of its matched source region; unmatched target regions stay
    ignored. Returns the propagated map and the labeled-pixel fraction.
    """
    if source_frame not in table.sampled_frames:
        raise ValidationError(
            f"source frame {source_frame} was not sampled by the table"
        )
    source_classes = oracle_region_classes(superpixels, source_frame, source_gt)
    out = np.full((superpixels.height, superpixels.width), IGNORE, dtype=np.int64)
    target_labels = superpixels.labels[table.target_frame]
    for j in table.target_regions:
        entry = table.matches[j].get(source_frame)
        if entry is None:
            continue
        src_region, _ = entry
        cls = source_classes.get(src_region, IGNORE)
        if cls != IGNORE:
            out[target_labels == j] = cls
    coverage = float(np.mean(out != IGNORE))
    return LabelMap(out, source_gt.num_classes), coverage


def pixel_correspondence_baseline(
    features: FeatureStack, flows, sampled_frames, target_frame: int
) -> np.ndarray:
    """Average features along per-pixel flow tracks; no regions involved.

    Each target pixel is tracked into every other sampled frame; surviving
    tracks contribute the feature vector at their rounded landing position.
    Returns the per-pixel mean including the target's own features, (C, H, W).
    """
    if target_frame not in set(int(f) for f in sampled_frames):
        raise ValidationError(f"target frame {target_frame} not among sampled frames")
    c, hh, ww = features.channels, features.height, features.width
    acc = features.data[target_frame].astype(np.float64).copy()
    count = np.ones((hh, ww), dtype=np.float64)
    xs, ys = np.meshgrid(np.arange(hh), np.arange(ww), indexing="ij")
    for frame in sampled_frames:
        frame = int(frame)
        if frame == target_frame:
            continue
        disp = compose_flow(flows, target_frame, frame)
        ok = np.isfinite(disp[..., 0]) & np.isfinite(disp[..., 1])
        tx = np.floor(xs[ok] + disp[ok][:, 0] + 0.5).astype(np.int64)
        ty = np.floor(ys[ok] + disp[ok][:, 1] + 0.5).astype(np.int64)
        acc[:, ok] += features.data[frame][:, tx, ty].astype(np.float64)
        count[ok] += 1.0
    return acc / count


METRICS_HEADER = "metric,value"
BPR_HEADER = "tolerance,precision,recall,f"


def write_metrics_csv(path: str, rows: list[tuple[str, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for name, value in rows:
            fh.write(f"{name},{value!r}\n")


def write_bpr_csv(path: str, rows: list[tuple[float, float, float, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(BPR_HEADER + "\n")
        for tol, p, r, f in rows:
            fh.write(f"{tol!r},{p!r},{r!r},{f!r}\n")
