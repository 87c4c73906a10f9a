"""Dense grid types shared by the whole pipeline.

Conventions (fixed across the package):
  * (x, y) = (row, column); x in [0, H), y in [0, W).
  * Serialized payloads and pixel enumeration are row-major.
  * Flow displacement vectors are (dx, dy) in the same row/col order, so a
    displacement of (0, 1) moves a pixel one column to the right.
  * Region and class indices are 0-based. The reserved value IGNORE marks an
    unlabeled pixel (label maps) or an unmatched pixel (canonical superpixel
    stacks); it is excluded from every region count P and class count.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    FrameRangeError,
    NonFiniteValueError,
    RegionIndexError,
    ShapeMismatchError,
    ValidationError,
)

# Reserved index: unlabeled / unmatched. Equals the u32 maximum so index maps
# round-trip bit-exactly through the u32 on-disk container.
IGNORE = 0xFFFFFFFF


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class FeatureStack:
    """Per-frame dense feature tensors, shape (N, C, H, W), immutable.

    Storage may be float32 or float64; every reduction downstream accumulates
    in float64 regardless.
    """

    def __init__(self, data: np.ndarray):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ShapeMismatchError(
                f"feature stack must be 4-d (N, C, H, W), got shape {data.shape}"
            )
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = _frozen(data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


class SuperpixelStack:
    """Per-frame region index maps, shape (N, H, W).

    Valid pixel values are region indices in [0, P) plus the reserved IGNORE
    sentinel (used only by canonical stacks for unmatched pixels). Per-frame
    region pixel sets are computed eagerly at construction so reads are
    lock-free afterwards.
    """

    def __init__(self, labels: np.ndarray, max_regions: int):
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise ShapeMismatchError(
                f"superpixel stack must be 3-d (N, H, W), got shape {labels.shape}"
            )
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValidationError(
                f"superpixel labels must be integers, got dtype {labels.dtype}"
            )
        max_regions = int(max_regions)
        if max_regions < 1:
            raise ValidationError(f"max_regions must be >= 1, got {max_regions}")
        self.labels = _frozen(labels.astype(np.int64))
        self.max_regions = max_regions
        # flat pixel indices per used region, ascending (= row-major) order
        self._sets: list[dict[int, np.ndarray]] = [
            _group_by_label(self.labels[i]) for i in range(self.labels.shape[0])
        ]

    @property
    def n_frames(self) -> int:
        return self.labels.shape[0]

    @property
    def height(self) -> int:
        return self.labels.shape[1]

    @property
    def width(self) -> int:
        return self.labels.shape[2]

    def used_regions(self, frame: int) -> list[int]:
        """Region indices used in one frame, ascending, IGNORE excluded."""
        self._check_frame(frame)
        return sorted(self._sets[frame])

    def flat_pixel_sets(self, frame: int) -> dict[int, np.ndarray]:
        """Region index -> flat (row-major) pixel index array for one frame."""
        self._check_frame(frame)
        return self._sets[frame]

    def _check_frame(self, frame: int) -> None:
        if not 0 <= frame < self.n_frames:
            raise FrameRangeError(
                f"frame {frame} out of range for stack with {self.n_frames} frames"
            )


def _group_by_label(frame_labels: np.ndarray) -> dict[int, np.ndarray]:
    flat = frame_labels.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_vals = flat[order]
    values, starts = np.unique(sorted_vals, return_index=True)
    out: dict[int, np.ndarray] = {}
    bounds = list(starts) + [flat.size]
    for k, value in enumerate(values):
        if value == IGNORE:
            continue
        out[int(value)] = np.sort(order[bounds[k] : bounds[k + 1]])
    return out


class FlowField:
    """Dense displacement field between two consecutive frames.

    direction "forward" with frame=k maps frame k -> k+1; direction
    "backward" with frame=k maps frame k+1 -> k. displacement has shape
    (H, W, 2) holding (dx, dy) per pixel; values must be finite.
    """

    def __init__(self, displacement: np.ndarray, direction: str, frame: int):
        displacement = np.asarray(displacement, dtype=np.float64)
        if displacement.ndim != 3 or displacement.shape[2] != 2:
            raise ShapeMismatchError(
                f"flow field must have shape (H, W, 2), got {displacement.shape}"
            )
        if direction not in ("forward", "backward"):
            raise ValidationError(f"flow direction must be forward/backward, got {direction!r}")
        if not np.all(np.isfinite(displacement)):
            bad = np.argwhere(~np.isfinite(displacement))[0]
            raise NonFiniteValueError(
                f"{direction} flow at frame {frame} has a non-finite value at "
                f"pixel ({bad[0]}, {bad[1]})"
            )
        self.displacement = _frozen(displacement)
        self.direction = direction
        self.frame = int(frame)

    @property
    def height(self) -> int:
        return self.displacement.shape[0]

    @property
    def width(self) -> int:
        return self.displacement.shape[1]


class LabelMap:
    """Per-pixel class labels, shape (H, W), values in [0, ncl) or IGNORE."""

    def __init__(self, labels: np.ndarray, num_classes: int):
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ShapeMismatchError(f"label map must be 2-d (H, W), got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValidationError(f"label map must be integer, got dtype {labels.dtype}")
        num_classes = int(num_classes)
        if num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
        labels = labels.astype(np.int64)
        bad = (labels != IGNORE) & ((labels < 0) | (labels >= num_classes))
        if np.any(bad):
            x, y = np.argwhere(bad)[0]
            raise ValidationError(
                f"label {labels[x, y]} at pixel ({x}, {y}) outside [0, {num_classes})"
            )
        self.labels = _frozen(labels)
        self.num_classes = num_classes

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def validate_stack(features: FeatureStack, superpixels: SuperpixelStack) -> None:
    """Check the paired-stack invariants; raise on the first violation.

    Checks: frame/grid shapes agree, all feature values are finite, and every
    superpixel index is inside [0, P) (IGNORE is allowed). Pixel-partition
    properties (exactly one index per pixel, row-major order of the region
    pixel sets) hold by construction of the array representation.
    """
    fs, ss = features.shape, superpixels.labels.shape
    if (fs[0], fs[2], fs[3]) != ss:
        raise ShapeMismatchError(
            f"feature stack (N, H, W) = {(fs[0], fs[2], fs[3])} does not match "
            f"superpixel stack {ss}"
        )
    finite = np.isfinite(features.data)
    if not finite.all():
        i, c, x, y = np.argwhere(~finite)[0]
        raise NonFiniteValueError(
            f"feature value at (frame {i}, channel {c}, pixel ({x}, {y})) is not finite"
        )
    labels = superpixels.labels
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= superpixels.max_regions))
    if np.any(bad):
        i, x, y = np.argwhere(bad)[0]
        raise RegionIndexError(
            f"region index {labels[i, x, y]} at (frame {i}, pixel ({x}, {y})) "
            f"outside [0, {superpixels.max_regions})"
        )


def region_pixel_sets(
    superpixels: SuperpixelStack, frame: int
) -> dict[int, list[tuple[int, int]]]:
    """Map region index -> list of (x, y) pixels, row-major order.

    Only indices actually used in the frame appear; IGNORE pixels belong to
    no region. The listed sets are disjoint and, on sentinel-free frames,
    cover the full grid.
    """
    width = superpixels.width
    out: dict[int, list[tuple[int, int]]] = {}
    for region, flat in superpixels.flat_pixel_sets(frame).items():
        out[region] = [(int(f) // width, int(f) % width) for f in flat]
    return out


def relabel_contiguous(
    superpixels: SuperpixelStack,
) -> tuple[SuperpixelStack, list[dict[int, int]]]:
    """Renumber each frame's used indices to 0..n_i-1.

    New indices follow first appearance in row-major order; IGNORE pixels are
    left untouched. Returns the new stack (P = max over frames of n_i) and a
    per-frame old->new map. Relabeling an already-contiguous stack is the
    identity.
    """
    labels = superpixels.labels
    new_labels = np.empty_like(labels)
    maps: list[dict[int, int]] = []
    max_used = 1
    for i in range(labels.shape[0]):
        flat = labels[i].ravel()
        _, first = np.unique(flat, return_index=True)
        order = flat[np.sort(first)]
        mapping = {int(v): k for k, v in enumerate(v for v in order if v != IGNORE)}
        maps.append(mapping)
        max_used = max(max_used, len(mapping))
        lut = {**mapping, IGNORE: IGNORE}
        new_flat = np.array([lut[int(v)] for v in flat], dtype=np.int64)
        new_labels[i] = new_flat.reshape(labels.shape[1:])
    return SuperpixelStack(new_labels, max_used), maps
