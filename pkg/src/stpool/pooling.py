"""Differentiable pooling over matched regions.

Three layers compose into the multi-view head:

  spatial  : per frame, pool features over each region's pixel set
             (N, C, H, W) -> (N, C, P); absent regions are masked.
  temporal : pool each region across the frames where it is present,
             (N, C, P) -> (C, P); K(j) counts the present frames.
  region-to-pixel : broadcast region values onto the target frame's pixels,
             (C, P) -> (C, H, W).

avg pooling averages (row-major accumulation in float64); max pooling keeps
the maximum and records its location (lowest row-major pixel / lowest frame
index on ties) so the backward pass can route the full gradient there. The
avg backward passes are the exact adjoints of their forwards; masked (absent)
entries receive and emit exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    MissingRegionValueError,
    NoPresentFrameError,
    ShapeMismatchError,
    ValidationError,
)
from .grid import IGNORE, FeatureStack, SuperpixelStack, validate_stack

MODES = ("avg", "max")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValidationError(f"pooling mode must be one of {MODES}, got {mode!r}")


@dataclass
class RegionFeatureStack:
    """Spatial pooling output plus what its backward pass needs.

    values[i, c, j] is region j's pooled value in frame i (0 where absent);
    presence[i, j] marks non-empty regions; counts holds pixel counts;
    argmax_pixels (max mode) holds flat row-major pixel indices, -1 if absent.
    """

    values: np.ndarray
    presence: np.ndarray
    counts: np.ndarray
    mode: str
    grid_shape: tuple[int, int]
    argmax_pixels: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def max_regions(self) -> int:
        return self.values.shape[2]


@dataclass
class RegionFeatureMap:
    """Temporal pooling output: one value per (channel, region).

    frame_counts[j] = K(j); regions with K = 0 are masked (never-present
    indices below P). source_presence keeps the input mask for the backward
    pass; arg_frames (max mode) records the winning frame per entry.
    """

    values: np.ndarray
    frame_counts: np.ndarray
    source_presence: np.ndarray
    mode: str
    arg_frames: np.ndarray | None = None

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def max_regions(self) -> int:
        return self.values.shape[1]


def spatial_pool_fwd(
    features: FeatureStack, superpixels: SuperpixelStack, mode: str = "avg"
) -> RegionFeatureStack:
    """Pool features over each frame's region pixel sets."""
    _check_mode(mode)
    validate_stack(features, superpixels)
    n, c, hh, ww = features.shape
    p = superpixels.max_regions
    values = np.zeros((n, c, p), dtype=np.float64)
    counts = np.zeros((n, p), dtype=np.int64)
    argmax = np.full((n, c, p), -1, dtype=np.int64) if mode == "max" else None
    for i in range(n):
        flat_feat = features.data[i].reshape(c, hh * ww).astype(np.float64, copy=False)
        labels = superpixels.labels[i].ravel()
        valid = labels != IGNORE
        idx = labels[valid]
        counts[i] = np.bincount(idx, minlength=p)
        if mode == "avg":
            for ch in range(c):
                sums = np.bincount(idx, weights=flat_feat[ch][valid], minlength=p)
                np.divide(sums, counts[i], out=values[i, ch], where=counts[i] > 0)
        else:
            for j, flat in superpixels.flat_pixel_sets(i).items():
                sub = flat_feat[:, flat]
                local = np.argmax(sub, axis=1)  # first max = lowest row-major
                values[i, :, j] = sub[np.arange(c), local]
                argmax[i, :, j] = flat[local]
    return RegionFeatureStack(
        values=values,
        presence=counts > 0,
        counts=counts,
        mode=mode,
        grid_shape=(hh, ww),
        argmax_pixels=argmax,
    )


def spatial_pool_bwd(
    grad_out: np.ndarray, superpixels: SuperpixelStack, saved: RegionFeatureStack
) -> np.ndarray:
    """Gradient wrt the input features, shape (N, C, H, W).

    avg: each pixel of region j receives grad/|region|; max: the recorded
    argmax pixel receives the full gradient. Masked entries emit zero.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    n, c, p = saved.values.shape
    if grad_out.shape != (n, c, p):
        raise ShapeMismatchError(
            f"grad shape {grad_out.shape} does not match pooled shape {(n, c, p)}"
        )
    hh, ww = saved.grid_shape
    grad_out = grad_out * saved.presence[:, None, :]
    grad_in = np.zeros((n, c, hh * ww), dtype=np.float64)
    if saved.mode == "avg":
        scale = np.zeros((n, p), dtype=np.float64)
        np.divide(1.0, saved.counts, out=scale, where=saved.counts > 0)
        scaled = grad_out * scale[:, None, :]
        for i in range(n):
            labels = superpixels.labels[i].ravel()
            valid = labels != IGNORE
            grad_in[i][:, valid] = scaled[i][:, labels[valid]]
    else:
        for i in range(n):
            for ch in range(c):
                present = saved.argmax_pixels[i, ch] >= 0
                np.add.at(
                    grad_in[i, ch],
                    saved.argmax_pixels[i, ch][present],
                    grad_out[i, ch][present],
                )
    return grad_in.reshape(n, c, hh, ww)


def temporal_pool_fwd(stack: RegionFeatureStack, mode: str = "avg") -> RegionFeatureMap:
    """Pool each region across its present frames (ascending frame order)."""
    _check_mode(mode)
    presence = stack.presence
    k = presence.sum(axis=0).astype(np.int64)
    if not k.any():
        raise NoPresentFrameError("no region is present in any frame")
    n, c, p = stack.values.shape
    values = np.zeros((c, p), dtype=np.float64)
    arg_frames = None
    if mode == "avg":
        sums = (stack.values * presence[:, None, :]).sum(axis=0)
        np.divide(sums, k, out=values, where=k > 0)
    else:
        masked = np.where(presence[:, None, :], stack.values, -np.inf)
        arg_frames = np.full((c, p), -1, dtype=np.int64)
        present = k > 0
        arg_frames[:, present] = np.argmax(masked[:, :, present], axis=0)
        values[:, present] = np.take_along_axis(
            masked[:, :, present], arg_frames[None, :, present], axis=0
        )[0]
    return RegionFeatureMap(
        values=values,
        frame_counts=k,
        source_presence=presence,
        mode=mode,
        arg_frames=arg_frames,
    )


def temporal_pool_bwd(grad_out: np.ndarray, saved: RegionFeatureMap) -> np.ndarray:
    """Gradient wrt the spatially pooled stack, shape (N, C, P).

    avg: every present frame receives grad/K; max: the recorded winning frame
    receives the full gradient. Masked regions (K = 0) emit zero.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    n, p = saved.source_presence.shape
    c = saved.channels
    if grad_out.shape != (c, p):
        raise ShapeMismatchError(
            f"grad shape {grad_out.shape} does not match pooled shape {(c, p)}"
        )
    grad_in = np.zeros((n, c, p), dtype=np.float64)
    present = saved.frame_counts > 0
    if saved.mode == "avg":
        scale = np.zeros(p, dtype=np.float64)
        np.divide(1.0, saved.frame_counts, out=scale, where=present)
        grad_in[:] = (grad_out * scale) * saved.source_presence[:, None, :]
    else:
        cc, jj = np.nonzero(present[None, :].repeat(c, axis=0))
        frames = saved.arg_frames[cc, jj]
        np.add.at(grad_in, (frames, cc, jj), grad_out[cc, jj])
    return grad_in


def region_to_pixel_fwd(region_map: RegionFeatureMap, target_map: np.ndarray) -> np.ndarray:
    """Broadcast region values onto the target frame, shape (C, H, W).

    Every pixel of target_map must reference a region with a pooled value
    (index < P and K > 0; the IGNORE sentinel is not allowed here).
    """
    target_map = np.asarray(target_map)
    if target_map.ndim != 2:
        raise ShapeMismatchError(f"target map must be 2-d, got shape {target_map.shape}")
    p = region_map.max_regions
    bad = (target_map < 0) | (target_map >= p)
    if not bad.any():
        bad = region_map.frame_counts[target_map] == 0
    if bad.any():
        x, y = np.argwhere(bad)[0]
        raise MissingRegionValueError(
            f"target pixel ({x}, {y}) references region {target_map[x, y]} "
            f"which has no pooled value"
        )
    return region_map.values[:, target_map]


def region_to_pixel_bwd(grad_out: np.ndarray, target_map: np.ndarray, max_regions: int) -> np.ndarray:
    """Gradient wrt region values: per-region row-major sum, shape (C, P)."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    target_map = np.asarray(target_map)
    if grad_out.ndim != 3 or grad_out.shape[1:] != target_map.shape:
        raise ShapeMismatchError(
            f"grad shape {grad_out.shape} does not match target map {target_map.shape}"
        )
    flat = target_map.ravel()
    grad_in = np.empty((grad_out.shape[0], max_regions), dtype=np.float64)
    for ch in range(grad_out.shape[0]):
        grad_in[ch] = np.bincount(flat, weights=grad_out[ch].ravel(), minlength=max_regions)
    return grad_in


@dataclass
class HeadState:
    """Saved forward state of the composed head."""

    spatial: RegionFeatureStack
    temporal: RegionFeatureMap
    target_map: np.ndarray
    superpixels: SuperpixelStack


def pool_head_fwd(
    features: FeatureStack,
    superpixels: SuperpixelStack,
    table,
    spatial_mode: str = "avg",
    temporal_mode: str = "avg",
) -> tuple[np.ndarray, HeadState]:
    """spatial -> temporal -> region-to-pixel on a canonically relabeled stack.

    `features` rows must correspond to table.sampled_frames (same order as the
    canonical stack's rows); the target frame's row provides the broadcast map.
    Returns the dense (C, H, W) output and the state pool_head_bwd needs.
    """
    sampled = table.sampled_frames
    if features.n_frames != len(sampled) or superpixels.n_frames != len(sampled):
        raise ShapeMismatchError(
            f"expected one row per sampled frame ({len(sampled)}), got "
            f"{features.n_frames} feature rows / {superpixels.n_frames} superpixel rows"
        )
    target_row = sampled.index(table.target_frame)
    spatial = spatial_pool_fwd(features, superpixels, spatial_mode)
    for j in table.target_regions:
        if table.frame_count(j) != int(spatial.presence[:, j].sum()):
            raise ValidationError(
                f"table and canonical stack disagree on K for region {j}"
            )
    temporal = temporal_pool_fwd(spatial, temporal_mode)
    target_map = superpixels.labels[target_row]
    dense = region_to_pixel_fwd(temporal, target_map)
    return dense, HeadState(
        spatial=spatial, temporal=temporal, target_map=target_map, superpixels=superpixels
    )


def pool_head_bwd(grad_dense: np.ndarray, state: HeadState) -> np.ndarray:
    """Gradient wrt the head's input features, shape (N, C, H, W)."""
    grad_regions = region_to_pixel_bwd(
        grad_dense, state.target_map, state.temporal.max_regions
    )
    grad_stack = temporal_pool_bwd(grad_regions, state.temporal)
    return spatial_pool_bwd(grad_stack, state.superpixels, state.spatial)
