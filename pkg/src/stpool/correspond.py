"""Region correspondence between a target frame and its support frames.

A source region matches a target region when the intersection-over-union is
high in BOTH directions: the source region warped into the target frame
against the target region (iou_fwd), and the target region warped into the
source frame against the source region (iou_bwd). A pair survives when
min(iou_fwd, iou_bwd) > tau; each target region keeps its best-scoring source
region per frame, ties going to the lowest source index.

Warping composes per-step flow by iterative advection: a tracked point moves
by the flow sampled at its nearest-integer position (half-up rounding); a
point whose rounded position leaves the grid at any step is lost. Warped
pixel sets are deduplicated after rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import substream
from .errors import (
    DataFormatError,
    FrameRangeError,
    MissingFlowError,
    ValidationError,
)
from .grid import IGNORE, FlowField, SuperpixelStack


@dataclass(frozen=True)
class MatchScore:
    iou_forward: float
    iou_backward: float

    @property
    def score(self) -> float:
        return min(self.iou_forward, self.iou_backward)


@dataclass(frozen=True)
class SamplingPolicy:
    """How support frames are chosen around a target frame.

    Candidates are t +- k*interval inside the sequence, alternating sides
    (+, -, +, ...) and continuing on the remaining side when one runs out,
    truncated at max_candidates. sample_size frames including the target are
    drawn uniformly from the candidates. direction "past" keeps only frames
    before the target. max_distance, when set, drops candidates farther than
    that many frames from the target.
    """

    interval: int = 3
    max_candidates: int = 100
    sample_size: int = 11
    direction: str = "both"
    seed: int = 0
    max_distance: int | None = None

    def __post_init__(self):
        if self.interval < 1:
            raise ValidationError(f"interval must be >= 1, got {self.interval}")
        if self.sample_size < 1:
            raise ValidationError(f"sample_size must be >= 1, got {self.sample_size}")
        if self.max_candidates < self.sample_size - 1:
            raise ValidationError(
                f"max_candidates {self.max_candidates} < sample_size - 1 "
                f"({self.sample_size - 1})"
            )
        if self.direction not in ("both", "past"):
            raise ValidationError(f"direction must be 'both' or 'past', got {self.direction!r}")
        if self.max_distance is not None and self.max_distance < 1:
            raise ValidationError(f"max_distance must be >= 1, got {self.max_distance}")


@dataclass
class CorrespondenceTable:
    """Per-target-region matches: region j -> {frame -> (source region, score)}.

    Every target region has a self entry (frame = target_frame, source = j,
    IoU 1.0 both ways), so K(j) = len(matches[j]) counts the target itself.
    """

    target_frame: int
    sampled_frames: tuple[int, ...]
    matches: dict[int, dict[int, tuple[int, MatchScore]]]

    def frame_count(self, region: int) -> int:
        return len(self.matches[region])

    @property
    def target_regions(self) -> list[int]:
        return sorted(self.matches)


def compose_flow(flows, from_frame: int, to_frame: int) -> np.ndarray:
    """Total displacement from from_frame to to_frame by iterative advection.

    Returns an (H, W, 2) float array; pixels whose track leaves the grid hold
    NaN. Raises MissingFlowError when a needed per-step field is absent.
    """
    from_frame, to_frame = int(from_frame), int(to_frame)
    if from_frame == to_frame:
        raise ValidationError("compose_flow requires from_frame != to_frame")
    steps = _flow_steps(flows, from_frame, to_frame)
    hh, ww = steps[0].height, steps[0].width
    xs, ys = np.meshgrid(np.arange(hh, dtype=np.float64),
                         np.arange(ww, dtype=np.float64), indexing="ij")
    pos = np.stack([xs, ys], axis=-1)
    start = pos.copy()
    lost = np.zeros((hh, ww), dtype=bool)
    for step in steps:
        if step.displacement.shape[:2] != (hh, ww):
            raise ValidationError(
                f"flow field grids disagree: {(hh, ww)} vs {step.displacement.shape[:2]}"
            )
        ix = np.floor(pos[..., 0] + 0.5).astype(np.int64)
        iy = np.floor(pos[..., 1] + 0.5).astype(np.int64)
        alive = ~lost
        pos[alive] += step.displacement[ix[alive], iy[alive]]
        ix = np.floor(pos[..., 0] + 0.5)
        iy = np.floor(pos[..., 1] + 0.5)
        lost |= (ix < 0) | (ix >= hh) | (iy < 0) | (iy >= ww)
    disp = pos - start
    disp[lost] = np.nan
    return disp


def _flow_steps(flows, from_frame: int, to_frame: int) -> list[FlowField]:
    index: dict[tuple[str, int], FlowField] = {}
    for f in flows:
        index[(f.direction, f.frame)] = f
    steps = []
    if to_frame > from_frame:
        for k in range(from_frame, to_frame):
            key = ("forward", k)
            if key not in index:
                raise MissingFlowError(f"missing forward flow for step {k} -> {k + 1}")
            steps.append(index[key])
    else:
        for k in range(from_frame, to_frame, -1):
            key = ("backward", k - 1)
            if key not in index:
                raise MissingFlowError(f"missing backward flow for step {k} -> {k - 1}")
            steps.append(index[key])
    return steps


def warp_region(pixels, displacement: np.ndarray) -> set[tuple[int, int]]:
    """Displace pixels, round half-up, drop lost/off-grid, deduplicate."""
    hh, ww = displacement.shape[:2]
    out: set[tuple[int, int]] = set()
    for x, y in pixels:
        dx, dy = displacement[x, y]
        if not (np.isfinite(dx) and np.isfinite(dy)):
            continue
        tx = int(np.floor(x + dx + 0.5))
        ty = int(np.floor(y + dy + 0.5))
        if 0 <= tx < hh and 0 <= ty < ww:
            out.add((tx, ty))
    return out


def iou(a, b) -> float:
    """Intersection over union of two pixel sets; both empty -> 0.0."""
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def _warp_flat(flat_pixels: np.ndarray, disp: np.ndarray, width: int) -> np.ndarray:
    """Vectorized warp of flat pixel indices; returns unique flat landings."""
    x = flat_pixels // width
    y = flat_pixels % width
    dx = disp[x, y, 0]
    dy = disp[x, y, 1]
    ok = np.isfinite(dx) & np.isfinite(dy)
    tx = np.floor(x[ok] + dx[ok] + 0.5).astype(np.int64)
    ty = np.floor(y[ok] + dy[ok] + 0.5).astype(np.int64)
    hh, ww = disp.shape[:2]
    inside = (tx >= 0) & (tx < hh) & (ty >= 0) & (ty < ww)
    return np.unique(tx[inside] * width + ty[inside])


def _directional_ious(
    warped: dict[int, np.ndarray],
    dest_sets: dict[int, np.ndarray],
    dest_labels_flat: np.ndarray,
    max_regions: int,
) -> dict[tuple[int, int], float]:
    """IoU of every warped source set against every destination region it
    touches. Keys are (source region, destination region)."""
    out: dict[tuple[int, int], float] = {}
    for src, landed in warped.items():
        if landed.size == 0:
            continue
        hit = dest_labels_flat[landed]
        hit = hit[hit != IGNORE]
        if hit.size == 0:
            continue
        counts = np.bincount(hit, minlength=max_regions)
        for dest in np.nonzero(counts)[0]:
            inter = int(counts[dest])
            union = int(landed.size) + int(dest_sets[int(dest)].size) - inter
            out[(src, int(dest))] = inter / union
    return out


def match_frame_pair(
    target_frame: int,
    source_frame: int,
    superpixels: SuperpixelStack,
    flows,
    tau: float,
) -> list[tuple[int, int, MatchScore]]:
    """Match source-frame regions to target-frame regions.

    Returns (target region, source region, MatchScore) triples, sorted by
    target region: pairs with min(iou_fwd, iou_bwd) > tau, reduced to the
    best-scoring source per target region (ties -> lowest source index).
    One source region may serve several target regions.
    """
    if not 0 <= tau < 1:
        raise ValidationError(f"tau must be in [0, 1), got {tau}")
    if target_frame == source_frame:
        raise ValidationError("match_frame_pair requires distinct frames")
    width = superpixels.width
    src_sets = superpixels.flat_pixel_sets(source_frame)
    tgt_sets = superpixels.flat_pixel_sets(target_frame)
    disp_to_target = compose_flow(flows, source_frame, target_frame)
    disp_to_source = compose_flow(flows, target_frame, source_frame)
    warped_src = {r: _warp_flat(px, disp_to_target, width) for r, px in src_sets.items()}
    warped_tgt = {j: _warp_flat(px, disp_to_source, width) for j, px in tgt_sets.items()}
    tgt_flat = superpixels.labels[target_frame].ravel()
    src_flat = superpixels.labels[source_frame].ravel()
    fwd = _directional_ious(warped_src, tgt_sets, tgt_flat, superpixels.max_regions)
    bwd = _directional_ious(warped_tgt, src_sets, src_flat, superpixels.max_regions)

    best: dict[int, tuple[float, int]] = {}
    for (src, tgt), iou_fwd in fwd.items():
        iou_bwd = bwd.get((tgt, src), 0.0)
        score = min(iou_fwd, iou_bwd)
        if score <= tau:
            continue
        if tgt not in best or (score, -src) > (best[tgt][0], -best[tgt][1]):
            best[tgt] = (score, src)
    out = []
    for tgt in sorted(best):
        _, src = best[tgt]
        out.append((tgt, src, MatchScore(fwd[(src, tgt)], bwd[(tgt, src)])))
    return out


def build_table(
    target_frame: int,
    sampled_frames,
    superpixels: SuperpixelStack,
    flows,
    tau: float,
) -> tuple[CorrespondenceTable, SuperpixelStack]:
    """Match every sampled frame against the target and relabel canonically.

    The canonical stack has one row per sampled frame (ascending): the target
    row is unchanged; in every other row, pixels of a matched source region
    are rewritten to the matched target region's index and all remaining
    pixels to the IGNORE sentinel. When one source region is the best match
    of several target regions, the highest score (ties: lowest target index)
    keeps it; the displaced entries are dropped from the table so table and
    stack stay consistent.
    """
    sampled = sorted(int(f) for f in sampled_frames)
    if len(set(sampled)) != len(sampled):
        raise ValidationError("sampled frames must be distinct")
    if target_frame not in sampled:
        raise ValidationError(f"target frame {target_frame} not among sampled {sampled}")
    for f in sampled:
        if not 0 <= f < superpixels.n_frames:
            raise FrameRangeError(f"sampled frame {f} outside [0, {superpixels.n_frames})")

    target_regions = superpixels.used_regions(target_frame)
    matches: dict[int, dict[int, tuple[int, MatchScore]]] = {
        j: {target_frame: (j, MatchScore(1.0, 1.0))} for j in target_regions
    }
    canonical = np.full(
        (len(sampled), superpixels.height, superpixels.width), IGNORE, dtype=np.int64
    )
    for row, frame in enumerate(sampled):
        if frame == target_frame:
            canonical[row] = superpixels.labels[frame]
            continue
        pairs = match_frame_pair(target_frame, frame, superpixels, flows, tau)
        # one source region can back only one target region in the relabeled
        # stack; highest score wins, ties to the lowest target index
        per_source: dict[int, tuple[int, MatchScore]] = {}
        for tgt, src, ms in pairs:
            if src not in per_source or (ms.score, -tgt) > (
                per_source[src][1].score,
                -per_source[src][0],
            ):
                per_source[src] = (tgt, ms)
        frame_labels = superpixels.labels[frame]
        for src, (tgt, ms) in per_source.items():
            matches[tgt][frame] = (src, ms)
            canonical[row][frame_labels == src] = tgt
    max_regions = max(target_regions) + 1 if target_regions else 1
    table = CorrespondenceTable(
        target_frame=target_frame, sampled_frames=tuple(sampled), matches=matches
    )
    return table, SuperpixelStack(canonical, max_regions)


def candidate_frames(length: int, target: int, policy: SamplingPolicy) -> list[int]:
    """Candidate support frames in preference order (see SamplingPolicy)."""
    if not 0 <= target < length:
        raise FrameRangeError(f"target frame {target} outside [0, {length})")
    limit = policy.max_distance if policy.max_distance is not None else length
    offsets = []
    k = 1
    while True:
        step = k * policy.interval
        if step > limit:
            break
        fwd_ok = policy.direction == "both" and target + step < length
        bwd_ok = target - step >= 0
        if not fwd_ok and not bwd_ok:
            break
        if fwd_ok:
            offsets.append(target + step)
        if bwd_ok:
            offsets.append(target - step)
        k += 1
    return offsets[: policy.max_candidates]


def sample_frames(length: int, target: int, policy: SamplingPolicy) -> list[int]:
    """Target frame plus a uniform draw from the candidate frames, sorted.

    Draws sample_size - 1 candidates without replacement (all of them when
    fewer exist), seeded by the policy's named stream.
    """
    candidates = candidate_frames(length, target, policy)
    want = policy.sample_size - 1
    if len(candidates) > want:
        rng = substream(policy.seed, "frame-sample")
        picked = rng.choice(len(candidates), size=want, replace=False)
        chosen = [candidates[i] for i in picked]
    else:
        chosen = candidates
    return sorted([target] + chosen)


DEFAULT_BUCKET_EDGES = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2000)


@dataclass(frozen=True)
class StatsBucket:
    lo: int
    hi: float  # exclusive; inf for the open-ended last bucket
    region_fraction: float
    mean_matches: float
    count: int


def correspondence_stats(
    tables,
    superpixels_list,
    bucket_edges=DEFAULT_BUCKET_EDGES,
) -> list[StatsBucket]:
    """Bucket target regions by pixel count; report per-bucket share and mean K.

    tables and superpixels_list pair up element-wise (the stack each table was
    built from). Empty buckets are omitted; empty input gives an empty list.
    """
    edges = sorted(set(int(e) for e in bucket_edges))
    if not edges or edges[0] < 1:
        raise ValidationError(f"bucket edges must be positive, got {bucket_edges}")
    sizes, ks = [], []
    for table, sp in zip(tables, superpixels_list):
        sets = sp.flat_pixel_sets(table.target_frame)
        for j in table.target_regions:
            sizes.append(int(sets[j].size))
            ks.append(table.frame_count(j))
    if not sizes:
        return []
    bounds = [(edges[i], float(edges[i + 1])) for i in range(len(edges) - 1)]
    bounds.append((edges[-1], float("inf")))
    total = len(sizes)
    out = []
    for lo, hi in bounds:
        members = [k for s, k in zip(sizes, ks) if lo <= s < hi]
        if not members:
            continue
        out.append(
            StatsBucket(
                lo=lo,
                hi=hi,
                region_fraction=len(members) / total,
                mean_matches=sum(members) / len(members),
                count=len(members),
            )
        )
    return out


# --- CSV forms ---------------------------------------------------------------

CORRESPONDENCE_HEADER = "target_region,frame,source_region,iou_fwd,iou_bwd"
STATS_HEADER = "bucket_lo,bucket_hi,region_fraction,mean_matches,count"


def write_correspondence_csv(path: str, table: CorrespondenceTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CORRESPONDENCE_HEADER + "\n")
        for j in table.target_regions:
            for frame in sorted(table.matches[j]):
                src, ms = table.matches[j][frame]
                fh.write(f"{j},{frame},{src},{ms.iou_forward!r},{ms.iou_backward!r}\n")


def read_correspondence_csv(path: str) -> list[tuple[int, int, int, float, float]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CORRESPONDENCE_HEADER:
        raise DataFormatError(f"{path}: expected header {CORRESPONDENCE_HEADER!r}")
    out = []
    for line in lines[1:]:
        j, frame, src, f, b = line.split(",")
        out.append((int(j), int(frame), int(src), float(f), float(b)))
    return out


def write_stats_csv(path: str, buckets: list[StatsBucket]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(STATS_HEADER + "\n")
        for b in buckets:
            hi = "inf" if b.hi == float("inf") else str(int(b.hi))
            fh.write(f"{b.lo},{hi},{b.region_fraction!r},{b.mean_matches!r},{b.count}\n")
