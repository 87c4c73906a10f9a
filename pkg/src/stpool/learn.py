"""A minimal trainable head and the closed training loop.

The head is one linear map applied per pixel (class scores = W f + b). Those
scores flow through the pooling head (multi-view) or through spatial pooling
of the target frame alone (single-view), then into a pixel-wise softmax
cross-entropy against the target frame's labels. Gradients flow back through
every stage analytically; the optimizer is SGD with momentum and weight decay:

    v <- mu * v - lr * (g + wd * p);   p <- p + v
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import substream
from .correspond import CorrespondenceTable, SamplingPolicy, build_table, sample_frames
from .errors import AllPixelsIgnoredError, ShapeMismatchError, ValidationError
from .grid import IGNORE, FeatureStack, LabelMap
from .pooling import pool_head_bwd, pool_head_fwd


@dataclass
class LinearHead:
    """Per-pixel linear classifier: weights (ncl, C), bias (ncl,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError(
                f"head shapes disagree: weights {self.weights.shape}, bias {self.bias.shape}"
            )

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    def apply_dense(self, features: np.ndarray) -> np.ndarray:
        """(N, C, H, W) features -> (N, ncl, H, W) scores."""
        scores = np.einsum("oc,nchw->nohw", self.weights, features.astype(np.float64))
        return scores + self.bias[None, :, None, None]


def init_head(num_classes: int, channels: int, seed: int, scale: float = 0.01) -> LinearHead:
    rng = substream(seed, "head-init")
    return LinearHead(
        weights=scale * rng.standard_normal((num_classes, channels)),
        bias=np.zeros(num_classes),
    )


def cross_entropy(scores: np.ndarray, labels: LabelMap) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over non-ignored pixels.

    Returns (loss, gradient wrt scores); the gradient is
    (softmax - onehot) / count at labeled pixels and zero elsewhere.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3 or scores.shape[1:] != labels.labels.shape:
        raise ShapeMismatchError(
            f"scores shape {scores.shape} does not match labels {labels.labels.shape}"
        )
    if scores.shape[0] != labels.num_classes:
        raise ShapeMismatchError(
            f"scores have {scores.shape[0]} classes, labels expect {labels.num_classes}"
        )
    mask = labels.labels != IGNORE
    count = int(mask.sum())
    if count == 0:
        raise AllPixelsIgnoredError("cross entropy over zero labeled pixels")
    shifted = scores - scores.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=0, keepdims=True)
    lab = np.where(mask, labels.labels, 0)
    logp = shifted - np.log(exp.sum(axis=0, keepdims=True))
    picked = np.take_along_axis(logp, lab[None], axis=0)[0]
    loss = float(-(picked[mask]).sum(dtype=np.float64) / count)
    onehot = np.zeros_like(scores)
    np.put_along_axis(onehot, lab[None], 1.0, axis=0)
    grad = (softmax - onehot) * (mask[None] / count)
    return loss, grad


@dataclass
class SgdState:
    """Hyperparameters plus per-parameter velocity buffers."""

    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocities: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: SgdState
) -> dict[str, np.ndarray]:
    """One momentum-SGD update; returns new params, mutates state velocities."""
    if params.keys() != grads.keys():
        raise ValidationError(
            f"param/grad keys disagree: {sorted(params)} vs {sorted(grads)}"
        )
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"grad {name} has shape {g.shape}, param {p.shape}")
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p, dtype=np.float64)
        v = state.momentum * v - state.lr * (g + state.weight_decay * p)
        state.velocities[name] = v
        out[name] = p + v
    return out


@dataclass(frozen=True)
class TrainItem:
    """One prepared sequence: correspondences are head-independent, so they
    are built once and reused across epochs."""

    features: FeatureStack
    superpixels_canonical: object
    table: CorrespondenceTable
    target_labels: LabelMap


def prepare_item(
    bundle,
    target_frame: int,
    policy: SamplingPolicy,
    tau: float,
    view_mode: str = "multi",
) -> TrainItem:
    """Sample frames, build the correspondence table, slice the features."""
    if view_mode not in ("single", "multi"):
        raise ValidationError(f"view_mode must be 'single' or 'multi', got {view_mode!r}")
    if view_mode == "single":
        sampled = [target_frame]
    else:
        sampled = sample_frames(bundle.n_frames, target_frame, policy)
    table, canonical = build_table(target_frame, sampled, bundle.superpixels, bundle.flows, tau)
    features = FeatureStack(bundle.features.data[np.array(sampled)])
    return TrainItem(
        features=features,
        superpixels_canonical=canonical,
        table=table,
        target_labels=bundle.labels[target_frame],
    )


def forward_item(
    head: LinearHead, item: TrainItem, spatial_mode: str, temporal_mode: str
):
    """Head scores -> pooled dense scores; returns (dense, head_state, scores)."""
    scores = head.apply_dense(item.features.data)
    dense, state = pool_head_fwd(
        FeatureStack(scores),
        item.superpixels_canonical,
        item.table,
        spatial_mode,
        temporal_mode,
    )
    return dense, state, scores


def train(
    bundles,
    policy: SamplingPolicy,
    head: LinearHead,
    optimizer: SgdState,
    epochs: int,
    view_mode: str = "multi",
    spatial_mode: str = "avg",
    temporal_mode: str = "avg",
    tau: float = 0.4,
    target_frames=None,
) -> tuple[LinearHead, list[float]]:
    """Train the head; returns (trained head, per-epoch mean loss).

    One optimizer step per sequence per epoch, sequences in given order;
    fully deterministic for a fixed seed and single thread. epochs = 0
    returns the head unchanged with an empty trace.
    """
    if epochs < 0:
        raise ValidationError(f"epochs must be >= 0, got {epochs}")
    bundles = list(bundles)
    if target_frames is None:
        target_frames = [b.n_frames // 2 for b in bundles]
    items = [
        prepare_item(b, t, policy, tau, view_mode)
        for b, t in zip(bundles, target_frames)
    ]
    params = {"weights": head.weights.copy(), "bias": head.bias.copy()}
    trace: list[float] = []
    for _ in range(epochs):
        total = 0.0
        for item in items:
            current = LinearHead(params["weights"], params["bias"])
            dense, state, _ = forward_item(current, item, spatial_mode, temporal_mode)
            loss, grad_dense = cross_entropy(dense, item.target_labels)
            grad_scores = pool_head_bwd(grad_dense, state)
            grads = {
                "weights": np.einsum(
                    "nohw,nchw->oc", grad_scores, item.features.data.astype(np.float64)
                ),
                "bias": grad_scores.sum(axis=(0, 2, 3)),
            }
            params = sgd_step(params, grads, optimizer)
            total += loss
        trace.append(total / len(items))
    return LinearHead(params["weights"], params["bias"]), trace


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    coords_checked: int
    worst_coord: tuple[int, ...]
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    fn,
    x0: np.ndarray,
    seed: int = 0,
    num_coords: int = 200,
    step: float = 1e-5,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare fn's analytic gradient against central finite differences.

    fn(x) must return (scalar loss, gradient like x). Checks num_coords
    randomly chosen coordinates (all of them when x0 is smaller); the
    relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    _, analytic = fn(x0)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x0.shape:
        raise ShapeMismatchError(
            f"gradient shape {analytic.shape} does not match input {x0.shape}"
        )
    total = x0.size
    if total <= num_coords:
        coords = np.arange(total)
    else:
        rng = substream(seed, "grad-check")
        coords = rng.choice(total, size=num_coords, replace=False)
    worst, worst_coord = 0.0, (0,)
    flat = x0.ravel()
    for idx in coords:
        bump = np.zeros_like(flat)
        bump[idx] = step
        hi, _ = fn((flat + bump).reshape(x0.shape))
        lo, _ = fn((flat - bump).reshape(x0.shape))
        numeric = (hi - lo) / (2 * step)
        a = float(analytic.ravel()[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst:
            worst = rel
            worst_coord = np.unravel_index(int(idx), x0.shape)
    return GradCheckReport(
        max_rel_error=worst,
        coords_checked=len(coords),
        worst_coord=tuple(int(v) for v in worst_coord),
        tolerance=tolerance,
    )
