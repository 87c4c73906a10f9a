"""Synthetic rigid-motion scenes with exact flow and known correspondences.

A scene is a stack of frames containing rectangular objects that translate
with constant integer per-frame velocities over a static background (zero
rounding error by construction). Later objects occlude earlier ones. Each
object is split into `g` vertical strips and every strip is its own region;
the background is one region per frame. Region indices are stable across
frames (background = 0, object o strip s = 1 + sum of earlier objects' g + s),
which is what makes the generator's correspondence table exact: region r in
frame i corresponds to region r in frame t whenever both are visible.

Features are per-class mean vectors plus iid Gaussian noise; the flow fields
are exact for the visible surface at every pixel.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .config import format_kv, parse_kv_file, substream
from .errors import ConfigError, DataFormatError, SceneSpecError
from .grid import FeatureStack, FlowField, LabelMap, SuperpixelStack


@dataclass(frozen=True)
class ObjectSpec:
    """Rigid rectangle: top-left corner (x, y), size (h, w), integer
    per-frame velocity (vx, vy), class label, and strip count g >= 1."""

    x: int
    y: int
    h: int
    w: int
    vx: int
    vy: int
    cls: int
    g: int = 1


@dataclass(frozen=True)
class SceneSpec:
    frames: int
    height: int
    width: int
    channels: int
    background_class: int
    noise_std: float
    seed: int
    class_means: tuple[tuple[float, ...], ...]
    objects: tuple[ObjectSpec, ...] = ()

    @property
    def num_classes(self) -> int:
        return len(self.class_means)

    def validate(self) -> None:
        if self.frames < 1:
            raise SceneSpecError(f"frames must be >= 1, got {self.frames}")
        if self.height < 1 or self.width < 1:
            raise SceneSpecError(f"grid must be non-empty, got {self.height}x{self.width}")
        if self.channels < 1:
            raise SceneSpecError(f"channels must be >= 1, got {self.channels}")
        if not self.class_means:
            raise SceneSpecError("at least one class mean is required")
        for cls, mean in enumerate(self.class_means):
            if len(mean) != self.channels:
                raise SceneSpecError(
                    f"class mean {cls} has {len(mean)} entries, expected {self.channels}"
                )
        if not 0 <= self.background_class < self.num_classes:
            raise SceneSpecError(
                f"background class {self.background_class} outside [0, {self.num_classes})"
            )
        if self.noise_std < 0:
            raise SceneSpecError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.seed < 0:
            raise SceneSpecError(f"seed must be >= 0, got {self.seed}")
        for idx, obj in enumerate(self.objects):
            if obj.h < 1 or obj.w < 1:
                raise SceneSpecError(f"object {idx} must be non-empty, got {obj.h}x{obj.w}")
            if obj.g < 1:
                raise SceneSpecError(f"object {idx} strip count must be >= 1, got {obj.g}")
            if obj.g > obj.w:
                raise SceneSpecError(
                    f"object {idx} cannot split width {obj.w} into {obj.g} strips"
                )
            if not 0 <= obj.cls < self.num_classes:
                raise SceneSpecError(
                    f"object {idx} class {obj.cls} outside [0, {self.num_classes})"
                )
            for k in range(self.frames):
                x, y = obj.x + k * obj.vx, obj.y + k * obj.vy
                if not (0 <= x and x + obj.h <= self.height and 0 <= y and y + obj.w <= self.width):
                    raise SceneSpecError(
                        f"object {idx} leaves the {self.height}x{self.width} grid at frame {k}"
                    )

    def region_index(self, obj: int, strip: int) -> int:
        """Stable region index of one object strip (background is 0)."""
        return 1 + sum(o.g for o in self.objects[:obj]) + strip

    @property
    def max_regions(self) -> int:
        return 1 + sum(o.g for o in self.objects)


@dataclass(frozen=True)
class SceneBundle:
    """A generated (or ingested) sequence: everything the pipeline consumes.

    flows holds one forward and one backward field per consecutive frame pair.
    visible[i] is the set of region indices used in frame i; together with the
    generator's stable indexing it encodes the exact correspondence table.
    """

    features: FeatureStack
    superpixels: SuperpixelStack
    flows: tuple[FlowField, ...]
    labels: tuple[LabelMap, ...]
    visible: tuple[frozenset[int], ...] = field(repr=False)
    num_classes: int
    spec: SceneSpec | None = None

    @property
    def n_frames(self) -> int:
        return self.features.n_frames


def _strip_columns(y0: int, w: int, g: int) -> list[tuple[int, int]]:
    """Column ranges [lo, hi) of the g vertical strips, left to right."""
    base, extra = divmod(w, g)
    out, lo = [], y0
    for s in range(g):
        width = base + (1 if s < extra else 0)
        out.append((lo, lo + width))
        lo += width
    return out


def generate(spec: SceneSpec) -> SceneBundle:
    """Render the scene: labels, regions, exact flow, noisy features, truth."""
    spec.validate()
    n, hh, ww = spec.frames, spec.height, spec.width
    class_maps = np.full((n, hh, ww), spec.background_class, dtype=np.int64)
    region_maps = np.zeros((n, hh, ww), dtype=np.int64)
    fwd = np.zeros((max(n - 1, 0), hh, ww, 2), dtype=np.float64)
    bwd = np.zeros((max(n - 1, 0), hh, ww, 2), dtype=np.float64)

    # painter's order: later objects overwrite earlier ones
    for k in range(n):
        for idx, obj in enumerate(spec.objects):
            x, y = obj.x + k * obj.vx, obj.y + k * obj.vy
            class_maps[k, x : x + obj.h, y : y + obj.w] = obj.cls
            for s, (lo, hi) in enumerate(_strip_columns(y, obj.w, obj.g)):
                region_maps[k, x : x + obj.h, lo:hi] = spec.region_index(idx, s)
            if k < n - 1:
                fwd[k, x : x + obj.h, y : y + obj.w] = (obj.vx, obj.vy)
            if k > 0:
                bwd[k - 1, x : x + obj.h, y : y + obj.w] = (-obj.vx, -obj.vy)

    means = np.asarray(spec.class_means, dtype=np.float64)
    features = means[class_maps].transpose(0, 3, 1, 2)
    if spec.noise_std > 0:
        rng = substream(spec.seed, "feature-noise")
        features = features + spec.noise_std * rng.standard_normal(features.shape)

    flows: list[FlowField] = []
    for k in range(n - 1):
        flows.append(FlowField(fwd[k], "forward", k))
    for k in range(n - 1):
        flows.append(FlowField(bwd[k], "backward", k))

    visible = tuple(frozenset(int(v) for v in np.unique(region_maps[k])) for k in range(n))
    return SceneBundle(
        features=FeatureStack(features),
        superpixels=SuperpixelStack(region_maps, spec.max_regions),
        flows=tuple(flows),
        labels=tuple(LabelMap(class_maps[k], spec.num_classes) for k in range(n)),
        visible=visible,
        num_classes=spec.num_classes,
        spec=spec,
    )


def corrupt_flow(bundle: SceneBundle, noise_std: float, seed: int) -> SceneBundle:
    """Add iid Gaussian noise to every flow field; noise_std 0 is a no-op."""
    if noise_std < 0:
        raise SceneSpecError(f"noise_std must be >= 0, got {noise_std}")
    if noise_std == 0:
        return bundle
    rng = substream(seed, "corrupt-flow")
    noisy = tuple(
        FlowField(f.displacement + noise_std * rng.standard_normal(f.displacement.shape),
                  f.direction, f.frame)
        for f in bundle.flows
    )
    return SceneBundle(
        features=bundle.features,
        superpixels=bundle.superpixels,
        flows=noisy,
        labels=bundle.labels,
        visible=bundle.visible,
        num_classes=bundle.num_classes,
        spec=bundle.spec,
    )


def truth_rows(bundle: SceneBundle, target: int, frames=None) -> list[tuple[int, int, int]]:
    """Exact correspondence rows (frame, src_region, target_region) vs target.

    A region corresponds to itself wherever it is visible, including the
    target frame's self rows. Restricted to `frames` when given.
    """
    if not 0 <= target < bundle.n_frames:
        raise SceneSpecError(f"target frame {target} outside [0, {bundle.n_frames})")
    frame_list = range(bundle.n_frames) if frames is None else frames
    rows = []
    for i in frame_list:
        for r in sorted(bundle.visible[i] & bundle.visible[target]):
            rows.append((int(i), r, r))
    rows.sort()
    return rows


# --- scene spec config -----------------------------------------------------

_SCALAR_KEYS = {"frames", "height", "width", "channels", "background_class", "noise_std", "seed"}
_OBJECT_FIELDS = {"x", "y", "h", "w", "vx", "vy", "cls", "g"}


def parse_scene_spec(entries: dict[str, str], origin: str = "<scene>") -> SceneSpec:
    """Build a SceneSpec from flat key=value entries; unknown keys are errors.

    Expected keys: frames, height, width, channels, background_class,
    noise_std, seed, class_mean_<k> (comma-separated floats, k = 0..ncl-1)
    and object_<k> (comma-separated field=value pairs, fields x y h w vx vy
    cls and optional g).
    """
    means: dict[int, tuple[float, ...]] = {}
    objects: dict[int, ObjectSpec] = {}
    scalars: dict[str, str] = {}
    for key, value in entries.items():
        if key in _SCALAR_KEYS:
            scalars[key] = value
        elif key.startswith("class_mean_"):
            means[_key_index(key, "class_mean_", origin)] = _parse_floats(key, value, origin)
        elif key.startswith("object_"):
            objects[_key_index(key, "object_", origin)] = _parse_object(key, value, origin)
        else:
            raise ConfigError(f"{origin}: unknown key {key!r}")
    for name in sorted(_SCALAR_KEYS - scalars.keys()):
        raise ConfigError(f"{origin}: missing key {name!r}")
    if sorted(means) != list(range(len(means))):
        raise ConfigError(f"{origin}: class_mean_<k> keys must be contiguous from 0")
    if sorted(objects) != list(range(len(objects))):
        raise ConfigError(f"{origin}: object_<k> keys must be contiguous from 0")

    def _int(name: str) -> int:
        try:
            return int(scalars[name])
        except ValueError:
            raise ConfigError(f"{origin}: key {name!r} must be an integer, got {scalars[name]!r}")

    try:
        noise = float(scalars["noise_std"])
    except ValueError:
        raise ConfigError(f"{origin}: key 'noise_std' must be a number, got {scalars['noise_std']!r}")
    spec = SceneSpec(
        frames=_int("frames"),
        height=_int("height"),
        width=_int("width"),
        channels=_int("channels"),
        background_class=_int("background_class"),
        noise_std=noise,
        seed=_int("seed"),
        class_means=tuple(means[k] for k in range(len(means))),
        objects=tuple(objects[k] for k in range(len(objects))),
    )
    spec.validate()
    return spec


def load_scene_spec(path: str) -> SceneSpec:
    return parse_scene_spec(parse_kv_file(path), origin=path)


def _key_index(key: str, prefix: str, origin: str) -> int:
    try:
        return int(key[len(prefix):])
    except ValueError:
        raise ConfigError(f"{origin}: malformed key {key!r}")


def _parse_floats(key: str, value: str, origin: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in value.split(","))
    except ValueError:
        raise ConfigError(f"{origin}: key {key!r} must be comma-separated numbers, got {value!r}")


def _parse_object(key: str, value: str, origin: str) -> ObjectSpec:
    fields: dict[str, int] = {}
    for part in value.split(","):
        if "=" not in part:
            raise ConfigError(f"{origin}: {key}: expected field=value pairs, got {part.strip()!r}")
        name, val = (s.strip() for s in part.split("=", 1))
        if name not in _OBJECT_FIELDS:
            raise ConfigError(f"{origin}: {key}: unknown object field {name!r}")
        if name in fields:
            raise ConfigError(f"{origin}: {key}: duplicate object field {name!r}")
        try:
            fields[name] = int(val)
        except ValueError:
            raise ConfigError(f"{origin}: {key}: field {name!r} must be an integer, got {val!r}")
    missing = _OBJECT_FIELDS - {"g"} - fields.keys()
    if missing:
        raise ConfigError(f"{origin}: {key}: missing object fields {sorted(missing)}")
    return ObjectSpec(**fields)


# --- bundle files ------------------------------------------------------------

TRUTH_HEADER = "frame,src_region,target_region"


def write_truth_csv(path: str, rows: list[tuple[int, int, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRUTH_HEADER + "\n")
        for frame, src, tgt in rows:
            fh.write(f"{frame},{src},{tgt}\n")


def read_truth_csv(path: str) -> list[tuple[int, int, int]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != TRUTH_HEADER:
        raise DataFormatError(f"{path}: expected header {TRUTH_HEADER!r}")
    rows = []
    for line in lines[1:]:
        frame, src, tgt = line.split(",")
        rows.append((int(frame), int(src), int(tgt)))
    return rows


def write_bundle(bundle: SceneBundle, out_dir: str, target_frame: int) -> list[str]:
    """Write the on-disk bundle; returns the file names written."""
    os.makedirs(out_dir, exist_ok=True)
    names = ["bundle.cfg", "features.tnsr", "superpixels.imap", "labels.imap", "truth.csv"]
    tensorio.write_tensor(os.path.join(out_dir, "features.tnsr"), bundle.features.data)
    tensorio.write_index_map(os.path.join(out_dir, "superpixels.imap"), bundle.superpixels.labels)
    label_stack = np.stack([lm.labels for lm in bundle.labels])
    tensorio.write_index_map(os.path.join(out_dir, "labels.imap"), label_stack)
    write_truth_csv(os.path.join(out_dir, "truth.csv"), truth_rows(bundle, target_frame))
    if bundle.n_frames >= 2:
        steps = bundle.n_frames - 1
        fwd = np.stack([f.displacement for f in bundle.flows[:steps]])
        bwd = np.stack([f.displacement for f in bundle.flows[steps:]])
        tensorio.write_tensor(os.path.join(out_dir, "flow_forward.tnsr"), fwd)
        tensorio.write_tensor(os.path.join(out_dir, "flow_backward.tnsr"), bwd)
        names += ["flow_forward.tnsr", "flow_backward.tnsr"]
    manifest = {
        "frames": bundle.n_frames,
        "height": bundle.features.height,
        "width": bundle.features.width,
        "channels": bundle.features.channels,
        "num_classes": bundle.num_classes,
        "max_regions": bundle.superpixels.max_regions,
        "target_frame": target_frame,
    }
    with open(os.path.join(out_dir, "bundle.cfg"), "w", encoding="utf-8") as fh:
        fh.write(format_kv(manifest))
    return sorted(names)


def read_bundle(bundle_dir: str) -> tuple[SceneBundle, int]:
    """Load a written bundle; returns (bundle, target_frame)."""
    manifest_path = os.path.join(bundle_dir, "bundle.cfg")
    manifest = parse_kv_file(manifest_path)
    n = int(manifest["frames"])
    num_classes = int(manifest["num_classes"])
    max_regions = int(manifest["max_regions"])
    target_frame = int(manifest["target_frame"])
    features = FeatureStack(tensorio.read_tensor(os.path.join(bundle_dir, "features.tnsr")))
    region_maps = tensorio.read_index_map(os.path.join(bundle_dir, "superpixels.imap"))
    label_stack = tensorio.read_index_map(os.path.join(bundle_dir, "labels.imap"))
    flows: list[FlowField] = []
    if n >= 2:
        fwd = tensorio.read_tensor(os.path.join(bundle_dir, "flow_forward.tnsr"))
        bwd = tensorio.read_tensor(os.path.join(bundle_dir, "flow_backward.tnsr"))
        flows += [FlowField(fwd[k], "forward", k) for k in range(n - 1)]
        flows += [FlowField(bwd[k], "backward", k) for k in range(n - 1)]
    superpixels = SuperpixelStack(region_maps, max_regions)
    visible = tuple(
        frozenset(superpixels.used_regions(k)) for k in range(n)
    )
    bundle = SceneBundle(
        features=features,
        superpixels=superpixels,
        flows=tuple(flows),
        labels=tuple(LabelMap(label_stack[k], num_classes) for k in range(n)),
        visible=visible,
        num_classes=num_classes,
        spec=None,
    )
    return bundle, target_frame
