"""Command-line pipeline: generate, match, infer, train, eval, sweep.

One flat key=value config file drives every command; a handful of flags
(--seed, --threads, --tau, --spatial-mode, --temporal-mode, --view-mode,
--out) override their config keys. Relative paths inside a config resolve
against the config file's directory.

Input selection: exactly one of
  scene = <scene spec path>            (the bundle is generated, seeded)
  features/superpixels/labels = <...>  (ingested containers; flow_forward /
                                        flow_backward required when frames > 1)

Exit codes: 0 ok, 1 validation error, 2 unreadable/malformed data, 3 internal.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import evaluate, learn, synth, tensorio
from .config import format_kv, parse_kv_file
from .correspond import (
    SamplingPolicy,
    build_table,
    correspondence_stats,
    sample_frames,
    write_correspondence_csv,
    write_stats_csv,
)
from .errors import (
    EXIT_INTERNAL,
    EXIT_IO,
    ConfigError,
    StpoolError,
    ValidationError,
)
from .grid import IGNORE, FeatureStack, FlowField, LabelMap, SuperpixelStack, validate_stack
from .synth import SceneBundle, generate, load_scene_spec


@dataclasses.dataclass
class PipelineConfig:
    scene: str | None = None
    features: str | None = None
    superpixels: str | None = None
    labels: str | None = None
    flow_forward: str | None = None
    flow_backward: str | None = None
    target_frame: int | None = None
    num_classes: int | None = None
    tau: float = 0.4
    interval: int = 3
    max_candidates: int = 100
    sample_size: int = 11
    direction: str = "both"
    max_distance: int | None = None
    seed: int = 0
    threads: int = 1
    spatial_mode: str = "avg"
    temporal_mode: str = "avg"
    view_mode: str = "multi"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    train_seeds: tuple[int, ...] | None = None
    model: str | None = None
    out: str | None = None
    pred: str | None = None
    gt: str | None = None
    bpr_tolerance: float = 2.0
    bpr_curve: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
    oracle: bool = False
    oracle_reference: int | None = None
    sweep_distances: tuple[int, ...] = (3, 6, 9, 12, 15)

    def policy(self) -> SamplingPolicy:
        return SamplingPolicy(
            interval=self.interval,
            max_candidates=self.max_candidates,
            sample_size=self.sample_size,
            direction=self.direction,
            seed=self.seed,
            max_distance=self.max_distance,
        )


_PATH_KEYS = {"scene", "features", "superpixels", "labels", "flow_forward",
              "flow_backward", "model", "pred", "gt"}
_INT_KEYS = {"target_frame", "num_classes", "interval", "max_candidates", "sample_size",
             "max_distance", "seed", "threads", "epochs"}
_FLOAT_KEYS = {"tau", "lr", "momentum", "weight_decay", "bpr_tolerance"}
_STR_KEYS = {"direction", "spatial_mode", "temporal_mode", "view_mode", "out"}
_INT_LIST_KEYS = {"train_seeds", "sweep_distances"}
_FLOAT_LIST_KEYS = {"bpr_curve"}
_BOOL_KEYS = {"oracle"}
_ALL_KEYS = (_PATH_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _INT_LIST_KEYS
             | _FLOAT_LIST_KEYS | _BOOL_KEYS)


def load_config(path: str, overrides: dict[str, object]) -> PipelineConfig:
    entries = parse_kv_file(path)
    base = os.path.dirname(os.path.abspath(path))
    values: dict[str, object] = {}
    for key, raw in entries.items():
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}: unknown key {key!r}")
        values[key] = _parse_value(path, key, raw, base)
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    cfg = PipelineConfig(**values)
    _validate_config(path, cfg)
    return cfg


def _parse_value(origin: str, key: str, raw: str, base: str) -> object:
    try:
        if key in _PATH_KEYS:
            return raw if os.path.isabs(raw) else os.path.join(base, raw)
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _INT_LIST_KEYS:
            return tuple(int(part) for part in raw.split(","))
        if key in _FLOAT_LIST_KEYS:
            return tuple(float(part) for part in raw.split(","))
        if key in _BOOL_KEYS:
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        return raw
    except ValueError:
        raise ConfigError(f"{origin}: key {key!r} has malformed value {raw!r}")


def _validate_config(origin: str, cfg: PipelineConfig) -> None:
    ingest = [cfg.features, cfg.superpixels, cfg.labels]
    if cfg.scene is not None and any(v is not None for v in ingest):
        raise ConfigError(f"{origin}: give either a scene spec or ingest paths, not both")
    if cfg.scene is None and any(v is None for v in ingest) and any(v is not None for v in ingest):
        raise ConfigError(f"{origin}: ingest needs features, superpixels and labels together")
    if (cfg.flow_forward is None) != (cfg.flow_backward is None):
        raise ConfigError(f"{origin}: flow_forward and flow_backward come as a pair")
    if cfg.threads < 1:
        raise ConfigError(f"{origin}: threads must be >= 1, got {cfg.threads}")
    if cfg.seed < 0:
        raise ConfigError(f"{origin}: seed must be >= 0, got {cfg.seed}")
    if not 0 <= cfg.tau < 1:
        raise ConfigError(f"{origin}: tau must be in [0, 1), got {cfg.tau}")
    for name in ("spatial_mode", "temporal_mode"):
        if getattr(cfg, name) not in ("avg", "max"):
            raise ConfigError(f"{origin}: {name} must be avg or max")
    if cfg.view_mode not in ("single", "multi"):
        raise ConfigError(f"{origin}: view_mode must be single or multi")
    if cfg.direction not in ("both", "past"):
        raise ConfigError(f"{origin}: direction must be both or past")


def _has_input(cfg: PipelineConfig) -> bool:
    return cfg.scene is not None or cfg.features is not None


def load_input_bundle(cfg: PipelineConfig) -> tuple[SceneBundle, int]:
    """Materialize the configured input; returns (bundle, target frame)."""
    if cfg.scene is not None:
        spec = load_scene_spec(cfg.scene)
        bundle = generate(spec)
    elif cfg.features is not None:
        bundle = _ingest(cfg)
    else:
        raise ConfigError("config provides no input (scene or ingest paths)")
    target = cfg.target_frame if cfg.target_frame is not None else bundle.n_frames // 2
    if not 0 <= target < bundle.n_frames:
        raise ValidationError(
            f"target frame {target} outside [0, {bundle.n_frames})"
        )
    return bundle, target


def _ingest(cfg: PipelineConfig) -> SceneBundle:
    features = FeatureStack(tensorio.read_tensor(cfg.features))
    region_maps = tensorio.read_index_map(cfg.superpixels)
    if region_maps.ndim != 3:
        raise ValidationError(f"superpixel map must be 3-d, got shape {region_maps.shape}")
    label_stack = tensorio.read_index_map(cfg.labels)
    if label_stack.ndim != 3:
        raise ValidationError(f"label map stack must be 3-d, got shape {label_stack.shape}")
    used = region_maps[region_maps != IGNORE]
    max_regions = int(used.max()) + 1 if used.size else 1
    superpixels = SuperpixelStack(region_maps, max_regions)
    validate_stack(features, superpixels)
    real = label_stack[label_stack != IGNORE]
    num_classes = cfg.num_classes if cfg.num_classes is not None else (
        int(real.max()) + 1 if real.size else 1
    )
    n = features.n_frames
    flows: list[FlowField] = []
    if cfg.flow_forward is not None:
        fwd = tensorio.read_tensor(cfg.flow_forward)
        bwd = tensorio.read_tensor(cfg.flow_backward)
        expected = (n - 1, features.height, features.width, 2)
        if fwd.shape != expected or bwd.shape != expected:
            raise ValidationError(
                f"flow shapes {fwd.shape}/{bwd.shape} do not match frames, expected {expected}"
            )
        flows += [FlowField(fwd[k], "forward", k) for k in range(n - 1)]
        flows += [FlowField(bwd[k], "backward", k) for k in range(n - 1)]
    elif n > 1:
        raise ConfigError("multi-frame ingest needs flow_forward/flow_backward")
    visible = tuple(frozenset(superpixels.used_regions(k)) for k in range(n))
    return SceneBundle(
        features=features,
        superpixels=superpixels,
        flows=tuple(flows),
        labels=tuple(LabelMap(label_stack[k], num_classes) for k in range(n)),
        visible=visible,
        num_classes=num_classes,
        spec=None,
    )


def _require_out(cfg: PipelineConfig) -> str:
    if cfg.out is None:
        raise ConfigError("this command requires an output directory (out key or --out)")
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


# --- trained head files ------------------------------------------------------

def save_head(out_dir: str, head: learn.LinearHead, opt: learn.SgdState) -> None:
    tensorio.write_tensor(os.path.join(out_dir, "head_weights.tnsr"), head.weights)
    tensorio.write_tensor(os.path.join(out_dir, "head_bias.tnsr"), head.bias)
    vel_w = opt.velocities.get("weights", np.zeros_like(head.weights))
    vel_b = opt.velocities.get("bias", np.zeros_like(head.bias))
    tensorio.write_tensor(os.path.join(out_dir, "head_vel_weights.tnsr"), vel_w)
    tensorio.write_tensor(os.path.join(out_dir, "head_vel_bias.tnsr"), vel_b)
    meta = {
        "num_classes": head.num_classes,
        "channels": head.channels,
        "lr": repr(opt.lr),
        "momentum": repr(opt.momentum),
        "weight_decay": repr(opt.weight_decay),
    }
    with open(os.path.join(out_dir, "head.cfg"), "w", encoding="utf-8") as fh:
        fh.write(format_kv(meta))


def load_head(model_dir: str) -> tuple[learn.LinearHead, dict[str, np.ndarray]]:
    meta_path = os.path.join(model_dir, "head.cfg")
    if not os.path.isfile(meta_path):
        raise ValidationError(f"missing model: no head.cfg under {model_dir}")
    meta = parse_kv_file(meta_path)
    head = learn.LinearHead(
        weights=tensorio.read_tensor(os.path.join(model_dir, "head_weights.tnsr")),
        bias=tensorio.read_tensor(os.path.join(model_dir, "head_bias.tnsr")),
    )
    if head.num_classes != int(meta["num_classes"]) or head.channels != int(meta["channels"]):
        raise ValidationError(f"{model_dir}: head metadata disagrees with tensors")
    velocities = {
        "weights": tensorio.read_tensor(os.path.join(model_dir, "head_vel_weights.tnsr")),
        "bias": tensorio.read_tensor(os.path.join(model_dir, "head_vel_bias.tnsr")),
    }
    return head, velocities


# --- commands ----------------------------------------------------------------

def cmd_generate(cfg: PipelineConfig) -> None:
    if cfg.scene is None:
        raise ConfigError("generate requires a scene spec (scene key)")
    out = _require_out(cfg)
    bundle, target = load_input_bundle(cfg)
    names = synth.write_bundle(bundle, out, target)
    for name in names:
        print(name)
    print(f"wrote {len(names)} files to {out}")


def cmd_match(cfg: PipelineConfig) -> None:
    out = _require_out(cfg)
    bundle, target = load_input_bundle(cfg)
    sampled = sample_frames(bundle.n_frames, target, cfg.policy())
    table, canonical = build_table(target, sampled, bundle.superpixels, bundle.flows, cfg.tau)
    write_correspondence_csv(os.path.join(out, "correspondences.csv"), table)
    tensorio.write_index_map(os.path.join(out, "canonical.imap"), canonical.labels)
    write_stats_csv(
        os.path.join(out, "stats.csv"),
        correspondence_stats([table], [bundle.superpixels]),
    )
    meta = {
        "target_frame": target,
        "sampled": ",".join(str(f) for f in sampled),
        "tau": repr(cfg.tau),
        "max_regions": canonical.max_regions,
    }
    with open(os.path.join(out, "match.cfg"), "w", encoding="utf-8") as fh:
        fh.write(format_kv(meta))
    for frame in sampled:
        hits = sum(1 for j in table.target_regions if frame in table.matches[j])
        tag = " (target)" if frame == target else ""
        print(f"frame {frame}: {hits} matched regions{tag}")


def _train_bundles(cfg: PipelineConfig) -> tuple[list[SceneBundle], list[int]]:
    if cfg.scene is not None and cfg.train_seeds is not None:
        spec = load_scene_spec(cfg.scene)
        bundles = [generate(dataclasses.replace(spec, seed=s)) for s in cfg.train_seeds]
    else:
        bundle, _ = load_input_bundle(cfg)
        bundles = [bundle]
    targets = []
    for b in bundles:
        t = cfg.target_frame if cfg.target_frame is not None else b.n_frames // 2
        if not 0 <= t < b.n_frames:
            raise ValidationError(f"target frame {t} outside [0, {b.n_frames})")
        targets.append(t)
    return bundles, targets


def cmd_train(cfg: PipelineConfig) -> None:
    out = _require_out(cfg)
    bundles, targets = _train_bundles(cfg)
    num_classes = bundles[0].num_classes
    channels = bundles[0].features.channels
    opt = learn.SgdState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if cfg.model is not None:
        head, velocities = load_head(cfg.model)
        opt.velocities = velocities
    else:
        head = learn.init_head(num_classes, channels, cfg.seed)
    head, trace = learn.train(
        bundles,
        cfg.policy(),
        head,
        opt,
        cfg.epochs,
        view_mode=cfg.view_mode,
        spatial_mode=cfg.spatial_mode,
        temporal_mode=cfg.temporal_mode,
        tau=cfg.tau,
        target_frames=targets,
    )
    save_head(out, head, opt)
    with open(os.path.join(out, "loss.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(trace):
            fh.write(f"{epoch},{loss!r}\n")
    final = trace[-1] if trace else float("nan")
    print(f"trained {cfg.epochs} epochs on {len(bundles)} sequences, final loss {final:.6f}")


def _infer_dense(cfg: PipelineConfig, bundle: SceneBundle, target: int, head: learn.LinearHead):
    item = learn.prepare_item(bundle, target, cfg.policy(), cfg.tau, cfg.view_mode)
    dense, _, _ = learn.forward_item(head, item, cfg.spatial_mode, cfg.temporal_mode)
    return dense


def cmd_infer(cfg: PipelineConfig) -> None:
    if cfg.model is None:
        raise ConfigError("infer requires a trained model (model key)")
    out = _require_out(cfg)
    bundle, target = load_input_bundle(cfg)
    head, _ = load_head(cfg.model)
    if head.channels != bundle.features.channels:
        raise ValidationError(
            f"model expects {head.channels} channels, bundle has {bundle.features.channels}"
        )
    dense = _infer_dense(cfg, bundle, target, head)
    prediction = np.argmax(dense, axis=0).astype(np.int64)
    tensorio.write_tensor(os.path.join(out, "scores.tnsr"), dense)
    tensorio.write_index_map(os.path.join(out, "prediction.imap"), prediction)
    print(f"target frame {target}: wrote scores.tnsr and prediction.imap to {out}")


def _load_eval_maps(cfg: PipelineConfig) -> tuple[LabelMap, LabelMap, SceneBundle | None, int]:
    if cfg.pred is None:
        raise ConfigError("eval requires a prediction map (pred key)")
    pred_raw = tensorio.read_index_map(cfg.pred)
    if pred_raw.ndim != 2:
        raise ValidationError(f"prediction must be 2-d, got shape {pred_raw.shape}")
    bundle, target = (None, cfg.target_frame if cfg.target_frame is not None else 0)
    if _has_input(cfg):
        bundle, target = load_input_bundle(cfg)
    if cfg.gt is not None:
        gt_raw = tensorio.read_index_map(cfg.gt)
        if gt_raw.ndim == 3:
            if not 0 <= target < gt_raw.shape[0]:
                raise ValidationError(f"target frame {target} outside gt stack")
            gt_raw = gt_raw[target]
        elif gt_raw.ndim != 2:
            raise ValidationError(f"ground truth must be 2-d or 3-d, got {gt_raw.shape}")
    elif bundle is not None:
        gt_raw = bundle.labels[target].labels
    else:
        raise ConfigError("eval needs ground truth (gt key or a configured input)")
    real = gt_raw[gt_raw != IGNORE]
    pred_real = pred_raw[pred_raw != IGNORE]
    derived = max(
        int(real.max()) + 1 if real.size else 1,
        int(pred_real.max()) + 1 if pred_real.size else 1,
    )
    if bundle is not None:
        num_classes = max(bundle.num_classes, derived)
    else:
        num_classes = cfg.num_classes if cfg.num_classes is not None else derived
    pred = LabelMap(pred_raw, num_classes)
    gt = LabelMap(gt_raw, num_classes)
    return pred, gt, bundle, target


def cmd_eval(cfg: PipelineConfig) -> None:
    out = _require_out(cfg)
    pred, gt, bundle, target = _load_eval_maps(cfg)
    cm = evaluate.ConfusionMatrix(gt.num_classes)
    cm.accumulate(pred, gt)
    summary = evaluate.metrics(cm)
    rows = summary.as_rows()
    p, r, f = evaluate.boundary_pr(pred, gt, cfg.bpr_tolerance)
    rows += [("bpr_precision", p), ("bpr_recall", r), ("bpr_f", f)]
    if cfg.oracle:
        rows += _oracle_rows(cfg, bundle, target, gt)
    evaluate.write_metrics_csv(os.path.join(out, "metrics.csv"), rows)
    curve = []
    for tol in cfg.bpr_curve:
        cp, cr, cf = evaluate.boundary_pr(pred, gt, tol)
        curve.append((tol, cp, cr, cf))
    evaluate.write_bpr_csv(os.path.join(out, "bpr.csv"), curve)
    width = max(len(name) for name, _ in rows)
    for name, value in rows:
        print(f"{name:<{width}}  {value:.4f}")


def _oracle_rows(
    cfg: PipelineConfig, bundle: SceneBundle | None, target: int, gt: LabelMap
) -> list[tuple[str, float]]:
    if bundle is None:
        raise ConfigError("oracle rows need a configured input (scene or ingest paths)")
    rows: list[tuple[str, float]] = []
    current = evaluate.oracle_label(bundle.superpixels, target, gt)
    cm = evaluate.ConfusionMatrix(gt.num_classes)
    cm.accumulate(current, gt)
    for name, value in evaluate.metrics(cm).as_rows():
        rows.append((f"oracle_current_{name}", value))
    if bundle.n_frames >= 2:
        ref = cfg.oracle_reference
        if ref is None:
            ref = target + 1 if target + 1 < bundle.n_frames else target - 1
        if not 0 <= ref < bundle.n_frames or ref == target:
            raise ValidationError(f"oracle reference frame {ref} invalid for target {target}")
        table, _ = build_table(
            target, sorted({target, ref}), bundle.superpixels, bundle.flows, cfg.tau
        )
        prop, coverage = evaluate.oracle_propagate(
            table, ref, bundle.labels[ref], bundle.superpixels
        )
        rows.append(("oracle_next_coverage", coverage))
        if coverage > 0:
            cm2 = evaluate.ConfusionMatrix(gt.num_classes)
            cm2.accumulate(prop, gt)
            if cm2.counts.sum() > 0:
                for name, value in evaluate.metrics(cm2).as_rows():
                    rows.append((f"oracle_next_{name}", value))
    return rows


def cmd_sweep(cfg: PipelineConfig) -> None:
    out = _require_out(cfg)
    bundle, target = load_input_bundle(cfg)
    if cfg.model is not None:
        head, _ = load_head(cfg.model)
    else:
        opt = learn.SgdState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        head = learn.init_head(bundle.num_classes, bundle.features.channels, cfg.seed)
        head, _ = learn.train(
            [bundle],
            cfg.policy(),
            head,
            opt,
            cfg.epochs,
            view_mode=cfg.view_mode,
            spatial_mode=cfg.spatial_mode,
            temporal_mode=cfg.temporal_mode,
            tau=cfg.tau,
            target_frames=[target],
        )
    gt = bundle.labels[target]
    lines = []
    for direction in ("both", "past"):
        for distance in cfg.sweep_distances:
            policy = dataclasses.replace(
                cfg.policy(), direction=direction, max_distance=distance
            )
            item_cfg = dataclasses.replace(
                cfg,
                direction=direction,
                max_distance=distance,
            )
            dense = _infer_dense(item_cfg, bundle, target, head)
            pred = LabelMap(np.argmax(dense, axis=0).astype(np.int64), gt.num_classes)
            cm = evaluate.ConfusionMatrix(gt.num_classes)
            cm.accumulate(pred, gt)
            m = evaluate.metrics(cm)
            lines.append(
                f"{direction},{distance},{m.pixel_acc!r},{m.mean_acc!r},"
                f"{m.mean_iou!r},{m.fw_iou!r}"
            )
            print(f"direction {direction}, max distance {distance}: mean_iou {m.mean_iou:.4f}")
    with open(os.path.join(out, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write("direction,max_distance,pixel_acc,mean_acc,mean_iou,fw_iou\n")
        for line in lines:
            fh.write(line + "\n")


# --- argument parsing ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors to the validation exit code
        raise ConfigError(message)


_COMMANDS = {
    "generate": cmd_generate,
    "match": cmd_match,
    "infer": cmd_infer,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="flat key=value pipeline config")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--threads", type=int, default=None)
    sub.add_argument("--tau", type=float, default=None)
    sub.add_argument("--spatial-mode", choices=("avg", "max"), default=None)
    sub.add_argument("--temporal-mode", choices=("avg", "max"), default=None)
    sub.add_argument("--view-mode", choices=("single", "multi"), default=None)
    sub.add_argument("--out", default=None)


def main(argv=None) -> int:
    parser = _Parser(prog="stpool", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        _add_common_flags(subs.add_parser(name))
    try:
        args = parser.parse_args(argv)
        overrides = {
            "seed": args.seed,
            "threads": args.threads,
            "tau": args.tau,
            "spatial_mode": args.spatial_mode,
            "temporal_mode": args.temporal_mode,
            "view_mode": args.view_mode,
            "out": args.out,
        }
        cfg = load_config(args.config, overrides)
        _COMMANDS[args.command](cfg)
        return 0
    except StpoolError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except Exception as err:  # noqa: BLE001 - last-resort mapping to exit code
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
