"""Command-line surface: mesh export, operator export, training, ablation,
benchmarks, and evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime or IO error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io as s2io
from .errors import (AssemblyError, CapacityError, ConfigError,
                     DivergenceError, InputError, S2Error, ShapeError)
from .icomesh import MAX_LEVEL, build_mesh, export_mesh
from .model import ModelSpec, build_level_ops, build_model
from .nn import DownBlock, receptive_ring
from .resample import ResampleSpec, assemble_downsample, assemble_upsample
from .train import (TrainConfig, evaluate_model, fit, inverse_frequency_weights,
                    synth_caps_dataset)

USAGE_ERRORS = (InputError, ConfigError, ShapeError, CapacityError)

#: (swapped, up_mode, down_mode) combinations of the resampling design space,
#: in the canonical report order, with the fine-mesh ring each one yields.
ABLATION_ROWS = [
    {"swapped": False, "up_mode": "zeropad", "down_mode": "drop"},
    {"swapped": True, "up_mode": "zeropad", "down_mode": "drop"},
    {"swapped": True, "up_mode": "bilinear", "down_mode": "drop"},
    {"swapped": True, "up_mode": "zeropad", "down_mode": "average"},
    {"swapped": False, "up_mode": "bilinear", "down_mode": "average"},
    {"swapped": True, "up_mode": "bilinear", "down_mode": "average"},
]


def paper_training_config(preset: str, min_level: int = 3) -> dict:
    """Published hyperparameter presets for the two benchmark tasks."""
    if preset == "stanford":
        model = ModelSpec(min_level=min_level, in_channels=4, n_classes=13)
        train = TrainConfig(epochs=100, batch_size=8 if min_level == 0 else 16,
                            lr0=0.01, decay_factor=0.9, decay_every=20)
    elif preset == "climate":
        model = ModelSpec(min_level=min_level, in_channels=16, n_classes=3,
                          width_divisor=4)
        train = TrainConfig(epochs=50, batch_size=128, lr0=0.001,
                            decay_factor=0.4, decay_every=20)
    else:
        raise InputError(f"unknown preset {preset!r}")
    return {"model": model.to_dict(), "train": train.to_dict()}


def desk_training_config(min_level: int = 3, n_classes: int = 3,
                         seed: int = 0) -> dict:
    """Small configuration for CPU-scale synthetic runs."""
    model = ModelSpec(min_level=min_level, in_channels=n_classes - 1,
                      n_classes=n_classes, base_channels=8,
                      pyramid_channels=8, head_channels=8)
    train = TrainConfig(epochs=50, batch_size=16, lr0=0.01, decay_factor=0.9,
                        decay_every=20, seed=seed)
    return {"model": model.to_dict(), "train": train.to_dict()}


def _percentiles(samples: list[float]) -> dict:
    arr = np.asarray(samples)
    return {"median_ms": float(np.median(arr) * 1e3),
            "p10_ms": float(np.percentile(arr, 10) * 1e3),
            "p90_ms": float(np.percentile(arr, 90) * 1e3)}


# -- subcommands ----------------------------------------------------------------

def cmd_mesh(args) -> int:
    mesh = build_mesh(args.level)
    print(f"vertices: {mesh.n_vertices}")
    print(f"faces: {mesh.n_faces}")
    print(f"edges: {mesh.n_edges}")
    if args.out:
        if args.format == "obj":
            export_mesh(mesh, args.out)
        else:
            s2io.write_tensors(args.out, {
                "vertices": mesh.vertices,
                "faces": mesh.faces.astype(np.int64),
                "parent_edge": mesh.parent_edge.astype(np.int64),
            })
        print(f"wrote {args.out}")
    return 0


def cmd_export_ops(args) -> int:
    which = args.which
    if which in ("gx", "gy", "lap"):
        ops = build_level_ops(build_mesh(args.level))
        op = {"gx": ops.gx, "gy": ops.gy, "lap": ops.lap}[which]
    else:
        if args.level < 1:
            raise InputError(f"{which} needs level >= 1 (transition to/from "
                             f"level {args.level - 1})")
        mesh_fine = build_mesh(args.level)
        if which == "up-bilinear":
            op = assemble_upsample(mesh_fine, "bilinear")
        elif which == "up-zeropad":
            op = assemble_upsample(mesh_fine, "zeropad")
        elif which == "down-drop":
            op = assemble_downsample(mesh_fine, "drop")
        elif which == "down-average":
            op = assemble_downsample(mesh_fine, "average")
        else:
            raise InputError(f"unknown operator {which!r}")
    s2io.write_sparse(args.out, op)
    print(f"rows: {op.rows}")
    print(f"cols: {op.cols}")
    print(f"nnz: {op.nnz}")
    return 0


def _resolve_train_config(args) -> tuple[ModelSpec, TrainConfig]:
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    elif args.preset:
        doc = paper_training_config(args.preset,
                                    args.min_level if args.min_level is not None
                                    else 3)
    else:
        doc = desk_training_config(
            min_level=args.min_level if args.min_level is not None else 3,
            n_classes=args.classes, seed=args.seed or 0)
    model_doc = doc.get("model", {})
    train_doc = doc.get("train", {})
    # flag overrides
    if args.min_level is not None:
        model_doc["min_level"] = args.min_level
    if args.epochs is not None:
        train_doc["epochs"] = args.epochs
    if args.batch_size is not None:
        train_doc["batch_size"] = args.batch_size
    if args.seed is not None:
        train_doc["seed"] = args.seed
    try:
        return ModelSpec.from_dict(model_doc), TrainConfig.from_dict(train_doc)
    except TypeError as exc:
        raise ConfigError(f"bad configuration field: {exc}") from exc


def cmd_train(args) -> int:
    spec, config = _resolve_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {"model": spec.to_dict(), "train": config.to_dict()}, indent=2) + "\n")

    if args.manifest:
        doc = s2io.load_manifest(args.manifest)
        if doc["n_classes"] != spec.n_classes:
            raise ConfigError(f"manifest has {doc['n_classes']} classes, "
                              f"model spec has {spec.n_classes}")
        train_set = s2io.load_split(args.manifest, doc, "train")
        val_set = s2io.load_split(args.manifest, doc, "val")
        if doc.get("class_weights") and config.class_weights is None:
            config.class_weights = doc["class_weights"]
    else:
        mesh = build_mesh(spec.max_level)
        n_train = args.samples
        n_val = max(args.samples // 4, 1)
        full = synth_caps_dataset(mesh, n_train + n_val, spec.n_classes,
                                  seed=config.seed)
        from .train import CapsDataset
        train_set = CapsDataset(full.level, full.inputs[:n_train],
                                full.labels[:n_train])
        val_set = CapsDataset(full.level, full.inputs[n_train:],
                              full.labels[n_train:])
        if spec.in_channels != spec.n_classes - 1:
            raise ConfigError("synthetic data carries n_classes - 1 channels; "
                              f"model expects {spec.in_channels}")
    if args.weighted_loss and config.class_weights is None:
        config.class_weights = list(inverse_frequency_weights(
            train_set.labels, spec.n_classes))

    model = build_model(spec, seed=config.seed)
    result = fit(model, train_set, val_set, config,
                 target_accuracy=args.target_accuracy, verbose=args.verbose)

    with open(out / "log.jsonl", "w") as fh:
        for record in result.log:
            fh.write(json.dumps(record) + "\n")
    s2io.save_checkpoint(out / "final", model)
    model.load_state_dict(result.best_state)
    s2io.save_checkpoint(out / "best", model)
    report = evaluate_model(model, val_set)
    (out / "metrics.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"epochs run: {len(result.log)}")
    print(f"best val mIoU: {result.best_miou:.4f} (epoch {result.best_epoch})")
    print(f"final val accuracy: {report.pixel_accuracy:.4f}")
    return 0


def cmd_ablate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh4 = build_mesh(4)
    mesh3 = build_mesh(3)
    ops4 = build_level_ops(mesh4)
    ops3 = build_level_ops(mesh3)

    mesh5 = build_mesh(5)
    n_train, n_val = args.samples, max(args.samples // 4, 1)
    full = synth_caps_dataset(mesh5, n_train + n_val, 3, seed=args.seed)
    from .train import CapsDataset
    train_set = CapsDataset(full.level, full.inputs[:n_train],
                            full.labels[:n_train])
    val_set = CapsDataset(full.level, full.inputs[n_train:],
                          full.labels[n_train:])

    rows = []
    for combo in ABLATION_ROWS:
        down_op = assemble_downsample(mesh4, combo["down_mode"])
        block = DownBlock(2, 4, 4, fine_ops=ops4, coarse_ops=ops3,
                          down_op=down_op, swapped=combo["swapped"],
                          rng=np.random.default_rng(args.seed))
        ring = receptive_ring(block, mesh4, vertex=20, in_channels=2,
                              seed=args.seed)

        resample = ResampleSpec(down_mode=combo["down_mode"],
                                up_mode=combo["up_mode"],
                                swapped=combo["swapped"])
        spec = ModelSpec(min_level=3, in_channels=2, n_classes=3,
                         base_channels=8, pyramid_channels=8, head_channels=8,
                         resample=resample)
        config = TrainConfig(epochs=args.epochs, batch_size=16, lr0=0.01,
                             decay_factor=0.9, decay_every=20, seed=args.seed)
        model = build_model(spec, seed=args.seed)
        result = fit(model, train_set, val_set, config)
        model.load_state_dict(result.best_state)
        report = evaluate_model(model, val_set)
        rows.append({**combo, "receptive_ring": ring,
                     "val_accuracy": report.pixel_accuracy,
                     "val_miou": report.miou})
        print(f"ring={ring} swapped={combo['swapped']!s:5s} "
              f"up={combo['up_mode']:8s} down={combo['down_mode']:7s} "
              f"acc={report.pixel_accuracy:.4f} miou={report.miou:.4f}")

    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(f"wrote {out / 'ablation.json'}")
    return 0


def cmd_bench(args) -> int:
    level = args.level
    mesh = build_mesh(level)
    results = {"level": level, "n_vertices": mesh.n_vertices, "ops": {}}
    op_names = args.ops.split(",")
    from .icomesh import compute_geometry
    from .sphops import assemble_gradients, assemble_laplacian, tangent_frames

    geometry = compute_geometry(mesh)
    frames = tangent_frames(mesh)

    def build(which):
        if which == "gx":
            return assemble_gradients(mesh, geometry, frames)[0]
        if which == "gy":
            return assemble_gradients(mesh, geometry, frames)[1]
        if which == "lap":
            return assemble_laplacian(mesh, geometry)
        if which in ("down-drop", "down-average"):
            return assemble_downsample(mesh, which.split("-")[1])
        if which in ("up-bilinear", "up-zeropad"):
            return assemble_upsample(mesh, which.split("-")[1])
        raise InputError(f"unknown op {which!r}")

    for which in op_names:
        assembly_times = []
        op = None
        for _ in range(args.repetitions):
            t0 = time.perf_counter()
            op = build(which)
            assembly_times.append(time.perf_counter() - t0)
        entry = {"assembly": _percentiles(assembly_times)}
        rng = np.random.default_rng(0)
        for channels in (1, 32):
            x = rng.standard_normal((1, channels, op.cols))
            apply_times = []
            for _ in range(args.repetitions):
                t0 = time.perf_counter()
                op.apply_array(x)
                apply_times.append(time.perf_counter() - t0)
            entry[f"apply_{channels}ch"] = _percentiles(apply_times)
        results["ops"][which] = entry
    text = json.dumps(results, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_eval(args) -> int:
    doc = s2io.load_manifest(args.manifest)
    model = s2io.load_checkpoint(args.checkpoint)
    if model.spec.n_classes != doc["n_classes"]:
        raise ConfigError(f"checkpoint has {model.spec.n_classes} classes, "
                          f"manifest declares {doc['n_classes']}")
    dataset = s2io.load_split(args.manifest, doc, args.split)
    report = evaluate_model(model, dataset)
    names = doc.get("class_names") or [f"class_{i}"
                                       for i in range(doc["n_classes"])]
    text = json.dumps(report.to_dict(class_names=names), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s2fpn",
        description="Icosahedral mesh operators and spherical FPN training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="build a mesh and export it")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("obj", "container"), default="obj")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("export-ops", help="assemble one sparse operator")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--which", required=True,
                   choices=("gx", "gy", "lap", "up-bilinear", "up-zeropad",
                            "down-drop", "down-average"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ops)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="JSON {model, train} doc")
    p.add_argument("--preset", choices=("stanford", "climate"), default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--synthetic", action="store_true",
                   help="train on the synthetic geodesic-cap task (default "
                        "when no manifest is given)")
    p.add_argument("--out", required=True)
    p.add_argument("--min-level", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--samples", type=int, default=200,
                   help="synthetic training samples (val adds 1/4)")
    p.add_argument("--classes", type=int, default=3,
                   help="synthetic class count")
    p.add_argument("--target-accuracy", type=float, default=None,
                   help="stop once validation accuracy reaches this")
    p.add_argument("--weighted-loss", action="store_true",
                   help="use inverse-frequency class weights")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the resampling design ablation")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--samples", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="time operator assembly and application")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--ops", default="gx,gy,lap")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except (OSError, AssemblyError, S2Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
