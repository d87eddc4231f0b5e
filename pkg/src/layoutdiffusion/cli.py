"""Command-line interface: synth, train, sample, eval, render.

Every command is deterministic given its flags, input files and seeds; all
randomness flows through explicitly named seeds.  Exit codes: 0 success,
2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (DEFAULT_N_MAX, Dataset, batch_to_layouts, load_dataset,
                   make_synthetic_dataset, save_dataset, SynthSpec)
from .diffusion import TrainConfig, sample, train, write_loss_log
from .exceptions import DataError, LayoutDiffusionError, NumericError
from .metrics import FeatureSet, evaluate_collections, trivial_features
from .render import render_svg
from .rng import RngStream
from .validation import check_label_conditions

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layoutdiffusion",
        description="Conditional diffusion model for graphic layouts.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--rule", choices=["grid_by_label", "random_boxes"],
                   default="grid_by_label")
    p.add_argument("--layouts", type=_positive_int, default=512)
    p.add_argument("--classes", type=_positive_int, default=4)
    p.add_argument("--min-elements", type=_positive_int, default=2)
    p.add_argument("--max-elements", type=_positive_int, default=6)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("train", help="train a denoiser on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="JSON training config; flags override it")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--loss-log", help="CSV loss log path (default: checkpoint + .loss.csv)")
    p.add_argument("--resume", help="checkpoint to continue from (reuses its "
                                    "config; only --max-steps applies on top)")
    p.add_argument("--d-model", type=int)
    p.add_argument("--num-layers", type=int)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--ffn-dim", type=int)
    p.add_argument("--activation", choices=["gelu", "relu"])
    p.add_argument("--positional-encoding", action="store_true", default=None)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--precision", choices=["float64", "float32"])
    p.add_argument("--init-seed", type=int)
    p.add_argument("--train-seed", type=int)
    p.add_argument("--checkpoint-every", type=int)

    p = sub.add_parser("sample", help="sample layouts from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--labels", help="comma-separated label ids, e.g. 0,1,1,2")
    group.add_argument("--conditions", help="dataset-schema JSON supplying conditions")
    p.add_argument("--num-samples", type=_positive_int, default=1,
                   help="with --labels: how many layouts to draw for the condition")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("eval", help="compute the metric report for two collections")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("-o", "--output", help="report JSON path (default: stdout)")
    p.add_argument("--frechet", choices=["off", "trivial", "files"], default="off")
    p.add_argument("--features-generated", help="feature JSON for --frechet files")
    p.add_argument("--features-reference", help="feature JSON for --frechet files")
    p.add_argument("--alignment-include-y", action="store_true",
                   help="extend the BLT alignment with y-axis lines")

    p = sub.add_parser("render", help="render layouts from a dataset file to SVG")
    p.add_argument("--input", required=True)
    p.add_argument("--index", type=int, help="render only this layout index")
    p.add_argument("-o", "--output", required=True,
                   help="SVG file (with --index) or output directory")
    return parser


# ---------------------------------------------------------------------------
# commands


def _load_any_mode(path, strict_geometry=True):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    mode = "continuous" if isinstance(doc, dict) and "feature_dim" in doc else "categorical"
    return load_dataset(path, mode=mode, strict_geometry=strict_geometry)


def cmd_synth(args) -> int:
    spec = SynthSpec(num_layouts=args.layouts, num_classes=args.classes,
                     elements_per_layout_range=(args.min_elements, args.max_elements),
                     rule=args.rule)
    dataset = make_synthetic_dataset(spec, args.seed)
    meta = {"command": "synth", "rule": args.rule, "seed": args.seed,
            "num_layouts": args.layouts, "num_classes": args.classes,
            "elements_per_layout_range": [args.min_elements, args.max_elements],
            "version": __version__}
    save_dataset(dataset, args.output, meta=meta)
    histogram = np.zeros(args.classes, dtype=np.int64)
    total = 0
    for layout in dataset.layouts:
        histogram += np.bincount(layout.labels, minlength=args.classes)
        total += len(layout)
    print(f"wrote {len(dataset)} layouts ({total} elements) to {args.output}")
    for k, name in enumerate(dataset.label_names):
        print(f"  {name}: {histogram[k]}")
    return EXIT_OK


def _merged_train_config(args, dataset: Dataset) -> TrainConfig:
    base = {
        "denoiser": {"d_model": 256, "num_layers": 8, "num_heads": 8, "ffn_dim": None,
                     "num_classes": dataset.num_classes, "attr_dim": dataset.feature_dim,
                     "activation": "gelu", "positional_encoding": False,
                     "n_max": DEFAULT_N_MAX},
        "diffusion": {"timesteps": 1000, "beta_start": 1e-4, "beta_end": 0.02,
                      "guidance_weight": 0.0, "clamp_output": True},
        "learning_rate": 1e-5, "adam_beta1": 0.9, "adam_beta2": 0.999,
        "adam_eps": 1e-8, "batch_size": 64, "max_steps": 1000,
        "init_seed": 0, "train_seed": 1, "checkpoint_every": 500,
        "precision": "float64",
    }
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        for key, value in file_cfg.items():
            if key in ("denoiser", "diffusion"):
                base[key].update(value)
            elif key in base:
                base[key] = value
            else:
                raise DataError(f"config {args.config}: unknown key {key!r}")

    flag_map = {
        "d_model": ("denoiser", "d_model"), "num_layers": ("denoiser", "num_layers"),
        "num_heads": ("denoiser", "num_heads"), "ffn_dim": ("denoiser", "ffn_dim"),
        "activation": ("denoiser", "activation"),
        "positional_encoding": ("denoiser", "positional_encoding"),
        "timesteps": ("diffusion", "timesteps"),
        "beta_start": ("diffusion", "beta_start"), "beta_end": ("diffusion", "beta_end"),
        "learning_rate": (None, "learning_rate"), "batch_size": (None, "batch_size"),
        "max_steps": (None, "max_steps"), "precision": (None, "precision"),
        "init_seed": (None, "init_seed"), "train_seed": (None, "train_seed"),
        "checkpoint_every": (None, "checkpoint_every"),
    }
    for attr, (section, key) in flag_map.items():
        value = getattr(args, attr)
        if value is None:
            continue
        if section is None:
            base[key] = value
        else:
            base[section][key] = value

    # The attribute head is always dictated by the dataset.
    base["denoiser"]["num_classes"] = dataset.num_classes
    base["denoiser"]["attr_dim"] = dataset.feature_dim
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid training configuration: {exc}") from exc


def _dataset_echo(dataset: Dataset, path) -> dict:
    echo = {"path": str(path), "canvas": [dataset.canvas[0], dataset.canvas[1]],
            "num_layouts": len(dataset)}
    if dataset.mode == "categorical":
        echo["labels"] = list(dataset.label_names)
    else:
        echo["feature_dim"] = dataset.feature_dim
    return echo


def cmd_train(args) -> int:
    if not os.path.exists(args.dataset):
        raise DataError(f"dataset not found: {args.dataset}")
    dataset = _load_any_mode(args.dataset)

    if args.resume:
        start_params, start_adam, header = load_checkpoint(args.resume)
        config = TrainConfig.from_dict(header["config"]["train"])
        if args.max_steps is not None and args.max_steps != config.max_steps:
            config = TrainConfig.from_dict({**config.to_dict(), "max_steps": args.max_steps})
        start_stream = RngStream.from_state(header["rng"]["train"])
        start_step = header["train_step"]
    else:
        config = _merged_train_config(args, dataset)
        start_params = start_adam = start_stream = None
        start_step = 0

    config_echo = {"train": config.to_dict(), "dataset": _dataset_echo(dataset, args.dataset),
                   "version": __version__}
    loss_log = args.loss_log or args.checkpoint + ".loss.csv"
    for out_path in (args.checkpoint, loss_log):
        parent = os.path.dirname(os.path.abspath(out_path))
        if not os.path.isdir(parent):
            raise DataError(f"output directory does not exist: {parent}")

    def checkpoint_cb(step, loss, params, adam_state, stream):
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(args.checkpoint, params, adam_state, config_echo,
                            {"train": stream.state()}, step)

    result = train(dataset, config, start_params=start_params, start_adam=start_adam,
                   start_stream=start_stream, start_step=start_step, on_step=checkpoint_cb)
    save_checkpoint(args.checkpoint, result.params, result.adam_state, config_echo,
                    {"train": result.train_stream.state()}, result.step)
    write_loss_log(loss_log, result.losses)
    if result.losses:
        first = result.losses[0][1]
        last = result.losses[-1][1]
        print(f"trained {len(result.losses)} steps: loss {first:.6f} -> {last:.6f}")
    print(f"checkpoint: {args.checkpoint}")
    print(f"loss log: {loss_log}")
    return EXIT_OK


def cmd_sample(args) -> int:
    params, _, header = load_checkpoint(args.checkpoint)
    config = TrainConfig.from_dict(header["config"]["train"])
    dataset_echo = header["config"]["dataset"]
    schedule = config.diffusion.schedule()
    canvas = tuple(dataset_echo["canvas"])

    if args.labels is not None:
        if "labels" not in dataset_echo:
            raise DataError("checkpoint was trained on continuous attributes; "
                            "use --conditions")
        try:
            labels = [int(tok) for tok in args.labels.split(",") if tok != ""]
        except ValueError as exc:
            raise DataError(f"bad --labels value {args.labels!r}") from exc
        conditions = check_label_conditions([labels] * args.num_samples,
                                            len(dataset_echo["labels"]))
        sizes = [len(c) for c in conditions]
        n_max = max(sizes)
        attributes = np.zeros((len(conditions), n_max), dtype=np.int64)
        mask = np.zeros((len(conditions), n_max), dtype=bool)
        for row, cond in enumerate(conditions):
            attributes[row, : len(cond)] = cond
            mask[row, : len(cond)] = True
    else:
        cond_dataset = _load_any_mode(args.conditions, strict_geometry=False)
        if (cond_dataset.mode == "categorical") != ("labels" in dataset_echo):
            raise DataError("condition file attribute mode does not match checkpoint")
        if cond_dataset.mode == "categorical":
            vocab = len(dataset_echo["labels"])
            conditions = check_label_conditions(
                [l.labels.tolist() for l in cond_dataset.layouts], vocab)
            n_max = max(len(c) for c in conditions)
            attributes = np.zeros((len(conditions), n_max), dtype=np.int64)
            mask = np.zeros((len(conditions), n_max), dtype=bool)
            for row, cond in enumerate(conditions):
                attributes[row, : len(cond)] = cond
                mask[row, : len(cond)] = True
        else:
            feats = [l.features for l in cond_dataset.layouts]
            if any(f.shape[1] != config.denoiser.attr_dim for f in feats):
                raise DataError("condition feature dim does not match checkpoint")
            n_max = max(f.shape[0] for f in feats)
            attributes = np.zeros((len(feats), n_max, config.denoiser.attr_dim))
            mask = np.zeros((len(feats), n_max), dtype=bool)
            for row, f in enumerate(feats):
                attributes[row, : f.shape[0]] = f
                mask[row, : f.shape[0]] = True

    result = sample(attributes, mask, params, config.denoiser, schedule,
                    RngStream(args.seed), config.diffusion)
    layouts = batch_to_layouts(result.geometry_raw, attributes, mask,
                               ids=[f"sample-{i:06d}" for i in range(mask.shape[0])])
    if "labels" in dataset_echo:
        out_dataset = Dataset(layouts=tuple(layouts), canvas=canvas,
                              label_names=tuple(dataset_echo["labels"]))
    else:
        out_dataset = Dataset(layouts=tuple(layouts), canvas=canvas,
                              feature_dim=dataset_echo["feature_dim"])
    meta = {"command": "sample", "seed": args.seed, "checkpoint": args.checkpoint,
            "num_samples": mask.shape[0], "config": header["config"],
            "version": __version__}
    save_dataset(out_dataset, args.output, meta=meta, include_clamped=True)
    print(f"wrote {len(layouts)} sampled layouts to {args.output}")
    return EXIT_OK


def _load_feature_file(path) -> FeatureSet:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if not isinstance(doc, dict) or "features" not in doc:
        raise DataError(f"feature file {path} must contain a 'features' matrix")
    return FeatureSet(features=np.asarray(doc["features"], dtype=np.float64),
                      provenance=str(doc.get("provenance", path)))


def cmd_eval(args) -> int:
    generated = _load_any_mode(args.generated, strict_geometry=False)
    reference = _load_any_mode(args.reference, strict_geometry=False)
    if generated.mode != reference.mode:
        raise DataError("generated and reference attribute modes differ")
    if generated.mode == "categorical" and generated.label_names != reference.label_names:
        raise DataError("incompatible label vocabularies between generated and reference")

    features = None
    if args.frechet == "trivial":
        if generated.mode != "categorical":
            raise DataError("trivial features require categorical layouts")
        n_max = max(max(len(l) for l in generated.layouts),
                    max(len(l) for l in reference.layouts))
        num_classes = len(reference.label_names)
        features = (trivial_features(generated.layouts, n_max, num_classes),
                    trivial_features(reference.layouts, n_max, num_classes))
    elif args.frechet == "files":
        if not (args.features_generated and args.features_reference):
            raise DataError("--frechet files needs --features-generated and "
                            "--features-reference")
        features = (_load_feature_file(args.features_generated),
                    _load_feature_file(args.features_reference))

    report = {
        "config": {"generated": args.generated, "reference": args.reference,
                   "frechet": args.frechet,
                   "alignment_include_y": bool(args.alignment_include_y),
                   "version": __version__},
        "metrics": evaluate_collections(generated.layouts, reference.layouts,
                                        features=features,
                                        include_y_alignment=args.alignment_include_y),
    }
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
            fh.write("\n")
        print(f"wrote metric report to {args.output}")
    else:
        print(text)
    return EXIT_OK


def cmd_render(args) -> int:
    dataset = _load_any_mode(args.input, strict_geometry=False)
    names = dataset.label_names
    if args.index is not None:
        if not 0 <= args.index < len(dataset):
            raise DataError(f"layout index {args.index} out of range "
                            f"[0, {len(dataset)})")
        svg = render_svg(dataset.layouts[args.index], canvas=dataset.canvas,
                         label_names=names)
        with open(args.output, "w") as fh:
            fh.write(svg)
        print(f"wrote {args.output}")
        return EXIT_OK
    os.makedirs(args.output, exist_ok=True)
    for layout in dataset.layouts:
        svg = render_svg(layout, canvas=dataset.canvas, label_names=names)
        path = os.path.join(args.output, f"{layout.id}.svg")
        with open(path, "w") as fh:
            fh.write(svg)
    print(f"wrote {len(dataset)} SVG files to {args.output}")
    return EXIT_OK


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "sample": cmd_sample,
             "eval": cmd_eval, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, LayoutDiffusionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
