"""Command-line front door.

Subcommands: ``train-toy``, ``invert``, ``reconstruct``, ``edit``,
``generate``, ``eval-grid``. Every command writes a ``manifest.json`` next
to its outputs. Exit codes: 0 success, 2 usage error, 3 data/format error,
4 numerical failure. ``CASCADE_INV_THREADS`` caps the evaluation worker
pool.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .cascade import CascadeConfig, build_pyramid, generate_stage_outputs, invert_cascade
from .conditioning import PromptTable
from .dataset import TrainConfig, generate_dataset
from .diffusion import build_linear_schedule
from .editing import EditRequest, edit_image, estimate_mask
from .errors import DataFormatError, NumericalError
from .harness import DEFAULT_GRID, HarnessConfig, make_testbed, run_eval_grid
from .inversion import IterInvConfig, replay_reconstruction
from .manifest import RunManifest, config_hash, file_sha256, write_manifest
from .model_io import load_model, save_model
from .ppm import read_image, write_image, write_mask
from .trace_io import load_trace, save_trace
from .training import train_stage

# How a --method name maps to (stage-1 method, upscale method).
METHOD_MAP = {
    "ddim": ("ddim", "ddim"),
    "nti": ("nti", "ddim"),
    "iterinv": ("nti", "iterinv"),
}
STAGES_MAP = {"1": 1, "12": 2, "123": 3}


class UsageError(Exception):
    pass


def _load_json_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise DataFormatError(f"{path}: config must be a JSON object")
    return data


def _build_dataclass(cls, overrides: dict, what: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(overrides) - allowed
    if unknown:
        raise UsageError(f"unknown {what} config keys: {sorted(unknown)}")
    coerced = dict(overrides)
    for key in ("stage_resolutions",):
        if key in coerced and isinstance(coerced[key], list):
            coerced[key] = tuple(coerced[key])
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} config: {exc}") from exc


def _cascade_config(args) -> CascadeConfig:
    data = _load_json_config(getattr(args, "config", None))
    iterinv = _build_dataclass(IterInvConfig, data.pop("iterinv", {}), "iterinv")
    method = getattr(args, "method", None)
    if method is not None:
        stage1, upscale = METHOD_MAP[method]
        data.setdefault("stage1_method", stage1)
        data.setdefault("upscale_method", upscale)
    cfg = _build_dataclass(
        CascadeConfig, {**data, "iterinv": iterinv}, "cascade"
    )
    return cfg


def _load_stage_models(model_dir: str, depth: int):
    paths = [Path(model_dir) / f"stage{k}.model" for k in range(1, depth + 1)]
    for p in paths:
        if not p.is_file():
            raise DataFormatError(f"missing model file: {p}")
    return [load_model(p) for p in paths], {p.name: file_sha256(p) for p in paths}


def _table_for(models, num_classes: int = 16, seed: int = 7) -> PromptTable:
    return PromptTable(num_classes, width=models[0].cond_width, seed=seed)


def _cmd_train_toy(args) -> int:
    overrides = _load_json_config(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.dataset_size is not None:
        overrides["dataset_size"] = args.dataset_size
    config = _build_dataclass(TrainConfig, overrides, "training")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(config)
    schedule = build_linear_schedule()
    table = PromptTable(config.num_classes)

    outputs, losses = [], {}
    for stage in range(1, len(config.stage_resolutions) + 1):
        result = train_stage(stage, dataset, config, schedule, table)
        path = out_dir / f"stage{stage}.model"
        save_model(result.model, path)
        outputs.append(str(path))
        losses[f"stage{stage}"] = {
            "final_loss": result.final_loss,
            "losses": [float(x) for x in result.losses],
        }
    (out_dir / "training_losses.json").write_text(json.dumps(losses, indent=2) + "\n")
    outputs.append(str(out_dir / "training_losses.json"))

    write_manifest(
        RunManifest(
            command="train-toy",
            config_sha256=config_hash(asdict(config)),
            seeds={"train": config.seed},
            model_sha256={Path(p).name: file_sha256(p) for p in outputs[:-1]},
            outputs=outputs,
        ),
        out_dir,
    )
    return 0


def _cmd_invert(args) -> int:
    config = _cascade_config(args)
    depth = STAGES_MAP[args.stages]
    models, hashes = _load_stage_models(args.model_dir, depth)
    table = _table_for(models)
    image = read_image(args.image)
    schedule = build_linear_schedule()

    result = invert_cascade(
        models, image, args.prompt, table, config, schedule,
        seed=args.seed, depth=depth,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for trace, recon in zip(result.traces, result.reconstructions):
        tpath = out_dir / f"stage{trace.stage}.trace"
        save_trace(trace, tpath)
        rpath = out_dir / f"recon_stage{trace.stage}.ppm"
        write_image(np.clip(recon, -1.0, 1.0), rpath)
        outputs += [str(tpath), str(rpath)]

    cfg_dict = {
        "cascade": {**asdict(config)},
        "prompt": args.prompt,
        "stages": args.stages,
        "image": str(args.image),
    }
    write_manifest(
        RunManifest(
            command="invert",
            config_sha256=config_hash(cfg_dict),
            seeds={"base": args.seed},
            model_sha256=hashes,
            outputs=outputs,
        ),
        out_dir,
    )
    return 0


def _cmd_reconstruct(args) -> int:
    trace_dir = Path(args.trace_dir)
    trace_paths = sorted(trace_dir.glob("stage*.trace"))
    if not trace_paths:
        raise DataFormatError(f"{trace_dir}: no stage*.trace files found")
    traces = [load_trace(p) for p in trace_paths]
    depth = max(t.stage for t in traces)
    models, hashes = _load_stage_models(args.model_dir, depth)
    schedule = build_linear_schedule()

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for trace in traces:
        recon = replay_reconstruction(trace, models[trace.stage - 1], schedule)
        rpath = out_dir / f"recon_stage{trace.stage}.ppm"
        write_image(np.clip(recon, -1.0, 1.0), rpath)
        outputs.append(str(rpath))

    write_manifest(
        RunManifest(
            command="reconstruct",
            config_sha256=config_hash({"traces": [str(p) for p in trace_paths]}),
            seeds={},
            model_sha256=hashes,
            outputs=outputs,
        ),
        out_dir,
    )
    return 0


def _cmd_edit(args) -> int:
    config = _cascade_config(args)
    models, hashes = _load_stage_models(args.model_dir, config.num_stages)
    table = _table_for(models)
    image = read_image(args.image)
    # The edit itself runs on the stage-1 image; accept either a top-
    # resolution input (downsampled here) or one already at stage-1 size.
    if image.shape[0] != config.stage_resolutions[0]:
        image = build_pyramid(image, config.stage_resolutions)[0]
    schedule = build_linear_schedule()

    request = EditRequest(
        image=image,
        source_prompt_id=args.src,
        target_prompt_id=args.tgt,
        encode_ratio=args.ratio,
        mask_threshold=args.threshold,
        num_mask_seeds=args.mask_seeds,
        mask_seed=args.seed,
    )
    mask = estimate_mask(
        models[0], schedule, image, table.embed(args.src), table.embed(args.tgt),
        request,
    )
    edited = edit_image(
        models, request, config, table=table, schedule=schedule, mask=mask,
        seed=args.seed,
    )

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_image(np.clip(edited, -1.0, 1.0), out_path)
    outputs = [str(out_path)]
    if args.mask_out:
        write_mask(mask.mask, args.mask_out)
        outputs.append(str(args.mask_out))

    cfg_dict = {
        "src": args.src, "tgt": args.tgt, "ratio": args.ratio,
        "threshold": args.threshold, "mask_seeds": args.mask_seeds,
        "mask_noise_timestep": schedule.num_train_steps // 2,
        "mask_blur_sigma": 1.0,
        "cascade": asdict(config),
    }
    write_manifest(
        RunManifest(
            command="edit",
            config_sha256=config_hash(cfg_dict),
            seeds={"base": args.seed},
            model_sha256=hashes,
            outputs=outputs,
        ),
        out_path.parent,
    )
    return 0


def _cmd_generate(args) -> int:
    config = _cascade_config(args)
    models, hashes = _load_stage_models(args.model_dir, config.num_stages)
    table = _table_for(models)
    outputs_arr = generate_stage_outputs(
        models, args.prompt, table, config, seed=args.seed
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for stage, image in enumerate(outputs_arr, start=1):
        path = out_dir / f"gen_stage{stage}.ppm"
        write_image(np.clip(image, -1.0, 1.0), path)
        outputs.append(str(path))

    write_manifest(
        RunManifest(
            command="generate",
            config_sha256=config_hash({"prompt": args.prompt, "cascade": asdict(config)}),
            seeds={"base": args.seed},
            model_sha256=hashes,
            outputs=outputs,
        ),
        out_dir,
    )
    return 0


def _cmd_eval_grid(args) -> int:
    config = _cascade_config(args)
    dataset_dir = Path(args.dataset_dir)
    if args.make_testbed and not list(dataset_dir.glob("*.ppm")):
        make_testbed(dataset_dir)
    harness_cfg = HarnessConfig(
        out_dir=args.out_dir,
        model_dir=args.model_dir,
        cascade=config,
        seed=args.seed,
    )
    run_eval_grid(dataset_dir, DEFAULT_GRID, harness_cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascade-inversion",
        description="Cascaded diffusion inversion toolkit (toy scale).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *, seed=True, config=True):
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if config:
            p.add_argument("--config", type=str, default=None,
                           help="JSON file overriding configuration fields")

    p = sub.add_parser("train-toy", help="train the three toy stages")
    add_common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--dataset-size", type=int, default=None)
    p.set_defaults(func=_cmd_train_toy)
    # train-toy --seed default must not silently override the config file.
    p.set_defaults(seed=None)

    p = sub.add_parser("invert", help="invert an image through the cascade")
    add_common(p)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", type=int, required=True)
    p.add_argument("--method", choices=sorted(METHOD_MAP), default="iterinv")
    p.add_argument("--stages", choices=sorted(STAGES_MAP), default="123")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("reconstruct", help="replay stored traces")
    add_common(p, config=False)
    p.add_argument("--trace-dir", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("edit", help="mask-guided prompt edit")
    add_common(p)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--src", type=int, required=True)
    p.add_argument("--tgt", type=int, required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--mask-seeds", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out", default=None)
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("generate", help="sample the cascade for a prompt")
    add_common(p)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--prompt", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("eval-grid", help="run the method comparison grid")
    add_common(p)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--make-testbed", action="store_true",
                   help="render the per-class testbed if the dataset dir is empty")
    p.set_defaults(func=_cmd_eval_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        # Plain ValueError is this package's argument-validation failure;
        # it must come after DataFormatError, which subclasses it.
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
