"""Evaluation grid: run several inversion methods over a testbed and report.

The grid reproduces the reconstruction comparison at desk scale: three DDIM
baselines that invert only a suffix of the cascade, and the per-timestep
optimized method at several stage-1 guidance scales.

Semantics of the rows:

* Every row reconstructs under the pipeline's standard sampling settings
  (stage-1 guidance from the row, upscale guidance from the config). A
  "ddim" stage 1 inverts at guidance 1 and then samples at the row's
  guidance with the fixed empty-prompt embedding — the mismatch that makes
  plain DDIM inversion deviate under classifier-free guidance. An "nti"
  stage 1 optimizes per-step null embeddings against the same pivot.
* Inverted upscale stages are encoded against the real lower-resolution
  pyramid image (noised with a per-stage seed stored in the trace).
* At decode time every stage is chained: non-inverted stages are filled in
  by seeded conditional generation at the standard guidance, and inverted
  stages replay their trace against the decoded chain, re-noising it with
  the exact stored noise realization. Skipping a stage therefore costs
  reconstruction quality through the conditioning mismatch.
"""

from __future__ import annotations

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cascade import (
    CascadeConfig,
    build_pyramid,
    decode_from_noise,
    noise_conditioning,
    stage_noise_seed,
    superres_generate,
)
from .conditioning import PromptTable
from .denoiser import DenoiserModel
from .diffusion import NoiseSchedule, build_linear_schedule, make_timestep_grid
from .errors import DataFormatError
from .inversion import (
    InversionTrace,
    ddim_invert,
    iterinv_stage,
    null_text_invert,
    replay_reconstruction,
    with_guidance,
)
from .manifest import RunManifest, config_hash, file_sha256, write_manifest
from .metrics import MetricRecord, mse, psnr, ssim, write_report
from .model_io import load_model
from .ppm import read_image, write_image

_CLASS_RE = re.compile(r"class(\d+)")


@dataclass(frozen=True)
class GridMethod:
    """One grid row: which stages are inverted and how."""

    label: str
    inverted_stages: tuple[int, ...]
    stage1_method: str
    upscale_method: str
    omega1: float


DEFAULT_GRID: tuple[GridMethod, ...] = (
    GridMethod("ddim-s3", (3,), "ddim", "ddim", 7.0),
    GridMethod("ddim-s2s3", (2, 3), "ddim", "ddim", 7.0),
    GridMethod("ddim-s1s2s3", (1, 2, 3), "ddim", "ddim", 7.0),
    GridMethod("iterinv-w1", (1, 2, 3), "nti", "iterinv", 1.0),
    GridMethod("iterinv-w3", (1, 2, 3), "nti", "iterinv", 3.0),
    GridMethod("iterinv-w5", (1, 2, 3), "nti", "iterinv", 5.0),
    GridMethod("iterinv-w7", (1, 2, 3), "nti", "iterinv", 7.0),
)


@dataclass
class HarnessConfig:
    out_dir: str | Path
    model_dir: str | Path | None = None
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    seed: int = 0
    num_threads: int | None = None
    write_images: bool = True
    num_classes: int = 16
    prompt_table_seed: int = 7

    def thread_count(self) -> int:
        if self.num_threads is not None:
            return max(1, self.num_threads)
        return max(1, int(os.environ.get("CASCADE_INV_THREADS", "1")))


@dataclass
class GridRunResult:
    """Aggregated rows plus the per-image data the aggregates came from."""

    records: list[MetricRecord]
    per_image_psnr: dict[str, list[float]]
    per_image_ssim: dict[str, list[float]]
    per_image_mse: dict[str, list[float]]
    inner_curves: list[np.ndarray]
    nti_step_losses: list[tuple[np.ndarray, np.ndarray]]
    out_dir: Path


def load_testbed(dataset_dir: str | Path) -> list[tuple[str, np.ndarray, int]]:
    """Read every PPM in a directory; class ids are parsed from filenames."""
    dataset_dir = Path(dataset_dir)
    files = sorted(dataset_dir.glob("*.ppm"))
    if not files:
        raise DataFormatError(f"{dataset_dir}: no .ppm images found (empty dataset)")
    out = []
    for f in files:
        m = _CLASS_RE.search(f.stem)
        if m is None:
            raise DataFormatError(f"{f}: filename does not encode a class id")
        out.append((f.stem, read_image(f), int(m.group(1))))
    return out


def make_testbed(
    out_dir: str | Path,
    resolution: int = 64,
    num_classes: int = 16,
    seed: int = 20_000,
) -> list[Path]:
    """Render one held-out image per class and write it as PPM."""
    from .dataset import render_class_sample

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(num_classes)
    paths = []
    for k in range(num_classes):
        sample = render_class_sample(k, (resolution,), np.random.default_rng(seeds[k]))
        path = out_dir / f"img{k:02d}_class{k:02d}.ppm"
        write_image(sample.image_pyramid[0], path)
        paths.append(path)
    return paths


def _default_model_paths(model_dir: Path, num_stages: int) -> list[Path]:
    paths = [model_dir / f"stage{k}.model" for k in range(1, num_stages + 1)]
    for p in paths:
        if not p.is_file():
            raise DataFormatError(f"missing model file: {p}")
    return paths


def _invert_one_stage(
    method: GridMethod,
    stage: int,
    models: Sequence[DenoiserModel],
    schedule: NoiseSchedule,
    grid,
    pyramid,
    cond,
    null,
    iterinv_cfg,
    image_seed: int,
) -> InversionTrace:
    model = models[stage - 1]
    if stage == 1:
        if method.stage1_method == "nti":
            return null_text_invert(
                model, schedule, grid, pyramid[0], cond, method.omega1, null,
                iterinv_cfg,
            )
        # Plain DDIM always inverts at guidance 1; the row's guidance is
        # applied at replay time (see with_guidance in process_image).
        return ddim_invert(model, schedule, grid, pyramid[0], cond, 1.0)
    cond_seed = stage_noise_seed(image_seed, stage)
    if method.upscale_method == "iterinv":
        return iterinv_stage(
            model, schedule, grid, pyramid[stage - 1], cond, 1.0,
            pyramid[stage - 2], iterinv_cfg, stage=stage, cond_noise_seed=cond_seed,
        )
    noised = noise_conditioning(pyramid[stage - 2], iterinv_cfg.sigma_aug, cond_seed)
    return ddim_invert(
        model, schedule, grid, pyramid[stage - 1], cond, 1.0, cond_image=noised,
        sigma_aug=iterinv_cfg.sigma_aug, cond_noise_seed=cond_seed, stage=stage,
    )


def run_eval_grid(
    dataset_dir: str | Path,
    methods: Sequence[GridMethod] = DEFAULT_GRID,
    config: HarnessConfig | None = None,
    *,
    models: Sequence[DenoiserModel] | None = None,
    table: PromptTable | None = None,
    schedule: NoiseSchedule | None = None,
) -> GridRunResult:
    """Run every method over every testbed image and write the report.

    Images may be processed by a small thread pool (``CASCADE_INV_THREADS``
    or ``config.num_threads``); each image's work stays on one worker and
    results are aggregated in input order.
    """
    config = config or HarnessConfig(out_dir="eval-grid")
    out_dir = Path(config.out_dir)
    cascade_cfg = config.cascade
    num_stages = cascade_cfg.num_stages
    schedule = schedule or build_linear_schedule()
    grid = make_timestep_grid(schedule.num_train_steps, cascade_cfg.iterinv.steps)

    model_hashes: dict[str, str] = {}
    if models is None:
        if config.model_dir is None:
            raise DataFormatError("run_eval_grid needs a model_dir or models")
        paths = _default_model_paths(Path(config.model_dir), num_stages)
        models = [load_model(p) for p in paths]
        model_hashes = {p.name: file_sha256(p) for p in paths}
    if table is None:
        table = PromptTable(
            num_classes=config.num_classes, width=models[0].cond_width,
            seed=config.prompt_table_seed,
        )

    testbed = load_testbed(dataset_dir)
    resolutions = cascade_cfg.stage_resolutions
    sigma_aug = cascade_cfg.iterinv.sigma_aug

    def process_image(idx: int, image: np.ndarray, prompt_id: int):
        image_seed = int(np.random.SeedSequence([config.seed, idx]).generate_state(1)[0])
        pyramid = build_pyramid(image, resolutions)
        cond = table.embed(prompt_id)
        null = table.null()

        # Inversion work shared between rows: everything except the stage-1
        # method depends only on (stage, upscale method), and guidance at
        # upscale stages is fixed to 1.
        trace_cache: dict[tuple, InversionTrace] = {}

        def get_trace(method: GridMethod, stage: int) -> InversionTrace:
            if stage == 1:
                # All ddim rows share one pivot; nti depends on the guidance.
                key = (
                    (1, "ddim")
                    if method.stage1_method == "ddim"
                    else (1, "nti", method.omega1)
                )
            else:
                key = (stage, method.upscale_method)
            if key not in trace_cache:
                trace_cache[key] = _invert_one_stage(
                    method, stage, models, schedule, grid, pyramid, cond, null,
                    replace(cascade_cfg.iterinv, omega1=method.omega1), image_seed,
                )
            return trace_cache[key]

        # Generative fill-ins for skipped stages, shared between rows.
        gen_cache: dict[int, np.ndarray] = {}

        def get_generated(stage: int, lower: np.ndarray | None) -> np.ndarray:
            if stage not in gen_cache:
                z_seed = int(
                    np.random.SeedSequence([image_seed, 300 + stage]).generate_state(1)[0]
                )
                res = resolutions[stage - 1]
                w = cascade_cfg.iterinv.omega(stage)
                nv = null.vector if w != 1.0 else None
                if stage == 1:
                    z0 = np.random.default_rng(z_seed).standard_normal((res, res, 3))
                    gen_cache[stage] = decode_from_noise(
                        models[0], schedule, grid, z0, cond, w, null_vec=nv
                    )
                else:
                    gen_cache[stage] = superres_generate(
                        models[stage - 1], schedule, grid, lower, cond, w,
                        sigma_aug, res, null_vec=nv, z_seed=z_seed,
                        cond_noise_seed=stage_noise_seed(image_seed, stage),
                    )
            return gen_cache[stage]

        row_metrics: dict[str, tuple[float, float, float]] = {}
        row_recons: dict[str, np.ndarray] = {}
        curves: list[np.ndarray] = []
        nti_losses: list[tuple[np.ndarray, np.ndarray]] = []

        for method in methods:
            chain: np.ndarray | None = None
            for stage in range(1, num_stages + 1):
                if stage in method.inverted_stages:
                    trace = get_trace(method, stage)
                    if stage == 1:
                        if method.stage1_method == "ddim" and method.omega1 != 1.0:
                            trace = with_guidance(trace, method.omega1, null)
                        chain = replay_reconstruction(trace, models[0], schedule)
                    else:
                        override = noise_conditioning(
                            chain, trace.sigma_aug, trace.cond_noise_seed
                        )
                        chain = replay_reconstruction(
                            trace, models[stage - 1], schedule,
                            cond_image_override=override,
                        )
                else:
                    chain = get_generated(stage, chain)
            row_recons[method.label] = chain
            row_metrics[method.label] = (
                mse(chain, image), ssim(chain, image), psnr(chain, image)
            )

        # Diagnostics from the optimized rows: inner-loop curves from the
        # shared upscale traces, stage-1 null-embedding losses from the
        # highest-guidance row.
        for stage in range(2, num_stages + 1):
            key = (stage, "iterinv")
            if key in trace_cache and trace_cache[key].inner_loss_curves is not None:
                curves.append(trace_cache[key].inner_loss_curves)
        for method in methods:
            if method.stage1_method == "nti" and method.omega1 != 1.0:
                key = (1, "nti", method.omega1)
                if key in trace_cache:
                    t = trace_cache[key]
                    if t.initial_step_losses is not None:
                        nti_losses.append(
                            (t.initial_step_losses.copy(), t.per_step_losses.copy())
                        )
        return row_metrics, row_recons, curves, nti_losses

    workers = config.thread_count()
    args = [(i, img, pid) for i, (_, img, pid) in enumerate(testbed)]
    if workers == 1:
        results = [process_image(*a) for a in args]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: process_image(*a), args))

    per_psnr: dict[str, list[float]] = {m.label: [] for m in methods}
    per_ssim: dict[str, list[float]] = {m.label: [] for m in methods}
    per_mse: dict[str, list[float]] = {m.label: [] for m in methods}
    all_curves: list[np.ndarray] = []
    all_nti: list[tuple[np.ndarray, np.ndarray]] = []
    outputs: list[str] = []

    out_dir.mkdir(parents=True, exist_ok=True)
    for (stem, image, _), (row_metrics, row_recons, curves, nti_losses) in zip(
        testbed, results
    ):
        for m in methods:
            e, s, p = row_metrics[m.label]
            per_mse[m.label].append(e)
            per_ssim[m.label].append(s)
            per_psnr[m.label].append(p)
        all_curves.extend(curves)
        all_nti.extend(nti_losses)
        if config.write_images:
            strip = np.concatenate(
                [image] + [row_recons[m.label] for m in methods], axis=1
            )
            strip_path = out_dir / f"{stem}_grid.ppm"
            write_image(np.clip(strip, -1.0, 1.0), strip_path)
            outputs.append(str(strip_path))

    records = [
        MetricRecord(
            m.label,
            m.omega1,
            float(np.mean(per_mse[m.label])),
            float(np.mean(per_ssim[m.label])),
            float(np.mean(per_psnr[m.label])),
        )
        for m in methods
    ]
    write_report(records, out_dir)
    outputs += [str(out_dir / "report.json"), str(out_dir / "table.txt")]

    cfg_dict = {
        "methods": [m.label for m in methods],
        "resolutions": list(resolutions),
        "steps": cascade_cfg.iterinv.steps,
        "inner_iters": cascade_cfg.iterinv.inner_iters,
        "sigma_aug": sigma_aug,
        "seed": config.seed,
    }
    write_manifest(
        RunManifest(
            command="eval-grid",
            config_sha256=config_hash(cfg_dict),
            seeds={"base": config.seed},
            model_sha256=model_hashes,
            outputs=outputs,
        ),
        out_dir,
    )
    return GridRunResult(
        records, per_psnr, per_ssim, per_mse, all_curves, all_nti, out_dir
    )
