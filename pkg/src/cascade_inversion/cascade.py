"""Multi-stage orchestration: pyramids, cascade inversion, and generation.

A cascade is a list of stage models at increasing resolutions. Stage 1 works
on the lowest resolution; each later stage is a super-resolution model
conditioned on a noised version of the stage below. Inversion runs the
stages bottom-up, conditioning each stage on the replayed reconstruction of
the previous one, so the stored traces replay against exactly the chain that
produced them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conditioning import PromptTable
from .denoiser import DenoiserModel
from .diffusion import (
    NoiseSchedule,
    build_linear_schedule,
    ddim_step_backward,
    make_timestep_grid,
)
from .errors import NumericalError
from .inversion import (
    InversionTrace,
    IterInvConfig,
    _cfg_eps,
    _edge_indices,
    _upsampled_cond,
    ddim_invert,
    iterinv_stage,
    null_text_invert,
    replay_reconstruction,
)
from .metrics import MetricRecord, compare
from .resample import downsample_area

STAGE1_METHODS = ("ddim", "nti")
UPSCALE_METHODS = ("ddim", "iterinv")


@dataclass
class CascadeConfig:
    stage_resolutions: tuple[int, ...] = (16, 32, 64)
    stage1_method: str = "nti"
    upscale_method: str = "iterinv"
    iterinv: IterInvConfig = field(default_factory=IterInvConfig)

    def __post_init__(self):
        if self.stage1_method not in STAGE1_METHODS:
            raise ValueError(f"stage1_method must be one of {STAGE1_METHODS}")
        if self.upscale_method not in UPSCALE_METHODS:
            raise ValueError(f"upscale_method must be one of {UPSCALE_METHODS}")
        res = self.stage_resolutions
        if len(res) < 1 or any(r < 1 for r in res):
            raise ValueError("stage_resolutions must be positive")
        for lo, hi in zip(res, res[1:]):
            if hi <= lo or hi % lo:
                raise ValueError(
                    "stage_resolutions must be increasing with integer upsampling "
                    f"factors, got {res}"
                )

    @property
    def num_stages(self) -> int:
        return len(self.stage_resolutions)


@dataclass
class CascadeResult:
    """Traces, per-stage reconstructions, and per-stage quality records."""

    traces: tuple[InversionTrace, ...]
    reconstructions: tuple[np.ndarray, ...]
    metrics: tuple[MetricRecord, ...]
    config: CascadeConfig
    prompt_id: int


def build_pyramid(image: np.ndarray, resolutions: Sequence[int]) -> tuple[np.ndarray, ...]:
    """Downsample a full-resolution image to every stage resolution.

    Returns lowest resolution first; the last entry is the input itself.
    """
    top = resolutions[-1]
    if image.shape[:2] != (top, top):
        raise ValueError(
            f"image shape {image.shape} does not match top resolution {top}"
        )
    return tuple(
        image if r == top else downsample_area(image, top // r) for r in resolutions
    )


def stage_noise_seed(seed: int, stage: int) -> int:
    """Deterministic per-stage seed for the conditioning-noise draw."""
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


def noise_conditioning(image: np.ndarray, sigma_aug: float, seed: int) -> np.ndarray:
    noise = np.random.default_rng(seed).standard_normal(image.shape)
    return image + sigma_aug * noise


def _annotate(stage: int, exc: NumericalError) -> NumericalError:
    return NumericalError(f"stage {stage}: {exc}")


def invert_cascade(
    models: Sequence[DenoiserModel],
    image: np.ndarray,
    prompt_id: int,
    table: PromptTable,
    config: CascadeConfig | None = None,
    schedule: NoiseSchedule | None = None,
    *,
    seed: int = 0,
    depth: int | None = None,
) -> CascadeResult:
    """Invert an image through the first ``depth`` stages of the cascade.

    ``image`` is at the top stage resolution regardless of ``depth``; lower
    stages work on its downsampled pyramid. Metrics compare each stage's
    reconstruction against its pyramid level.
    """
    config = config or CascadeConfig()
    schedule = schedule or build_linear_schedule()
    depth = config.num_stages if depth is None else depth
    if not 1 <= depth <= config.num_stages:
        raise ValueError(f"depth must be in [1, {config.num_stages}]")
    if len(models) < depth:
        raise ValueError(f"need {depth} stage models, got {len(models)}")

    grid = make_timestep_grid(schedule.num_train_steps, config.iterinv.steps)
    pyramid = build_pyramid(image, config.stage_resolutions)
    cond = table.embed(prompt_id)
    null = table.null()

    traces: list[InversionTrace] = []
    recons: list[np.ndarray] = []
    records: list[MetricRecord] = []

    for stage in range(1, depth + 1):
        model = models[stage - 1]
        x = pyramid[stage - 1]
        w = config.iterinv.omega(stage)
        need_null = null if w != 1.0 else None
        try:
            if stage == 1:
                if config.stage1_method == "nti":
                    trace = null_text_invert(
                        model, schedule, grid, x, cond, w, null, config.iterinv
                    )
                else:
                    trace = ddim_invert(
                        model, schedule, grid, x, cond, w, null=need_null
                    )
            else:
                cond_seed = stage_noise_seed(seed, stage)
                if config.upscale_method == "iterinv":
                    trace = iterinv_stage(
                        model, schedule, grid, x, cond, w, recons[-1],
                        config.iterinv, null=need_null, stage=stage,
                        cond_noise_seed=cond_seed,
                    )
                else:
                    noised = noise_conditioning(
                        recons[-1], config.iterinv.sigma_aug, cond_seed
                    )
                    trace = ddim_invert(
                        model, schedule, grid, x, cond, w, cond_image=noised,
                        null=need_null, sigma_aug=config.iterinv.sigma_aug,
                        cond_noise_seed=cond_seed, stage=stage,
                    )
            recon = replay_reconstruction(trace, model, schedule)
        except NumericalError as exc:
            raise _annotate(stage, exc) from exc
        traces.append(trace)
        recons.append(recon)
        records.append(compare(f"stage{stage}", config.iterinv.omega1, recon, x))

    return CascadeResult(tuple(traces), tuple(recons), tuple(records), config, prompt_id)


def decode_from_noise(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    grid,
    z_init: np.ndarray,
    cond,
    w: float,
    *,
    null_vec: np.ndarray | None = None,
    cond_image: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic generation: walk the grid backward from ``z_init``."""
    if w != 1.0 and null_vec is None:
        raise ValueError("guidance != 1 requires a null embedding")
    cond_up = _upsampled_cond(model, cond_image, z_init.shape)
    z = z_init
    for k in range(grid.inference_steps - 1, -1, -1):
        t, t_prev = _edge_indices(grid, k)
        eps = _cfg_eps(model, z, t, cond, null_vec, w, cond_up)
        z = ddim_step_backward(schedule, z, t, t_prev, eps)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"generated state at position {k} is non-finite")
    return z


def superres_generate(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    grid,
    lower_image: np.ndarray,
    cond,
    w: float,
    sigma_aug: float,
    resolution: int,
    *,
    null_vec: np.ndarray | None,
    z_seed: int,
    cond_noise_seed: int,
) -> np.ndarray:
    """Generate one super-resolution stage conditioned on a lower-stage image."""
    channels = lower_image.shape[2]
    z0 = np.random.default_rng(z_seed).standard_normal((resolution, resolution, channels))
    noised = noise_conditioning(lower_image, sigma_aug, cond_noise_seed)
    return decode_from_noise(
        model, schedule, grid, z0, cond, w, null_vec=null_vec, cond_image=noised
    )


def generate_stage_outputs(
    models: Sequence[DenoiserModel],
    prompt_id: int,
    table: PromptTable,
    config: CascadeConfig | None = None,
    schedule: NoiseSchedule | None = None,
    *,
    seed: int = 0,
    channels: int = 3,
) -> tuple[np.ndarray, ...]:
    """Sample the full cascade for a prompt; returns every stage's output."""
    config = config or CascadeConfig()
    schedule = schedule or build_linear_schedule()
    grid = make_timestep_grid(schedule.num_train_steps, config.iterinv.steps)
    cond = table.embed(prompt_id)
    null_vec = table.null().vector

    outputs: list[np.ndarray] = []
    for stage, res in enumerate(config.stage_resolutions, start=1):
        w = config.iterinv.omega(stage)
        nv = null_vec if w != 1.0 else None
        z_seed = int(np.random.SeedSequence([seed, 300 + stage]).generate_state(1)[0])
        try:
            if stage == 1:
                z0 = np.random.default_rng(z_seed).standard_normal((res, res, channels))
                out = decode_from_noise(
                    models[0], schedule, grid, z0, cond, w, null_vec=nv
                )
            else:
                out = superres_generate(
                    models[stage - 1], schedule, grid, outputs[-1], cond, w,
                    config.iterinv.sigma_aug, res, null_vec=nv, z_seed=z_seed,
                    cond_noise_seed=stage_noise_seed(seed, stage),
                )
        except NumericalError as exc:
            raise _annotate(stage, exc) from exc
        outputs.append(out)
    return tuple(outputs)


def generate_cascade(
    models: Sequence[DenoiserModel],
    prompt_id: int,
    table: PromptTable,
    config: CascadeConfig | None = None,
    schedule: NoiseSchedule | None = None,
    *,
    seed: int = 0,
    channels: int = 3,
) -> np.ndarray:
    """Sample the cascade and return the top-resolution output."""
    return generate_stage_outputs(
        models, prompt_id, table, config, schedule, seed=seed, channels=channels
    )[-1]
