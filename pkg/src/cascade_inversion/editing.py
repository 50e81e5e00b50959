"""Mask-guided text-driven editing on the stage-1 image, plus upscaling.

The edit has three parts:

1. :func:`estimate_mask` — noise the image to the middle of the training
   schedule several times, average the per-pixel gap between the source- and
   target-conditioned noise predictions, blur, normalize, and threshold.
2. Stage-1 edit — DDIM-encode under the source prompt to a fraction ``r`` of
   the inference grid, then decode under the target prompt, copying the
   stored encoding states back in outside the mask after every step.
3. Upscale — stages 2+ run as conditional generation from fresh noise,
   conditioned on the edited low-resolution output and the target prompt.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .cascade import CascadeConfig, superres_generate
from .conditioning import PromptEmbedding, PromptTable
from .denoiser import DenoiserInput, DenoiserModel, predict_eps
from .diffusion import (
    NoiseSchedule,
    build_linear_schedule,
    ddim_step_backward,
    ddim_step_forward,
    make_timestep_grid,
    q_sample,
)
from .errors import NumericalError
from .inversion import _cfg_eps, _edge_indices

_MASK_BLUR_SIGMA = 1.0


@dataclass
class EditRequest:
    """A text-driven edit of one image.

    ``encode_ratio`` is the fraction of the inference grid the image is
    encoded to before the guided decode; larger values allow larger changes.
    """

    image: np.ndarray
    source_prompt_id: int
    target_prompt_id: int
    encode_ratio: float = 0.8
    mask_threshold: float = 0.5
    num_mask_seeds: int = 8
    mask_seed: int = 0

    def __post_init__(self):
        if self.source_prompt_id == self.target_prompt_id:
            raise ValueError("source and target prompts must differ")
        if not 0.0 < self.encode_ratio <= 1.0:
            raise ValueError("encode_ratio must be in (0, 1]")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ValueError("mask_threshold must be in [0, 1]")
        if self.num_mask_seeds < 1:
            raise ValueError("num_mask_seeds must be >= 1")


@dataclass
class EditMask:
    """Binary edit region plus the normalized relevance map it came from."""

    mask: np.ndarray
    relevance: np.ndarray
    threshold: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.relevance)):
            raise NumericalError("relevance map contains non-finite values")

    @property
    def is_empty(self) -> bool:
        return not bool(self.mask.any())


def estimate_mask(
    model_s1: DenoiserModel,
    schedule: NoiseSchedule,
    image_s1: np.ndarray,
    src_cond: PromptEmbedding,
    tgt_cond: PromptEmbedding,
    request: EditRequest,
) -> EditMask:
    """Locate the pixels a prompt change would rewrite.

    The relevance map is min-max normalized to [0, 1]; an all-constant map
    (identical source/target behavior) normalizes to all zeros. The binary
    mask keeps pixels strictly above ``request.mask_threshold``, so threshold
    1.0 always gives an empty mask.
    """
    if request.source_prompt_id == request.target_prompt_id:
        raise ValueError("mask is undefined for identical prompts")
    t_mid = schedule.num_train_steps // 2
    rng = np.random.default_rng(request.mask_seed)

    acc = np.zeros(image_s1.shape[:2])
    for _ in range(request.num_mask_seeds):
        noise = rng.standard_normal(image_s1.shape)
        z = q_sample(schedule, image_s1, t_mid, noise)
        eps_src = predict_eps(model_s1, DenoiserInput(z, t_mid, src_cond))
        eps_tgt = predict_eps(model_s1, DenoiserInput(z, t_mid, tgt_cond))
        acc += np.abs(eps_src - eps_tgt).mean(axis=2)
    acc /= request.num_mask_seeds

    blurred = gaussian_filter(acc, sigma=_MASK_BLUR_SIGMA)
    lo, hi = float(blurred.min()), float(blurred.max())
    if hi > lo:
        relevance = (blurred - lo) / (hi - lo)
    else:
        relevance = np.zeros_like(blurred)
    mask = (relevance > request.mask_threshold).astype(np.float64)
    return EditMask(mask=mask, relevance=relevance, threshold=request.mask_threshold)


def edit_stage1(
    model_s1: DenoiserModel,
    schedule: NoiseSchedule,
    grid,
    request: EditRequest,
    src_cond: PromptEmbedding,
    tgt_cond: PromptEmbedding,
    mask: EditMask,
    *,
    guidance_scale: float = 1.0,
    null_vec: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mask-guided stage-1 edit.

    Returns ``(edited image, stored encoding states)``. The encode runs at
    guidance 1 under the source prompt up to position ``ceil(r * T)``; the
    decode runs under the target prompt at ``guidance_scale``. After each
    decode step the out-of-mask pixels are overwritten with the encoding
    state of that position, which pins the background to the source image's
    own replay.
    """
    if mask.is_empty:
        warnings.warn("edit mask is empty; edit degenerates to reconstruction")
    x0 = request.image
    T = grid.inference_steps
    m = math.ceil(request.encode_ratio * T)

    enc = np.empty((m + 1,) + x0.shape)
    enc[0] = x0
    z = x0
    for k in range(m):
        t, t_prev = _edge_indices(grid, k)
        eps = predict_eps(model_s1, DenoiserInput(z, t, src_cond))
        z = ddim_step_forward(schedule, z, t_prev, t, eps)
        enc[k + 1] = z
    if not np.all(np.isfinite(enc)):
        raise NumericalError("source encoding produced non-finite states")

    keep = 1.0 - mask.mask[:, :, None]
    z = enc[m].copy()
    for k in range(m - 1, -1, -1):
        t, t_prev = _edge_indices(grid, k)
        eps = _cfg_eps(model_s1, z, t, tgt_cond, null_vec, guidance_scale, None)
        z = ddim_step_backward(schedule, z, t, t_prev, eps)
        z = mask.mask[:, :, None] * z + keep * enc[k]
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"edited state at position {k} is non-finite")
    return z, enc


def edit_image(
    models: Sequence[DenoiserModel],
    request: EditRequest,
    cascade_config: CascadeConfig | None = None,
    *,
    table: PromptTable,
    schedule: NoiseSchedule | None = None,
    mask: EditMask | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Full edit pipeline; returns the top-resolution edited image.

    ``request.image`` must be at the stage-1 resolution. When ``mask`` is
    omitted it is estimated inline from the request settings.
    """
    config = cascade_config or CascadeConfig()
    schedule = schedule or build_linear_schedule()
    grid = make_timestep_grid(schedule.num_train_steps, config.iterinv.steps)

    src_cond = table.embed(request.source_prompt_id)
    tgt_cond = table.embed(request.target_prompt_id)
    if mask is None:
        mask = estimate_mask(models[0], schedule, request.image, src_cond, tgt_cond, request)

    w1 = config.iterinv.omega(1)
    null_vec = table.null().vector if w1 != 1.0 else None
    edited, _ = edit_stage1(
        models[0], schedule, grid, request, src_cond, tgt_cond, mask,
        guidance_scale=w1, null_vec=null_vec,
    )

    out = edited
    for stage in range(2, config.num_stages + 1):
        w = config.iterinv.omega(stage)
        nv = table.null().vector if w != 1.0 else None
        z_seed = int(np.random.SeedSequence([seed, 300 + stage]).generate_state(1)[0])
        cond_seed = int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])
        out = superres_generate(
            models[stage - 1], schedule, grid, out, tgt_cond, w,
            config.iterinv.sigma_aug, config.stage_resolutions[stage - 1],
            null_vec=nv, z_seed=z_seed, cond_noise_seed=cond_seed,
        )
    return out
