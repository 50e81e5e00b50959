"""Deterministic inversion of images to noise trajectories, and replay.

Three inversion operators share one trace format:

* :func:`ddim_invert` — run the DDIM update in the noising direction and
  record the visited states.
* :func:`null_text_invert` — invert at guidance 1 to get a pivot trajectory,
  then walk it backward under guidance ``w`` while optimizing a per-step
  empty-prompt embedding so the guided step lands on the pivot.
* :func:`iterinv_stage` — for super-resolution stages: build the trajectory
  one step at a time, optimizing each noisy state so that a single backward
  step (conditioned on the noised lower-stage reconstruction) reproduces the
  previously fixed state.

A trace stores T+1 states; position 0 is the clean input. Replaying a trace
backward from its last state with the recorded conditioning is the
stage's reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import NullEmbedding, PromptEmbedding
from .denoiser import DenoiserInput, DenoiserModel, predict_eps
from .diffusion import (
    NoiseSchedule,
    TimestepGrid,
    backward_step_coeffs,
    cfg_combine,
    ddim_step_backward,
    ddim_step_forward,
)
from .errors import NumericalError
from .resample import upsample_bilinear

# Smallest step-halving factor before the guarded descent gives up and keeps
# the current iterate.
_MIN_STEP = 1e-12


@dataclass
class IterInvConfig:
    """Shared inversion settings.

    ``steps``/``inner_iters`` are the T and N of the per-timestep optimizer;
    ``omega1..3`` are the per-stage guidance scales; the ``nti_*`` fields
    control the stage-1 null-embedding optimizer.
    """

    steps: int = 50
    inner_iters: int = 20
    step_size: float = 0.1
    early_stop_tol: float = 1e-6
    sigma_aug: float = 0.05
    omega1: float = 7.0
    omega2: float = 1.0
    omega3: float = 1.0
    use_mapped_update: bool = False
    nti_inner_iters: int = 10
    nti_step_size: float = 0.01
    nti_early_stop: float = 1e-5

    def __post_init__(self):
        if self.steps < 1 or self.inner_iters < 1 or self.nti_inner_iters < 1:
            raise ValueError("steps and inner iteration counts must be >= 1")
        if self.step_size <= 0.0 or self.nti_step_size <= 0.0:
            raise ValueError("step sizes must be positive")
        if self.early_stop_tol < 0.0 or self.nti_early_stop < 0.0:
            raise ValueError("early-stop tolerances must be >= 0")
        if self.sigma_aug < 0.0:
            raise ValueError("sigma_aug must be >= 0")

    def omega(self, stage: int) -> float:
        return (self.omega1, self.omega2, self.omega3)[stage - 1]


@dataclass
class InversionTrace:
    """Everything needed to replay one stage's reconstruction.

    ``states`` has shape (T+1, H, W, C) with the clean input at index 0.
    ``null_embeddings`` (T, cond_width) is present whenever guidance != 1:
    row k is used on the edge between positions k and k+1. ``cond_image`` is
    the noised lower-stage reconstruction at its native resolution.
    ``per_step_losses`` records the final inner-loop residual 2-norm per
    edge (zero for plain DDIM traces). ``inner_loss_curves`` is kept in
    memory for diagnostics but is not serialized.
    """

    stage: int
    guidance_scale: float
    grid: TimestepGrid
    states: np.ndarray
    prompt_embedding: np.ndarray
    null_embeddings: np.ndarray | None
    cond_image: np.ndarray | None
    sigma_aug: float
    cond_noise_seed: int
    per_step_losses: np.ndarray
    initial_step_losses: np.ndarray | None = None
    inner_loss_curves: np.ndarray | None = None


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{what} contains non-finite values")


def _wants_cond_image(model: DenoiserModel) -> bool:
    net = getattr(model, "net", None)
    return net is not None and net.cond_image_channels > 0


def _upsampled_cond(
    model: DenoiserModel, cond_native: np.ndarray | None, state_shape: tuple
) -> np.ndarray | None:
    """Noised lower-stage image brought to the state's resolution, if the
    model consumes one."""
    if not _wants_cond_image(model):
        return None
    if cond_native is None:
        raise ValueError("model expects a conditioning image but none was provided")
    h, w = state_shape[:2]
    ch, cw = cond_native.shape[:2]
    if h % ch or w % cw or h // ch != w // cw:
        raise ValueError(
            f"conditioning resolution {cond_native.shape} does not evenly divide "
            f"state resolution {state_shape}"
        )
    return upsample_bilinear(cond_native, h // ch)


def _edge_indices(grid: TimestepGrid, k: int) -> tuple[int, int]:
    """(timestep, previous timestep) for the edge between positions k, k+1."""
    t = int(grid.timesteps[k])
    t_prev = int(grid.timesteps[k - 1]) if k > 0 else -1
    return t, t_prev


def _cfg_eps(model, z, t, cond_emb, null_vec, w, cond_up) -> np.ndarray:
    eps_c = predict_eps(model, DenoiserInput(z, t, cond_emb, cond_up))
    if w == 1.0:
        return eps_c
    eps_u = predict_eps(model, DenoiserInput(z, t, NullEmbedding(null_vec), cond_up))
    return cfg_combine(eps_c, eps_u, w)


def _require_null(w: float, null) -> np.ndarray | None:
    if w == 1.0:
        return None if null is None else np.asarray(null.vector, dtype=np.float64)
    if null is None:
        raise ValueError("guidance != 1 requires a null embedding")
    return np.asarray(null.vector, dtype=np.float64)


def ddim_invert(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    x0: np.ndarray,
    cond: PromptEmbedding,
    w: float,
    cond_image: np.ndarray | None = None,
    *,
    null: NullEmbedding | None = None,
    sigma_aug: float = 0.0,
    cond_noise_seed: int = 0,
    stage: int = 1,
) -> InversionTrace:
    """Plain DDIM inversion: T forward steps from the clean image.

    ``cond_image``, when given, is the (already noised) lower-stage image at
    its native resolution.
    """
    _require_finite(x0, "input image")
    null_vec = _require_null(w, null)
    cond_up = _upsampled_cond(model, cond_image, x0.shape)
    T = grid.inference_steps

    states = np.empty((T + 1,) + x0.shape)
    states[0] = x0
    z = x0
    for k in range(T):
        t, t_prev = _edge_indices(grid, k)
        eps = _cfg_eps(model, z, t, cond, null_vec, w, cond_up)
        z = ddim_step_forward(schedule, z, t_prev, t, eps)
        _require_finite(z, f"state at position {k + 1}")
        states[k + 1] = z

    nulls = None if w == 1.0 else np.tile(null_vec, (T, 1))
    return InversionTrace(
        stage=stage,
        guidance_scale=float(w),
        grid=grid,
        states=states,
        prompt_embedding=cond.vector.copy(),
        null_embeddings=nulls,
        cond_image=None if cond_image is None else cond_image.copy(),
        sigma_aug=float(sigma_aug),
        cond_noise_seed=int(cond_noise_seed),
        per_step_losses=np.zeros(T),
    )


def with_guidance(trace: InversionTrace, w: float, null: NullEmbedding) -> InversionTrace:
    """Relabel a guidance-1 trace so replay samples with CFG at scale ``w``.

    This is the classic mismatched baseline: invert at guidance 1, then
    reconstruct with the fixed empty-prompt embedding at the sampling
    guidance. The returned trace shares the pivot's states.
    """
    if trace.guidance_scale != 1.0:
        raise ValueError("with_guidance expects a guidance-1 trace")
    if w == 1.0:
        return trace
    T = trace.grid.inference_steps
    null_vec = np.asarray(null.vector, dtype=np.float64)
    return InversionTrace(
        stage=trace.stage,
        guidance_scale=float(w),
        grid=trace.grid,
        states=trace.states,
        prompt_embedding=trace.prompt_embedding,
        null_embeddings=np.tile(null_vec, (T, 1)),
        cond_image=trace.cond_image,
        sigma_aug=trace.sigma_aug,
        cond_noise_seed=trace.cond_noise_seed,
        per_step_losses=trace.per_step_losses,
    )


def _linearized_backward(model, schedule, z, t, t_prev, cond_emb, null_vec, w, cond_up):
    """Backward-step output at ``z`` plus a closure for its state gradient."""
    a, b = backward_step_coeffs(schedule, t, t_prev)
    lin_c = model.predict_linearize(DenoiserInput(z, t, cond_emb, cond_up))
    if w == 1.0:
        eps = lin_c.output

        def grad(upstream):
            gs, _ = lin_c.vjp(upstream)
            return a * upstream + b * gs

    else:
        lin_u = model.predict_linearize(
            DenoiserInput(z, t, NullEmbedding(null_vec), cond_up)
        )
        eps = cfg_combine(lin_c.output, lin_u.output, w)

        def grad(upstream):
            gs_c, _ = lin_c.vjp(upstream)
            gs_u, _ = lin_u.vjp(upstream)
            return a * upstream + b * (w * gs_c + (1.0 - w) * gs_u)

    return a * z + b * eps, grad


def _optimize_state(
    model, schedule, z0, target, t, t_prev, cond_emb, null_vec, w, cond_up, config
):
    """Guarded gradient descent on || target - backward_step(z) ||^2.

    Returns (optimized z, mapped output at z, loss curve of 2-norms). The
    curve is padded to ``inner_iters + 1`` entries on early stop, and is
    non-increasing by construction: a trial step is only accepted if it does
    not increase the loss, with step halving otherwise.
    """
    z = z0.copy()
    out, grad_fn = _linearized_backward(
        model, schedule, z, t, t_prev, cond_emb, null_vec, w, cond_up
    )
    resid = out - target
    loss = float(np.sum(resid * resid))
    if not np.isfinite(loss):
        raise NumericalError(f"inner loop at timestep {t}: non-finite initial loss")
    curve = np.empty(config.inner_iters + 1)
    curve[0] = np.sqrt(loss)

    for j in range(config.inner_iters):
        if curve[j] <= config.early_stop_tol:
            curve[j + 1 :] = curve[j]
            break
        g = grad_fn(2.0 * resid)
        eta = config.step_size
        while eta >= _MIN_STEP:
            z_try = z - eta * g
            out_try, grad_try = _linearized_backward(
                model, schedule, z_try, t, t_prev, cond_emb, null_vec, w, cond_up
            )
            resid_try = out_try - target
            loss_try = float(np.sum(resid_try * resid_try))
            if np.isfinite(loss_try) and loss_try <= loss:
                z, out, grad_fn, resid, loss = z_try, out_try, grad_try, resid_try, loss_try
                break
            eta *= 0.5
        curve[j + 1] = np.sqrt(loss)
    return z, out, curve


def iterinv_stage(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    x_stage: np.ndarray,
    cond: PromptEmbedding,
    w: float,
    cond_recon: np.ndarray,
    config: IterInvConfig,
    *,
    null: NullEmbedding | None = None,
    stage: int = 2,
    cond_noise_seed: int = 0,
) -> InversionTrace:
    """Per-timestep optimized inversion for a super-resolution stage.

    ``cond_recon`` is the lower stage's reconstruction at its native
    resolution. It is noised once with ``config.sigma_aug`` under
    ``cond_noise_seed`` and that exact realization is stored in the trace, so
    inversion and replay see identical conditioning.
    """
    _require_finite(x_stage, "input image")
    _require_finite(cond_recon, "conditioning reconstruction")
    null_vec = _require_null(w, null)

    noise = np.random.default_rng(cond_noise_seed).standard_normal(cond_recon.shape)
    noised = cond_recon + config.sigma_aug * noise
    cond_up = _upsampled_cond(model, noised, x_stage.shape)

    T = grid.inference_steps
    states = np.empty((T + 1,) + x_stage.shape)
    states[0] = x_stage
    finals = np.empty(T)
    initials = np.empty(T)
    curves = np.empty((T, config.inner_iters + 1))

    for pos in range(1, T + 1):
        k = pos - 1
        t, t_prev = _edge_indices(grid, k)
        target = states[pos - 1]
        z_opt, mapped, curve = _optimize_state(
            model, schedule, target, target, t, t_prev, cond, null_vec, w, cond_up,
            config,
        )
        states[pos] = mapped if config.use_mapped_update else z_opt
        _require_finite(states[pos], f"state at position {pos}")
        curves[k] = curve
        initials[k] = curve[0]
        finals[k] = curve[-1]

    nulls = None if w == 1.0 else np.tile(null_vec, (T, 1))
    return InversionTrace(
        stage=stage,
        guidance_scale=float(w),
        grid=grid,
        states=states,
        prompt_embedding=cond.vector.copy(),
        null_embeddings=nulls,
        cond_image=noised,
        sigma_aug=float(config.sigma_aug),
        cond_noise_seed=int(cond_noise_seed),
        per_step_losses=finals,
        initial_step_losses=initials,
        inner_loss_curves=curves,
    )


def null_text_invert(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    x0: np.ndarray,
    cond: PromptEmbedding,
    w: float,
    null: NullEmbedding,
    config: IterInvConfig | None = None,
    *,
    stage: int = 1,
) -> InversionTrace:
    """Pivot inversion at guidance 1 plus per-step null-embedding tuning.

    At ``w == 1`` guidance is a no-op, so no optimization happens and the
    returned trace replays exactly like :func:`ddim_invert` at w=1.
    """
    config = config or IterInvConfig()
    pivot = ddim_invert(model, schedule, grid, x0, cond, 1.0, stage=stage)
    T = grid.inference_steps
    if w == 1.0:
        return pivot

    states = pivot.states
    null_vec = null.vector.copy()
    nulls = np.empty((T, null_vec.size))
    finals = np.empty(T)
    initials = np.empty(T)
    cur = states[T].copy()

    for k in range(T - 1, -1, -1):
        t, t_prev = _edge_indices(grid, k)
        a, b = backward_step_coeffs(schedule, t, t_prev)
        target = states[k]
        # The state is held fixed while the null embedding moves, so the
        # conditional prediction is constant for this edge.
        eps_c = predict_eps(model, DenoiserInput(cur, t, cond))

        def eval_null(vec):
            lin = model.predict_linearize(DenoiserInput(cur, t, NullEmbedding(vec)))
            out = a * cur + b * cfg_combine(eps_c, lin.output, w)
            resid = out - target
            return lin, resid, float(np.sum(resid * resid))

        lin_u, resid, loss = eval_null(null_vec)
        if not np.isfinite(loss):
            raise NumericalError(f"null optimization at timestep {t}: non-finite loss")
        initials[k] = np.sqrt(loss)
        for _ in range(config.nti_inner_iters):
            if loss / resid.size <= config.nti_early_stop:
                break
            _, grad_cond = lin_u.vjp(2.0 * resid)
            g = b * (1.0 - w) * grad_cond
            eta = config.nti_step_size
            while eta >= _MIN_STEP:
                vec_try = null_vec - eta * g
                lin_try, resid_try, loss_try = eval_null(vec_try)
                if np.isfinite(loss_try) and loss_try <= loss:
                    null_vec, lin_u, resid, loss = vec_try, lin_try, resid_try, loss_try
                    break
                eta *= 0.5
        finals[k] = np.sqrt(loss)
        nulls[k] = null_vec

        # Advance with the canonical step so the in-loop trajectory is
        # bitwise the same one a replay of the stored trace walks.
        eps_hat = cfg_combine(eps_c, lin_u.output, w)
        cur = ddim_step_backward(schedule, cur, t, t_prev, eps_hat)
        _require_finite(cur, f"state after edge {k}")

    return InversionTrace(
        stage=stage,
        guidance_scale=float(w),
        grid=grid,
        states=states,
        prompt_embedding=cond.vector.copy(),
        null_embeddings=nulls,
        cond_image=None,
        sigma_aug=0.0,
        cond_noise_seed=0,
        per_step_losses=finals,
        initial_step_losses=initials,
    )


def _check_trace_model(trace: InversionTrace, model: DenoiserModel) -> None:
    if trace.prompt_embedding.shape != (model.cond_width,):
        raise ValueError(
            f"trace conditioning width {trace.prompt_embedding.shape} does not "
            f"match model width {model.cond_width}"
        )
    if _wants_cond_image(model) and trace.cond_image is None:
        raise ValueError("model expects a conditioning image but the trace has none")


def replay_reconstruction(
    trace: InversionTrace,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    *,
    cond_image_override: np.ndarray | None = None,
) -> np.ndarray:
    """Walk the trace backward from its last state; the result at position 0
    is the stage's reconstruction.

    ``cond_image_override`` substitutes a different conditioning image at the
    stored resolution (used by the evaluation harness to decode against a
    reconstructed chain instead of the encode-time conditioning).
    """
    if cond_image_override is None:
        _check_trace_model(trace, model)
        cond_native = trace.cond_image
    else:
        cond_native = cond_image_override
    cond_up = _upsampled_cond(model, cond_native, trace.states.shape[1:])

    grid = trace.grid
    w = trace.guidance_scale
    if w != 1.0 and trace.null_embeddings is None:
        raise ValueError("trace with guidance != 1 lacks null embeddings")
    cond_emb = PromptEmbedding(trace.prompt_embedding, -1)

    z = trace.states[grid.inference_steps].copy()
    for k in range(grid.inference_steps - 1, -1, -1):
        t, t_prev = _edge_indices(grid, k)
        null_vec = None if w == 1.0 else trace.null_embeddings[k]
        eps = _cfg_eps(model, z, t, cond_emb, null_vec, w, cond_up)
        z = ddim_step_backward(schedule, z, t, t_prev, eps)
        _require_finite(z, f"replayed state at position {k}")
    return z
