"""Noise-prediction training for the toy cascade.

Stage 1 is class-conditional at the base resolution; stages 2 and 3 are
super-resolution models that additionally see the next-lower ground-truth
rendering, noised with ``sigma_aug`` and bilinearly upsampled, concatenated
on the channel axis — matching how conditioning is built at inference time.

Plain SGD with momentum on the epsilon-prediction objective. A fraction of
conditioning embeddings is replaced by the empty-prompt embedding during
training so classifier-free guidance has a meaningful unconditional branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import PromptTable
from .convnet import ConvNet
from .dataset import ShapeSample, TrainConfig
from .denoiser import ConvNetDenoiser
from .diffusion import NoiseSchedule, build_linear_schedule
from .errors import NumericalError
from .resample import upsample_bilinear


@dataclass
class TrainResult:
    model: ConvNetDenoiser
    losses: np.ndarray
    final_loss: float


def _stack_stage(
    dataset: list[ShapeSample], stage: int, config: TrainConfig
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Stage images, lower-stage images (or None) and class ids as arrays."""
    idx = stage - 1
    res = config.stage_resolutions[idx]
    for s in dataset:
        if s.image_pyramid[idx].shape[0] != res:
            raise ValueError(
                f"dataset sample at {s.image_pyramid[idx].shape}, stage {stage} "
                f"expects {res}"
            )
    images = np.stack([s.image_pyramid[idx] for s in dataset])
    lowers = None
    if stage > 1:
        lowers = np.stack([s.image_pyramid[idx - 1] for s in dataset])
    classes = np.array([s.prompt_id for s in dataset], dtype=np.int64)
    return images, lowers, classes


def train_stage(
    stage: int,
    dataset: list[ShapeSample],
    config: TrainConfig,
    schedule: NoiseSchedule | None = None,
    table: PromptTable | None = None,
) -> TrainResult:
    """Train one stage from scratch and return the model with its loss curve."""
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    if not dataset:
        raise ValueError("dataset is empty")
    schedule = schedule or build_linear_schedule()
    table = table or PromptTable(config.num_classes)

    images, lowers, classes = _stack_stage(dataset, stage, config)
    channels = images.shape[3]
    factor = 1 if stage == 1 else images.shape[1] // lowers.shape[1]

    # Model init gets its own stream so stages differ even with one seed.
    init_seed = int(
        np.random.SeedSequence([config.seed, stage]).generate_state(1)[0]
    )
    net = ConvNet(
        state_channels=channels,
        cond_image_channels=0 if stage == 1 else channels,
        seed=init_seed,
    )
    model = ConvNetDenoiser(net)
    dtype = np.dtype(config.compute_dtype)
    net.cast(dtype)
    images = images.astype(dtype, copy=False)
    if lowers is not None:
        lowers = lowers.astype(dtype, copy=False)
    embeddings = np.stack(
        [table.embed(c).vector for c in range(config.num_classes)]
    ).astype(dtype)
    null_vec = table.null().vector.astype(dtype)
    alpha_bars = schedule.alpha_bars.astype(dtype)

    params = net._param_arrays()
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 100 + stage]))

    steps_per_epoch = max(1, len(dataset) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    losses = np.empty(total_steps)

    for step in range(total_steps):
        pick = rng.integers(0, len(dataset), size=config.batch_size)
        x0 = images[pick]
        t = rng.integers(0, schedule.num_train_steps, size=config.batch_size)
        noise = rng.standard_normal(x0.shape, dtype=dtype)
        ab = alpha_bars[t][:, None, None, None]
        z = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise

        cond = embeddings[classes[pick]].copy()
        drop = rng.random(config.batch_size) < config.null_drop_prob
        cond[drop] = null_vec

        cond_img = None
        if stage > 1:
            low = lowers[pick] + config.sigma_aug * rng.standard_normal(
                lowers[pick].shape, dtype=dtype
            )
            cond_img = np.stack(
                [upsample_bilinear(im, factor) for im in low]
            ).astype(dtype, copy=False)

        pred, cache = net.forward(z, t, cond, cond_img, want_cache=True)
        resid = pred - noise
        loss = float(np.mean(resid**2))
        if not np.isfinite(loss):
            raise NumericalError(f"stage {stage} training diverged at step {step}")
        losses[step] = loss

        dout = (2.0 / resid.size) * resid
        grads = net.backward(
            cache, dout, need_state=False, need_cond=False, need_params=True
        )["grad_params"]

        i = 0
        for p, v in zip(params, velocity):
            g = grads[i : i + p.size].reshape(p.shape)
            i += p.size
            v *= config.momentum
            v += g
            p -= config.learning_rate * v

    net.cast(np.float64)
    return TrainResult(model=model, losses=losses, final_loss=float(losses[-1]))


def train_cascade(
    dataset: list[ShapeSample],
    config: TrainConfig,
    schedule: NoiseSchedule | None = None,
    table: PromptTable | None = None,
) -> tuple[TrainResult, TrainResult, TrainResult]:
    """Train all three stages on one dataset."""
    return tuple(
        train_stage(stage, dataset, config, schedule, table) for stage in (1, 2, 3)
    )
