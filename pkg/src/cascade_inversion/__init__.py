"""Cascaded pixel-space diffusion inversion at desk scale.

A small, fully deterministic numpy implementation of deterministic
sampling/inversion for a three-stage super-resolution diffusion cascade:
plain DDIM inversion, null-text inversion at stage 1, per-timestep
optimized inversion for the upscale stages, mask-guided editing, and an
evaluation harness comparing the methods on a rendered toy testbed.
"""

from .cascade import (
    CascadeConfig,
    CascadeResult,
    build_pyramid,
    decode_from_noise,
    generate_cascade,
    generate_stage_outputs,
    invert_cascade,
    noise_conditioning,
    stage_noise_seed,
    superres_generate,
)
from .conditioning import NullEmbedding, PromptEmbedding, PromptTable
from .convnet import ConvNet, timestep_embedding
from .dataset import (
    ShapeSample,
    TrainConfig,
    class_prototypes,
    classify_by_prototype,
    generate_dataset,
    render_class_sample,
    render_scene,
)
from .denoiser import (
    ConvNetDenoiser,
    DeltaOracle,
    DenoiserInput,
    GaussianOracle,
    LinearizedEps,
    VjpResult,
    predict_eps,
    predict_eps_with_vjp,
    train_vjp,
)
from .diffusion import (
    NoiseSchedule,
    TimestepGrid,
    backward_step_coeffs,
    build_linear_schedule,
    cfg_combine,
    ddim_step_backward,
    ddim_step_forward,
    make_timestep_grid,
    predict_x0,
    q_sample,
)
from .editing import EditMask, EditRequest, edit_image, edit_stage1, estimate_mask
from .errors import CascadeInversionError, DataFormatError, NumericalError
from .harness import (
    DEFAULT_GRID,
    GridMethod,
    GridRunResult,
    HarnessConfig,
    load_testbed,
    make_testbed,
    run_eval_grid,
)
from .inversion import (
    InversionTrace,
    IterInvConfig,
    ddim_invert,
    iterinv_stage,
    null_text_invert,
    replay_reconstruction,
    with_guidance,
)
from .manifest import RunManifest, config_hash, file_sha256, load_manifest, write_manifest
from .metrics import (
    MetricRecord,
    compare,
    format_table,
    mse,
    psnr,
    ssim,
    to_display,
    write_report,
)
from .model_io import load_model, save_model
from .ppm import read_image, read_mask, write_image, write_mask
from .trace_io import load_trace, save_trace
from .training import TrainResult, train_cascade, train_stage

__version__ = "0.1.0"
