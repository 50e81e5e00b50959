"""Binary serialization of inversion traces.

Single little-endian container (magic ``CINVTRC1``) holding the full state
trajectory, prompt/null embeddings, the stored conditioning image, and the
per-step residual norms. All floats are written as f8, so save -> load ->
save is byte-identical. In-memory-only diagnostics (inner-loop curves,
initial residuals) are not serialized.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .diffusion import TimestepGrid
from .errors import DataFormatError
from .inversion import InversionTrace
from .model_io import _Reader

TRACE_MAGIC = b"CINVTRC1"
_VERSION = 1


def save_trace(trace: InversionTrace, path: str | Path) -> None:
    T = trace.grid.inference_steps
    states = np.ascontiguousarray(trace.states, dtype="<f8")
    if states.shape[0] != T + 1:
        raise ValueError("trace states do not match its timestep grid")
    _, h, w, c = states.shape
    has_nulls = trace.null_embeddings is not None
    has_cond = trace.cond_image is not None
    cond_shape = trace.cond_image.shape if has_cond else (0, 0, 0)

    parts = [
        TRACE_MAGIC,
        struct.pack("<II", _VERSION, trace.stage),
        struct.pack("<dd", trace.guidance_scale, trace.sigma_aug),
        struct.pack("<q", trace.cond_noise_seed),
        struct.pack("<IIII", T, h, w, c),
        struct.pack("<III", trace.prompt_embedding.size, int(has_nulls), int(has_cond)),
        struct.pack("<III", *cond_shape),
        np.asarray(trace.grid.timesteps, dtype="<u4").tobytes(),
        np.ascontiguousarray(trace.prompt_embedding, dtype="<f8").tobytes(),
        states.tobytes(),
    ]
    if has_nulls:
        parts.append(np.ascontiguousarray(trace.null_embeddings, dtype="<f8").tobytes())
    if has_cond:
        parts.append(np.ascontiguousarray(trace.cond_image, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(trace.per_step_losses, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_trace(path: str | Path) -> InversionTrace:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(8) != TRACE_MAGIC:
        raise DataFormatError(f"{path}: bad magic (not a trace file)")
    version, stage = struct.unpack("<II", r.take(8))
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    guidance, sigma_aug = struct.unpack("<dd", r.take(16))
    (seed,) = struct.unpack("<q", r.take(8))
    T, h, w, c = struct.unpack("<IIII", r.take(16))
    width, has_nulls, has_cond = struct.unpack("<III", r.take(12))
    ch, cw, cc = struct.unpack("<III", r.take(12))
    if T < 1 or h < 1 or w < 1 or c < 1 or width < 1:
        raise DataFormatError(f"{path}: non-positive dimension in header")

    timesteps = np.frombuffer(r.take(4 * T), dtype="<u4").astype(np.int64)
    try:
        grid = TimestepGrid(T, timesteps)
    except ValueError as exc:
        raise DataFormatError(f"{path}: invalid timestep grid ({exc})") from exc
    prompt = r.floats(width)
    states = r.floats((T + 1) * h * w * c).reshape(T + 1, h, w, c)
    nulls = r.floats(T * width).reshape(T, width) if has_nulls else None
    cond = r.floats(ch * cw * cc).reshape(ch, cw, cc) if has_cond else None
    losses = r.floats(T)
    r.done()

    return InversionTrace(
        stage=stage,
        guidance_scale=guidance,
        grid=grid,
        states=states,
        prompt_embedding=prompt,
        null_embeddings=nulls,
        cond_image=cond,
        sigma_aug=sigma_aug,
        cond_noise_seed=seed,
        per_step_losses=losses,
    )
