"""Binary serialization of denoiser models.

Layout (little-endian): 8-byte magic ``CINVMDL1``, u32 format version,
u32 model kind, u32 metadata count followed by that many i64 values, then a
u64 float count followed by that many float64 values. Round trips are
bit-exact.

Oracle kinds carry their defining data (schedule betas, anchors / mean) in
the float payload; their trainable parameter vector is still empty.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .denoiser import ConvNetDenoiser, DeltaOracle, DenoiserModel, GaussianOracle
from .convnet import ConvNet
from .diffusion import NoiseSchedule
from .errors import DataFormatError

MODEL_MAGIC = b"CINVMDL1"
_VERSION = 1
_KIND_CODES = {"delta-oracle": 0, "gaussian-oracle": 1, "conv-net": 2}


def _pack(meta: list[int], floats: np.ndarray, kind: str) -> bytes:
    parts = [
        MODEL_MAGIC,
        struct.pack("<II", _VERSION, _KIND_CODES[kind]),
        struct.pack("<I", len(meta)),
        np.asarray(meta, dtype="<i8").tobytes(),
        struct.pack("<Q", floats.size),
        np.ascontiguousarray(floats, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def save_model(model: DenoiserModel, path: str | Path) -> None:
    if isinstance(model, DeltaOracle):
        sched = model.schedule
        m, h, w, c = model.anchors.shape
        has_emb = int(model.anchor_embeddings is not None)
        meta = [sched.num_train_steps, m, h, w, c, model.cond_width, has_emb]
        chunks = [sched.betas.ravel(), model.anchors.ravel()]
        if has_emb:
            chunks.append(model.anchor_embeddings.ravel())
        payload = _pack(meta, np.concatenate(chunks), model.kind)
    elif isinstance(model, GaussianOracle):
        sched = model.schedule
        h, w, c = model.mu.shape
        meta = [sched.num_train_steps, h, w, c, model.cond_width]
        floats = np.concatenate([sched.betas.ravel(), model.mu.ravel(), [model.sigma]])
        payload = _pack(meta, floats, model.kind)
    elif isinstance(model, ConvNetDenoiser):
        net = model.net
        meta = [net.state_channels, net.cond_image_channels, *net.hidden]
        payload = _pack(meta, net.get_flat_params(), model.kind)
    else:
        raise ValueError(f"cannot serialize model of type {type(model)!r}")
    Path(path).write_bytes(payload)


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise DataFormatError(f"{self.path}: truncated payload")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").copy()

    def done(self) -> None:
        if self.off != len(self.data):
            raise DataFormatError(f"{self.path}: trailing bytes after payload")


def _schedule_from_betas(num_train_steps: int, betas: np.ndarray) -> NoiseSchedule:
    return NoiseSchedule(num_train_steps, betas, np.cumprod(1.0 - betas))


def load_model(path: str | Path) -> DenoiserModel:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(8) != MODEL_MAGIC:
        raise DataFormatError(f"{path}: bad magic (not a model file)")
    version, kind_code = struct.unpack("<II", r.take(8))
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    (n_meta,) = struct.unpack("<I", r.take(4))
    meta = np.frombuffer(r.take(8 * n_meta), dtype="<i8").tolist()
    (n_floats,) = struct.unpack("<Q", r.take(8))
    floats = r.floats(n_floats)
    r.done()

    if kind_code == 0:
        if len(meta) != 7:
            raise DataFormatError(f"{path}: bad delta-oracle metadata")
        n_train, m, h, w, c, cond_width, has_emb = meta
        sizes = n_train + m * h * w * c + (m * cond_width if has_emb else 0)
        if floats.size != sizes:
            raise DataFormatError(f"{path}: float payload size mismatch")
        betas = floats[:n_train]
        anchors = floats[n_train : n_train + m * h * w * c].reshape(m, h, w, c)
        emb = None
        if has_emb:
            emb = floats[n_train + m * h * w * c :].reshape(m, cond_width)
        return DeltaOracle(_schedule_from_betas(n_train, betas), anchors, emb, cond_width)
    if kind_code == 1:
        if len(meta) != 5:
            raise DataFormatError(f"{path}: bad gaussian-oracle metadata")
        n_train, h, w, c, cond_width = meta
        if floats.size != n_train + h * w * c + 1:
            raise DataFormatError(f"{path}: float payload size mismatch")
        betas = floats[:n_train]
        mu = floats[n_train : n_train + h * w * c].reshape(h, w, c)
        sigma = float(floats[-1])
        return GaussianOracle(_schedule_from_betas(n_train, betas), mu, sigma, cond_width)
    if kind_code == 2:
        if len(meta) != 5:
            raise DataFormatError(f"{path}: bad conv-net metadata")
        state_ch, cond_ch, h1, h2, h3 = meta
        net = ConvNet(state_ch, cond_ch, (h1, h2, h3), seed=0)
        if floats.size != net.num_params:
            raise DataFormatError(f"{path}: float payload size mismatch")
        net.set_flat_params(floats)
        return ConvNetDenoiser(net)
    raise DataFormatError(f"{path}: unknown model kind {kind_code}")
