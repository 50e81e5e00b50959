"""Small fully convolutional noise predictor with hand-written reverse mode.

Architecture (all convolutions 3x3, zero-padded 'same'):

    input  = state [concat cond_image on channels]
    h1 = conv1(input) + b1 + time_embedding      (sinusoidal, added per channel)
    h2 = conv2(silu(h1)) + b2 + cond_embedding   (added per channel)
    h3 = conv3(silu(h2)) + b3
    out = conv4(silu(h3)) + b4

The smooth nonlinearity keeps finite-difference checks of the analytic
gradients well conditioned. Reverse-mode products are written out by hand:
the adjoint of a zero-padded 'same' convolution is the same convolution with
a spatially flipped, channel-transposed kernel.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def timestep_embedding(timesteps: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = np.asarray(timesteps, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, 9*C) patches in (ky, kx, c) order."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        b * h * w, 9 * c
    )


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """'same' 3x3 convolution; w has shape (3, 3, Cin, Cout)."""
    b, h, wid, cin = x.shape
    cout = w.shape[3]
    return (_im2col(x) @ w.reshape(9 * cin, cout)).reshape(b, h, wid, cout)


def _conv_adjoint(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Backprop dy through a 'same' conv with kernel w, returning d(input)."""
    w_rot = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    return _conv(dy, w_rot)


def _conv_weight_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    b, h, w, cin = x.shape
    cout = dy.shape[3]
    g = _im2col(x).T @ dy.reshape(b * h * w, cout)
    return g.reshape(3, 3, cin, cout)


class ConvNet:
    """Weights plus forward/backward passes. Wrapped by the denoiser layer."""

    def __init__(
        self,
        state_channels: int,
        cond_image_channels: int = 0,
        hidden: tuple[int, int, int] = (16, 32, 32),
        seed: int = 0,
    ):
        if state_channels < 1 or cond_image_channels < 0:
            raise ValueError("bad channel counts")
        if len(hidden) != 3 or any(h < 1 for h in hidden):
            raise ValueError("hidden must be three positive widths")
        if hidden[0] % 2:
            raise ValueError("first hidden width must be even (time embedding)")
        self.state_channels = state_channels
        self.cond_image_channels = cond_image_channels
        self.hidden = tuple(int(h) for h in hidden)
        # Conditioning width is pinned to the width of the layer the prompt
        # embedding is added to.
        self.cond_width = self.hidden[1]
        self.temb_dim = self.hidden[0]
        self.seed = seed

        cin = state_channels + cond_image_channels
        h1, h2, h3 = self.hidden
        rng = np.random.default_rng(seed)

        def layer(ci, co):
            a = 1.0 / np.sqrt(9.0 * ci)
            return (
                rng.uniform(-a, a, size=(3, 3, ci, co)),
                rng.uniform(-a, a, size=(co,)),
            )

        self.w1, self.b1 = layer(cin, h1)
        self.w2, self.b2 = layer(h1, h2)
        self.w3, self.b3 = layer(h2, h3)
        self.w4, self.b4 = layer(h3, state_channels)

    _PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")

    @property
    def dtype(self) -> np.dtype:
        return self.w1.dtype

    def cast(self, dtype) -> "ConvNet":
        """Convert parameters in place; training runs in float32 for speed."""
        for name in self._PARAM_NAMES:
            setattr(self, name, getattr(self, name).astype(dtype, copy=False))
        return self

    # -- parameter vector ---------------------------------------------------

    def _param_arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self._PARAM_NAMES]

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self._param_arrays())

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._param_arrays()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {flat.shape}")
        i = 0
        for a in self._param_arrays():
            a[...] = flat[i : i + a.size].reshape(a.shape)
            i += a.size

    # -- forward / backward -------------------------------------------------

    def _assemble_input(
        self, states: np.ndarray, cond_images: np.ndarray | None
    ) -> np.ndarray:
        if states.ndim != 4 or states.shape[3] != self.state_channels:
            raise ValueError(
                f"state batch must be (B, H, W, {self.state_channels}), "
                f"got {states.shape}"
            )
        if self.cond_image_channels == 0:
            if cond_images is not None:
                raise ValueError("model takes no conditioning image")
            return states
        if cond_images is None:
            raise ValueError("model requires a conditioning image")
        if cond_images.shape != states.shape[:3] + (self.cond_image_channels,):
            raise ValueError(
                f"conditioning image batch {cond_images.shape} does not match "
                f"state batch {states.shape}"
            )
        return np.concatenate([states, cond_images], axis=3)

    def forward(
        self,
        states: np.ndarray,
        timesteps: np.ndarray,
        cond_vecs: np.ndarray,
        cond_images: np.ndarray | None = None,
        want_cache: bool = False,
    ):
        """Predict noise for a batch; optionally return the backward cache."""
        x = self._assemble_input(states, cond_images)
        if cond_vecs.shape != (x.shape[0], self.cond_width):
            raise ValueError(
                f"cond vectors must be (B, {self.cond_width}), got {cond_vecs.shape}"
            )
        # Inference follows the parameter dtype; float64 inputs against a
        # float32-cast model would otherwise silently promote every matmul.
        x = x.astype(self.dtype, copy=False)
        temb = timestep_embedding(timesteps, self.temb_dim).astype(x.dtype, copy=False)
        cond_vecs = np.asarray(cond_vecs, dtype=x.dtype)
        h1 = _conv(x, self.w1) + self.b1 + temb[:, None, None, :]
        s1 = _sigmoid(h1)
        a1 = h1 * s1
        h2 = _conv(a1, self.w2) + self.b2 + cond_vecs[:, None, None, :]
        s2 = _sigmoid(h2)
        a2 = h2 * s2
        h3 = _conv(a2, self.w3) + self.b3
        s3 = _sigmoid(h3)
        a3 = h3 * s3
        out = _conv(a3, self.w4) + self.b4
        if not want_cache:
            return out
        cache = {
            "x": x, "h1": h1, "s1": s1, "a1": a1, "h2": h2, "s2": s2,
            "a2": a2, "h3": h3, "s3": s3, "a3": a3,
        }
        return out, cache

    def backward(
        self,
        cache: dict,
        dout: np.ndarray,
        need_state: bool = True,
        need_cond: bool = True,
        need_params: bool = False,
    ) -> dict:
        """Vector-Jacobian products of the forward pass.

        Returns a dict with any of ``grad_state`` (B, H, W, C),
        ``grad_cond`` (B, cond_width) and ``grad_params`` (flat vector,
        summed over the batch).
        """
        out: dict = {}

        def act_grad(key: str) -> np.ndarray:
            s = cache["s" + key]
            return s * (1.0 + cache["h" + key] * (1.0 - s))

        da3 = _conv_adjoint(dout, self.w4)
        if need_params:
            w4g = _conv_weight_grad(cache["a3"], dout)
            b4g = dout.sum(axis=(0, 1, 2))
        dh3 = da3 * act_grad("3")
        da2 = _conv_adjoint(dh3, self.w3)
        if need_params:
            w3g = _conv_weight_grad(cache["a2"], dh3)
            b3g = dh3.sum(axis=(0, 1, 2))
        dh2 = da2 * act_grad("2")
        if need_cond:
            out["grad_cond"] = dh2.sum(axis=(1, 2))
        da1 = _conv_adjoint(dh2, self.w2)
        if need_params:
            w2g = _conv_weight_grad(cache["a1"], dh2)
            b2g = dh2.sum(axis=(0, 1, 2))
        dh1 = da1 * act_grad("1")
        if need_params:
            w1g = _conv_weight_grad(cache["x"], dh1)
            b1g = dh1.sum(axis=(0, 1, 2))
            out["grad_params"] = np.concatenate(
                [g.ravel() for g in (w1g, b1g, w2g, b2g, w3g, b3g, w4g, b4g)]
            )
        if need_state:
            dx = _conv_adjoint(dh1, self.w1)
            out["grad_state"] = dx[..., : self.state_channels]
        return out
