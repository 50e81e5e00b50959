"""Noise-prediction models: analytic oracles and the trainable conv net.

Three kinds share one calling convention:

* ``delta-oracle`` — exact noise predictor for a point-mass data
  distribution. Holds one or more anchor images; with several anchors the
  one whose stored embedding is nearest to the conditioning embedding is
  used, which makes the oracle conditioning-selected while each branch stays
  analytically exact.
* ``gaussian-oracle`` — exact posterior-mean predictor for an isotropic
  Gaussian prior N(mu, sigma^2 I) over clean images.
* ``conv-net`` — the trainable model from :mod:`cascade_inversion.convnet`.

All models expose noise prediction plus reverse-mode products with respect
to the input state and the conditioning embedding; the conv net additionally
provides parameter gradients for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import DEFAULT_COND_WIDTH, NullEmbedding, PromptEmbedding
from .convnet import ConvNet
from .diffusion import NoiseSchedule

_ONE_MINUS_AB_FLOOR = 1e-12


@dataclass
class DenoiserInput:
    """One model evaluation point.

    ``cond_image`` (super-resolution stages) must already be upsampled to the
    state's resolution.
    """

    state: np.ndarray
    timestep: int
    cond_embedding: PromptEmbedding | NullEmbedding
    cond_image: np.ndarray | None = None


@dataclass
class VjpResult:
    output: np.ndarray
    grad_wrt_state: np.ndarray
    grad_wrt_cond_embedding: np.ndarray


@dataclass
class LinearizedEps:
    """Prediction plus a reusable reverse-mode closure at the same point.

    ``vjp(upstream)`` returns ``(grad_wrt_state, grad_wrt_cond_embedding)``.
    Lets optimization loops form the upstream vector after seeing the output
    without paying for a second forward pass.
    """

    output: np.ndarray
    vjp: object


def _check_input(model, inp: DenoiserInput) -> None:
    st = inp.state
    if st.ndim != 3:
        raise ValueError(f"state must be (H, W, C), got shape {st.shape}")
    vec = inp.cond_embedding.vector
    if vec.shape != (model.cond_width,):
        raise ValueError(
            f"conditioning embedding has width {vec.shape}, "
            f"model declares {model.cond_width}"
        )
    if inp.timestep < 0:
        raise ValueError("model evaluations require a real timestep (>= 0)")
    if inp.cond_image is not None and inp.cond_image.shape[:2] != st.shape[:2]:
        raise ValueError(
            f"cond_image {inp.cond_image.shape} not at state resolution {st.shape}"
        )


class DeltaOracle:
    """Exact predictor when clean data is a point mass at an anchor image."""

    kind = "delta-oracle"

    def __init__(
        self,
        schedule: NoiseSchedule,
        anchors: np.ndarray,
        anchor_embeddings: np.ndarray | None = None,
        cond_width: int = DEFAULT_COND_WIDTH,
    ):
        anchors = np.asarray(anchors, dtype=np.float64)
        if anchors.ndim == 3:
            anchors = anchors[None]
        if anchors.ndim != 4:
            raise ValueError("anchors must be (H, W, C) or (M, H, W, C)")
        if anchor_embeddings is not None:
            anchor_embeddings = np.asarray(anchor_embeddings, dtype=np.float64)
            if anchor_embeddings.shape != (anchors.shape[0], cond_width):
                raise ValueError("anchor_embeddings must be (M, cond_width)")
        elif anchors.shape[0] != 1:
            raise ValueError("multiple anchors require anchor_embeddings")
        self.schedule = schedule
        self.anchors = anchors
        self.anchor_embeddings = anchor_embeddings
        self.cond_width = cond_width

    def _select_anchor(self, vec: np.ndarray) -> np.ndarray:
        if self.anchor_embeddings is None:
            return self.anchors[0]
        d = np.sum((self.anchor_embeddings - vec[None, :]) ** 2, axis=1)
        return self.anchors[int(np.argmin(d))]

    def _ab(self, t: int) -> tuple[float, float]:
        ab = self.schedule.alpha_bar(t)
        if 1.0 - ab < _ONE_MINUS_AB_FLOOR:
            raise ValueError(f"timestep {t} carries no noise; eps undefined")
        return ab, 1.0 - ab

    def predict(self, inp: DenoiserInput) -> np.ndarray:
        _check_input(self, inp)
        anchor = self._select_anchor(inp.cond_embedding.vector)
        if inp.state.shape != anchor.shape:
            raise ValueError(
                f"state {inp.state.shape} does not match anchor {anchor.shape}"
            )
        ab, rem = self._ab(inp.timestep)
        return (inp.state - np.sqrt(ab) * anchor) / np.sqrt(rem)

    def predict_vjp(self, inp: DenoiserInput, upstream: np.ndarray) -> VjpResult:
        out = self.predict(inp)
        _, rem = self._ab(inp.timestep)
        return VjpResult(
            output=out,
            grad_wrt_state=upstream / np.sqrt(rem),
            grad_wrt_cond_embedding=np.zeros(self.cond_width),
        )

    def predict_linearize(self, inp: DenoiserInput) -> LinearizedEps:
        out = self.predict(inp)
        _, rem = self._ab(inp.timestep)
        scale = 1.0 / np.sqrt(rem)
        zeros = np.zeros(self.cond_width)
        return LinearizedEps(out, lambda u: (u * scale, zeros))

    def param_grad(self, inp: DenoiserInput, upstream: np.ndarray) -> np.ndarray:
        return np.zeros(0)


class GaussianOracle:
    """Exact predictor for a Gaussian prior N(mu, sigma^2 I) over clean images.

    The implied clean-image estimate is the closed-form posterior mean
    ``(sigma^2 sqrt(ab) z + (1 - ab) mu) / (ab sigma^2 + 1 - ab)``.
    """

    kind = "gaussian-oracle"

    def __init__(
        self,
        schedule: NoiseSchedule,
        mu: np.ndarray,
        sigma: float,
        cond_width: int = DEFAULT_COND_WIDTH,
    ):
        mu = np.asarray(mu, dtype=np.float64)
        if mu.ndim != 3:
            raise ValueError("mu must be (H, W, C)")
        if sigma <= 0.0:
            raise ValueError("sigma must be positive")
        self.schedule = schedule
        self.mu = mu
        self.sigma = float(sigma)
        self.cond_width = cond_width

    def predict(self, inp: DenoiserInput) -> np.ndarray:
        _check_input(self, inp)
        if inp.state.shape != self.mu.shape:
            raise ValueError(f"state {inp.state.shape} does not match mu {self.mu.shape}")
        ab = self.schedule.alpha_bar(inp.timestep)
        rem = 1.0 - ab
        if rem < _ONE_MINUS_AB_FLOOR:
            raise ValueError(f"timestep {inp.timestep} carries no noise; eps undefined")
        denom = ab * self.sigma**2 + rem
        x0_hat = (self.sigma**2 * np.sqrt(ab) * inp.state + rem * self.mu) / denom
        return (inp.state - np.sqrt(ab) * x0_hat) / np.sqrt(rem)

    def predict_vjp(self, inp: DenoiserInput, upstream: np.ndarray) -> VjpResult:
        out = self.predict(inp)
        ab = self.schedule.alpha_bar(inp.timestep)
        rem = 1.0 - ab
        denom = ab * self.sigma**2 + rem
        # d eps / d z is the scalar sqrt(1 - ab) / denom.
        return VjpResult(
            output=out,
            grad_wrt_state=upstream * (np.sqrt(rem) / denom),
            grad_wrt_cond_embedding=np.zeros(self.cond_width),
        )

    def predict_linearize(self, inp: DenoiserInput) -> LinearizedEps:
        out = self.predict(inp)
        ab = self.schedule.alpha_bar(inp.timestep)
        rem = 1.0 - ab
        scale = np.sqrt(rem) / (ab * self.sigma**2 + rem)
        zeros = np.zeros(self.cond_width)
        return LinearizedEps(out, lambda u: (u * scale, zeros))

    def param_grad(self, inp: DenoiserInput, upstream: np.ndarray) -> np.ndarray:
        return np.zeros(0)


class ConvNetDenoiser:
    """Trainable conv-net noise predictor (see :mod:`cascade_inversion.convnet`)."""

    kind = "conv-net"

    def __init__(self, net: ConvNet):
        self.net = net

    @classmethod
    def create(
        cls,
        state_channels: int,
        cond_image_channels: int = 0,
        hidden: tuple[int, int, int] = (16, 32, 32),
        seed: int = 0,
    ) -> "ConvNetDenoiser":
        return cls(ConvNet(state_channels, cond_image_channels, hidden, seed))

    @property
    def cond_width(self) -> int:
        return self.net.cond_width

    def _unpack(self, inp: DenoiserInput):
        _check_input(self, inp)
        states = inp.state[None]
        conds = inp.cond_embedding.vector[None]
        imgs = None if inp.cond_image is None else inp.cond_image[None]
        ts = np.array([inp.timestep])
        return states, ts, conds, imgs

    def predict(self, inp: DenoiserInput) -> np.ndarray:
        states, ts, conds, imgs = self._unpack(inp)
        return self.net.forward(states, ts, conds, imgs)[0]

    def predict_vjp(self, inp: DenoiserInput, upstream: np.ndarray) -> VjpResult:
        states, ts, conds, imgs = self._unpack(inp)
        out, cache = self.net.forward(states, ts, conds, imgs, want_cache=True)
        grads = self.net.backward(cache, upstream[None])
        return VjpResult(
            output=out[0],
            grad_wrt_state=grads["grad_state"][0],
            grad_wrt_cond_embedding=grads["grad_cond"][0],
        )

    def predict_linearize(self, inp: DenoiserInput) -> LinearizedEps:
        states, ts, conds, imgs = self._unpack(inp)
        out, cache = self.net.forward(states, ts, conds, imgs, want_cache=True)

        def vjp(upstream: np.ndarray):
            grads = self.net.backward(cache, upstream[None])
            return grads["grad_state"][0], grads["grad_cond"][0]

        return LinearizedEps(out[0], vjp)

    def param_grad(self, inp: DenoiserInput, upstream: np.ndarray) -> np.ndarray:
        states, ts, conds, imgs = self._unpack(inp)
        _, cache = self.net.forward(states, ts, conds, imgs, want_cache=True)
        grads = self.net.backward(
            cache, upstream[None], need_state=False, need_cond=False, need_params=True
        )
        return grads["grad_params"]


DenoiserModel = DeltaOracle | GaussianOracle | ConvNetDenoiser


def predict_eps(model: DenoiserModel, inp: DenoiserInput) -> np.ndarray:
    """Noise prediction, same shape as ``inp.state``."""
    return model.predict(inp)


def predict_eps_with_vjp(
    model: DenoiserModel, inp: DenoiserInput, upstream: np.ndarray
) -> VjpResult:
    """Prediction plus reverse-mode products against ``upstream``."""
    if upstream.shape != inp.state.shape:
        raise ValueError(
            f"upstream {upstream.shape} does not match state {inp.state.shape}"
        )
    return model.predict_vjp(inp, upstream)


def train_vjp(
    model: DenoiserModel, inp: DenoiserInput, upstream: np.ndarray
) -> np.ndarray:
    """Gradient with respect to the flat parameter vector (empty for oracles)."""
    if upstream.shape != inp.state.shape:
        raise ValueError(
            f"upstream {upstream.shape} does not match state {inp.state.shape}"
        )
    return model.param_grad(inp, upstream)
