"""Capsule network: conv backbone, primary capsules, routed class capsules.

Pipeline for one image ``[C, H, W]``::

    conv1 (k x k, stride 1) + ReLU
    primary conv (k x k, stride 2) -> types * dim channels -> capsules -> squash
    votes u_hat[i, j] = W[i, j] @ u[i]
    routing (dynamic or self) -> class vectors v_j;  score_j = ||v_j||

Everything runs batched over a leading ``N`` axis.  ``backward`` is the exact
gradient of the summed margin loss, unrolled through every routing iteration.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidArgument
from .routing import RoutingSpec, dynamic_routing, routing_backward, self_routing, \
    self_routing_backward
from .squash import SquashSpec, squash, squash_backward
from .tensor import (conv2d_backward, conv2d_cols, conv_output_size, matvec_votes,
                     matvec_votes_backward, relu, relu_backward)

M_PLUS = 0.9
M_MINUS = 0.1
LAMBDA_ABSENT = 0.5


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 1
    image_size: int = 28
    conv1_filters: int = 256
    conv1_kernel: int = 9
    primary_types: int = 32
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    n_classes: int = 10
    class_dim: int = 16
    routing: RoutingSpec = field(default_factory=RoutingSpec)

    @property
    def conv1_size(self) -> int:
        return conv_output_size(self.image_size, self.conv1_kernel, 1)

    @property
    def primary_size(self) -> int:
        return conv_output_size(self.conv1_size, self.primary_kernel, self.primary_stride)

    @property
    def n_primary(self) -> int:
        return self.primary_types * self.primary_size ** 2

    @property
    def primary_squash(self) -> SquashSpec:
        # the kl squash only exists inside routing; primary capsules fall back to S_2
        sq = self.routing.squash
        return SquashSpec.norm(2) if sq.variant == "kl" else sq

    def validate(self) -> "Architecture":
        if self.conv1_size < self.primary_kernel or self.conv1_size < 1:
            raise ConfigError(f"image size {self.image_size} too small for the kernels")
        for name in ("in_channels", "conv1_filters", "primary_types", "primary_dim",
                     "n_classes", "class_dim", "primary_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self

    def with_routing(self, routing: RoutingSpec) -> "Architecture":
        return dataclasses.replace(self, routing=routing)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["routing"] = {"method": self.routing.method, "iterations": self.routing.iterations,
                        "squash": self.routing.squash.name}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        r = d.pop("routing")
        routing = RoutingSpec(r["method"], r["iterations"], SquashSpec.parse(r["squash"]))
        return cls(routing=routing, **d)


PRESETS = {
    "full": dict(conv1_filters=256, primary_types=32),
    "reduced": dict(conv1_filters=64, primary_types=8),
    # gradient-check scale: 4x4 image, 2 primary capsules of dim 2, 2 classes of dim 2
    "tiny": dict(image_size=4, conv1_filters=3, conv1_kernel=2, primary_types=2,
                 primary_dim=2, primary_kernel=3, primary_stride=1, n_classes=2, class_dim=2),
}


def preset(name: str, routing: RoutingSpec = RoutingSpec(), dataset: str = "mnist",
           **overrides) -> Architecture:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if not isinstance(routing, RoutingSpec):
        raise ConfigError(f"routing must be a RoutingSpec, got {type(routing).__name__}")
    kw = dict(PRESETS[name])
    if dataset == "cifar10" and name != "tiny":
        kw.update(in_channels=3, image_size=32)
    kw.update(overrides)
    return Architecture(routing=routing, **kw).validate()


PARAM_NAMES = ("conv1_kernels", "conv1_bias", "primary_kernels", "primary_bias", "W", "W_route")


@dataclass
class CapsNetParams:
    """Learnable weights.  ``W`` doubles as the pose matrices under self routing."""

    conv1_kernels: np.ndarray
    conv1_bias: np.ndarray
    primary_kernels: np.ndarray
    primary_bias: np.ndarray
    W: np.ndarray
    W_route: np.ndarray | None = None

    @property
    def W_pose(self) -> np.ndarray:
        return self.W

    def items(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if value is not None:
                yield name, value

    def copy(self) -> "CapsNetParams":
        return CapsNetParams(**{k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "CapsNetParams":
        return CapsNetParams(**{k: np.zeros_like(v) for k, v in self.items()})

    def add_(self, other: "CapsNetParams") -> "CapsNetParams":
        for name, value in self.items():
            value += getattr(other, name)
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for _, v in self.items()])

    def check(self, arch: Architecture) -> None:
        expected = param_shapes(arch)
        for name, value in self.items():
            if name not in expected:
                raise ConfigError(f"{name} is not used by {arch.routing.method} routing")
            if value.shape != expected[name]:
                raise ConfigError(f"{name} has shape {value.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(value)):
                raise ConfigError(f"{name} contains non-finite values")
        missing = set(expected) - {k for k, _ in self.items()}
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")


def param_shapes(arch: Architecture) -> dict:
    k1, k2 = arch.conv1_kernel, arch.primary_kernel
    shapes = {
        "conv1_kernels": (arch.conv1_filters, arch.in_channels, k1, k1),
        "conv1_bias": (arch.conv1_filters,),
        "primary_kernels": (arch.primary_types * arch.primary_dim, arch.conv1_filters, k2, k2),
        "primary_bias": (arch.primary_types * arch.primary_dim,),
        "W": (arch.n_primary, arch.n_classes, arch.class_dim, arch.primary_dim),
    }
    if arch.routing.method == "self":
        shapes["W_route"] = (arch.n_primary, arch.primary_dim, arch.n_classes)
    return shapes


def _fans(name, shape):
    if name.endswith("kernels"):
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    if name == "W":
        return shape[3], shape[2]
    return shape[1], shape[2]          # W_route [Nin, din, Nout]


def init_params(arch: Architecture, seed=0) -> CapsNetParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith("bias"):
            out[name] = np.zeros(shape)
            continue
        fan_in, fan_out = _fans(name, shape)
        a = np.sqrt(6.0 / (fan_in + fan_out))
        out[name] = rng.uniform(-a, a, size=shape)
    return CapsNetParams(**out)


# ---------------------------------------------------------------------------
# margin loss

def margin_loss(scores, labels):
    """Per-sample margin loss.  ``scores`` is ``[Nclass]`` or ``[N, Nclass]``."""
    scores = np.asarray(scores, dtype=np.float64)
    single = scores.ndim == 1
    sc = scores[None] if single else scores
    lab = np.atleast_1d(np.asarray(labels))
    T = _one_hot(lab, sc.shape[-1])
    present = np.maximum(0.0, M_PLUS - sc) ** 2
    absent = np.maximum(0.0, sc - M_MINUS) ** 2
    loss = np.sum(T * present + LAMBDA_ABSENT * (1.0 - T) * absent, axis=-1)
    return float(loss[0]) if single else loss


def margin_loss_grad(scores, labels):
    sc = np.asarray(scores, dtype=np.float64)
    T = _one_hot(np.atleast_1d(np.asarray(labels)), sc.shape[-1]).reshape(sc.shape)
    return (-2.0 * T * np.maximum(0.0, M_PLUS - sc)
            + 2.0 * LAMBDA_ABSENT * (1.0 - T) * np.maximum(0.0, sc - M_MINUS))


def _one_hot(labels, n_classes):
    labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise InvalidArgument(f"labels must lie in [0, {n_classes}), got {labels}")
    T = np.zeros((labels.size, n_classes))
    T[np.arange(labels.size), labels] = 1.0
    return T


# ---------------------------------------------------------------------------
# forward / backward

def primary_caps(features, kernels, bias, arch: Architecture):
    """Primary capsules ``[N, Nin, din]`` from conv1 features ``[N, F, H, W]``."""
    return _primary_caps(features, kernels, bias, arch)[0]


def _primary_caps(features, kernels, bias, arch):
    conv, cols = conv2d_cols(features, kernels, bias, arch.primary_stride)
    pre = _to_capsules(conv, arch)
    return squash(pre, arch.primary_squash), pre, cols


def _to_capsules(conv, arch):
    n, _, h, w = conv.shape
    t, d = arch.primary_types, arch.primary_dim
    return conv.reshape(n, t, d, h, w).transpose(0, 1, 3, 4, 2).reshape(n, t * h * w, d)


def _from_capsules(caps, arch):
    n = caps.shape[0]
    t, d, h = arch.primary_types, arch.primary_dim, arch.primary_size
    return caps.reshape(n, t, h, h, d).transpose(0, 1, 4, 2, 3).reshape(n, t * d, h, h)


@dataclass
class ForwardResult:
    class_vectors: np.ndarray      # [N, Nclass, dout]
    class_scores: np.ndarray       # [N, Nclass]
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.class_scores, axis=-1)


def _vote_scale(W):
    return 1.0 / np.sqrt(np.sum(W * W, axis=(2, 3)))


def forward(images, params: CapsNetParams, arch: Architecture) -> ForwardResult:
    """Class capsule vectors and scores for a batch ``[N, C, H, W]``."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    want = (arch.in_channels, arch.image_size, arch.image_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ConfigError(f"images of shape {x.shape[1:]} do not fit the architecture {want}")
    routing = arch.routing
    h1, cols1 = conv2d_cols(x, params.conv1_kernels, params.conv1_bias, 1)
    a1 = relu(h1)
    u, pre, cols2 = _primary_caps(a1, params.primary_kernels, params.primary_bias, arch)
    scale = _vote_scale(params.W) if routing.squash.variant == "kl" else None
    if routing.method == "dynamic":
        u_hat = matvec_votes(params.W, u)
        rout = dynamic_routing(u_hat, routing.iterations, routing.squash, scale)
    else:
        rout = self_routing(u, params.W_route, params.W, routing.squash, scale)
    v = rout.v
    scores = np.sqrt(np.sum(v * v, axis=-1))
    cache = dict(x=x, h1=h1, a1=a1, u=u, pre=pre, routing=rout, scale=scale,
                 cols1=cols1, cols2=cols2)
    return ForwardResult(v, scores, cache)


def backward(result: ForwardResult, labels, params: CapsNetParams, arch: Architecture):
    """Gradient of the summed margin loss w.r.t. every parameter."""
    c = result.cache
    v, scores = result.class_vectors, result.class_scores
    g_scores = margin_loss_grad(scores, labels)
    safe = np.where(scores < 1e-12, 1.0, scores)
    g_v = np.where((scores < 1e-12)[..., None], 0.0, (g_scores / safe)[..., None] * v)

    grads = params.zeros_like()
    rout = c["routing"]
    if arch.routing.method == "dynamic":
        g_uhat, g_scale = routing_backward(rout, g_v)
        grads.W, g_u = matvec_votes_backward(g_uhat, params.W, c["u"])
    else:
        g_u, grads.W_route, grads.W, g_scale = self_routing_backward(
            rout, g_v, params.W_route, params.W)
    if g_scale is not None:
        # scale_ij = 1 / ||W_ij||_F
        sc = c["scale"]
        grads.W += (-g_scale * sc ** 3)[..., None, None] * params.W

    g_pre = squash_backward(c["pre"], arch.primary_squash, g_u)
    g_conv = _from_capsules(g_pre, arch)
    g_a1, grads.primary_kernels, grads.primary_bias = conv2d_backward(
        g_conv, c["a1"], params.primary_kernels, arch.primary_stride, cols=c["cols2"])
    g_h1 = relu_backward(g_a1, c["h1"])
    _, grads.conv1_kernels, grads.conv1_bias = conv2d_backward(
        g_h1, c["x"], params.conv1_kernels, 1, input_grad=False, cols=c["cols1"])
    return grads


def loss_and_grad(params: CapsNetParams, arch: Architecture, images, labels):
    """``(summed loss, per-sample losses, grads, predictions)`` for one batch."""
    res = forward(images, params, arch)
    losses = margin_loss(res.class_scores, labels)
    grads = backward(res, labels, params, arch)
    return float(np.sum(losses)), losses, grads, res.predictions


class CapsNet:
    """Convenience wrapper pairing an architecture with its parameters."""

    def __init__(self, arch: Architecture, params: CapsNetParams | None = None, seed=0):
        self.arch = arch.validate()
        self.params = params if params is not None else init_params(arch, seed)
        self.params.check(self.arch)

    def __call__(self, images) -> ForwardResult:
        return forward(images, self.params, self.arch)

    def predict(self, images) -> np.ndarray:
        return self(images).predictions

    def loss_and_grad(self, images, labels):
        return loss_and_grad(self.params, self.arch, images, labels)
