"""Small numpy neural-network core with hand-written reverse-mode gradients.

Tensors are plain ``float64`` numpy arrays. Layers are immutable descriptors;
their parameters live in :class:`Param` objects so the same layer stack can be
evaluated with frozen weights from several call sites. A :class:`Tape`
records the forward caches of a training pass and replays them backwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DTYPE = np.float64
RNG_ALGORITHM = "numpy.PCG64"


class DimensionError(ValueError):
    """Input width does not match what a layer expects."""

    def __init__(self, layer_index: int, expected: int, got: int):
        super().__init__(
            f"layer {layer_index}: expected input width {expected}, got {got}"
        )
        self.layer_index = layer_index
        self.expected = expected
        self.got = got


class ValidationError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


@dataclass
class Param:
    value: np.ndarray
    frozen: bool = False
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0.0


class RngState:
    """Seeded pseudorandom source; same seed and call order give the same draws."""

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, *keys: int) -> "RngState":
        # child streams keyed by (seed, *keys); independent of parent draw order
        ss = np.random.SeedSequence([self.seed, *keys])
        return RngState(int(ss.generate_state(1, np.uint64)[0]))

    def random(self) -> float:
        return float(self.generator.random())

    def normal(self, size, scale=1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)


# --------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Affine:
    in_dim: int
    out_dim: int

    kind = "affine"

    @property
    def input_width(self):
        return self.in_dim

    @property
    def output_width(self):
        return self.out_dim

    def param_shapes(self):
        return [(self.in_dim, self.out_dim), (self.out_dim,)]

    def init_params(self, rng: RngState) -> list[Param]:
        # He fan-in scaling, zero bias
        w = rng.normal((self.in_dim, self.out_dim), scale=np.sqrt(2.0 / self.in_dim))
        return [Param(w), Param(np.zeros(self.out_dim))]

    def forward(self, params, x, train, rng):
        w, b = params
        return x @ w.value + b.value, x

    def backward(self, params, cache, dy, need_dx):
        w, b = params
        x = cache
        if not w.frozen:
            w.grad += x.T @ dy
        if not b.frozen:
            b.grad += dy.sum(axis=0)
        return dy @ w.value.T if need_dx else None

    def to_dict(self):
        return {"kind": self.kind, "in": self.in_dim, "out": self.out_dim}


@dataclass(frozen=True)
class Nonlinearity:
    kind_name: str = "relu"
    width: int | None = None

    kind = "nonlinearity"

    def __post_init__(self):
        if self.kind_name not in ("relu", "tanh"):
            raise ValidationError(f"unknown nonlinearity {self.kind_name!r}")

    @property
    def input_width(self):
        return self.width

    @property
    def output_width(self):
        return self.width

    def param_shapes(self):
        return []

    def init_params(self, rng):
        return []

    def forward(self, params, x, train, rng):
        if self.kind_name == "relu":
            y = np.maximum(x, 0.0)
        else:
            y = np.tanh(x)
        return y, y

    def backward(self, params, cache, dy, need_dx):
        y = cache
        if self.kind_name == "relu":
            return dy * (y > 0.0)
        return dy * (1.0 - y * y)

    def to_dict(self):
        return {"kind": self.kind, "fn": self.kind_name, "width": self.width}


@dataclass(frozen=True)
class FeatureNorm:
    """Per-sample normalisation over the feature axis with learned gain/bias.

    Statistics come from each row alone, so the output never depends on the
    batch composition (the vector analogue of instance normalisation).
    """

    dim: int
    eps: float = 1e-10

    kind = "featurenorm"

    @property
    def input_width(self):
        return self.dim

    @property
    def output_width(self):
        return self.dim

    def param_shapes(self):
        return [(self.dim,), (self.dim,)]

    def init_params(self, rng):
        return [Param(np.ones(self.dim)), Param(np.zeros(self.dim))]

    def normalize(self, x):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + self.eps)
        return xc * inv, inv

    def forward(self, params, x, train, rng):
        gain, bias = params
        xhat, inv = self.normalize(x)
        return xhat * gain.value + bias.value, (xhat, inv)

    def backward(self, params, cache, dy, need_dx):
        gain, bias = params
        xhat, inv = cache
        if not gain.frozen:
            gain.grad += (dy * xhat).sum(axis=0)
        if not bias.frozen:
            bias.grad += dy.sum(axis=0)
        if not need_dx:
            return None
        dxhat = dy * gain.value
        return inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim, "eps": self.eps}


@dataclass(frozen=True)
class ResidualBlock:
    """``x + g(x)`` with ``g = Affine -> FeatureNorm -> relu -> Affine``.

    In training the branch is kept with probability ``survival_prob`` (one
    draw per call, i.e. per batch); in evaluation it is scaled by that
    probability instead.
    """

    width: int
    survival_prob: float = 1.0

    kind = "residual"

    def __post_init__(self):
        if not 0.0 < self.survival_prob <= 1.0:
            raise ValidationError(
                f"survival_prob must be in (0, 1], got {self.survival_prob}"
            )

    @property
    def input_width(self):
        return self.width

    @property
    def output_width(self):
        return self.width

    @property
    def branch(self):
        w = self.width
        return (Affine(w, w), FeatureNorm(w), Nonlinearity("relu", w), Affine(w, w))

    def param_shapes(self):
        return [s for layer in self.branch for s in layer.param_shapes()]

    def init_params(self, rng):
        return [p for layer in self.branch for p in layer.init_params(rng)]

    def _split(self, params):
        out, i = [], 0
        for layer in self.branch:
            n = len(layer.param_shapes())
            out.append(params[i : i + n])
            i += n
        return out

    def forward(self, params, x, train, rng):
        if train:
            keep = rng.random() < self.survival_prob
            if not keep:
                return x, None
            scale = 1.0
        else:
            scale = self.survival_prob
        h = x
        caches = []
        for layer, ps in zip(self.branch, self._split(params)):
            h, c = layer.forward(ps, h, train, rng)
            caches.append(c)
        return x + scale * h, (scale, caches)

    def backward(self, params, cache, dy, need_dx):
        if cache is None:
            return dy
        scale, caches = cache
        g = scale * dy
        split = self._split(params)
        for layer, ps, c in reversed(list(zip(self.branch, split, caches))):
            g = layer.backward(ps, c, g, True)
        return dy + g

    def to_dict(self):
        return {"kind": self.kind, "width": self.width, "survival_prob": self.survival_prob}


def layer_from_dict(d: dict):
    kind = d["kind"]
    if kind == "affine":
        return Affine(int(d["in"]), int(d["out"]))
    if kind == "nonlinearity":
        return Nonlinearity(d["fn"], d.get("width"))
    if kind == "featurenorm":
        return FeatureNorm(int(d["dim"]), float(d.get("eps", 1e-10)))
    if kind == "residual":
        return ResidualBlock(int(d["width"]), float(d["survival_prob"]))
    raise ValidationError(f"unknown layer kind {kind!r}")


class LayerStack:
    """An ordered list of layer descriptors with chained widths."""

    def __init__(self, layers: Sequence):
        self.layers = tuple(layers)
        width = None
        for i, layer in enumerate(self.layers):
            if width is not None and layer.input_width is not None and layer.input_width != width:
                raise DimensionError(i, layer.input_width, width)
            if layer.output_width is not None:
                width = layer.output_width
        self._counts = [len(layer.param_shapes()) for layer in self.layers]

    def __len__(self):
        return len(self.layers)

    def __eq__(self, other):
        return isinstance(other, LayerStack) and self.layers == other.layers

    @property
    def input_width(self):
        for layer in self.layers:
            if layer.input_width is not None:
                return layer.input_width
        return None

    @property
    def output_width(self):
        for layer in reversed(self.layers):
            if layer.output_width is not None:
                return layer.output_width
        return None

    @property
    def n_params(self) -> int:
        return sum(self._counts)

    def param_shapes(self):
        return [s for layer in self.layers for s in layer.param_shapes()]

    def init_params(self, rng: RngState) -> list[Param]:
        return [p for layer in self.layers for p in layer.init_params(rng)]

    def split(self, params):
        if len(params) != self.n_params:
            raise ValidationError(
                f"stack needs {self.n_params} params, got {len(params)}"
            )
        out, i = [], 0
        for n in self._counts:
            out.append(params[i : i + n])
            i += n
        return out

    def to_list(self):
        return [layer.to_dict() for layer in self.layers]

    @classmethod
    def from_list(cls, items):
        return cls([layer_from_dict(d) for d in items])


class Tape:
    """Forward caches of a training pass, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.entries = []

    def record(self, layer, params, cache):
        self.entries.append((layer, params, cache))

    def backward(self, dout: np.ndarray, need_input_grad: bool = False):
        # stop as soon as nothing upstream is trainable
        trainable_upto = []
        seen = False
        for layer, params, _ in self.entries:
            seen = seen or any(not p.frozen for p in params)
            trainable_upto.append(seen)
        g = dout
        for i in range(len(self.entries) - 1, -1, -1):
            if not need_input_grad and not trainable_upto[i]:
                return None
            layer, params, cache = self.entries[i]
            need_dx = need_input_grad or (i > 0 and trainable_upto[i - 1])
            g = layer.backward(params, cache, g, need_dx)
        return g


def forward(stack: LayerStack, params, x, mode: str = "eval", rng: RngState | None = None,
            tape: Tape | None = None, layer_offset: int = 0) -> np.ndarray:
    """Run ``x`` through ``stack``.

    ``mode="train"`` enables stochastic depth and requires ``rng``. When a
    ``tape`` is given, caches are recorded for :meth:`Tape.backward`.
    ``layer_offset`` only shifts the layer index reported in dimension errors.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        raise ValidationError("train mode requires an rng")
    h = as_tensor(x)
    if h.ndim == 1:
        h = h[None, :]
    for i, (layer, ps) in enumerate(zip(stack.layers, stack.split(params))):
        if layer.input_width is not None and h.shape[1] != layer.input_width:
            raise DimensionError(layer_offset + i, layer.input_width, h.shape[1])
        h, cache = layer.forward(ps, h, train, rng)
        if tape is not None:
            tape.record(layer, ps, cache)
    return h


# --------------------------------------------------------------------------
# loss


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValidationError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"label out of range [0, {c})")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / n


# --------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float = 0.01):
        self.lr = lr

    def step(self, params):
        for p in params:
            if p.frozen:
                continue
            p.value -= self.lr * p.grad


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self, params):
        for p in params:
            if p.frozen:
                continue
            m, v, t = self.state.get(id(p), (np.zeros_like(p.value), np.zeros_like(p.value), 0))
            t += 1
            m = self.beta1 * m + (1 - self.beta1) * p.grad
            v = self.beta2 * v + (1 - self.beta2) * p.grad * p.grad
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.state[id(p)] = (m, v, t)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValidationError(f"unknown optimizer {kind!r}")


def optimizer_step(params, optimizer):
    optimizer.step(params)
