"""Small differentiable building blocks in float64 numpy.

Every layer works on row-major batches ``(batch, features)``; a 1-D input is
treated as a batch of one and returned 1-D. ``forward`` returns the output
together with an opaque cache, and ``backward`` consumes that cache, so one
layer can be applied several times per step (the state encoder runs once per
decision step) without clobbering earlier activations.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_EPS = 1e-7


class Parameter:
    """A named float64 array with a gradient accumulator of the same shape."""

    def __init__(self, value: np.ndarray, name: str = "") -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Module:
    """Base class: anything that owns parameters."""

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.parameters()]

    def load_state(self, values: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(values) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(values)}")
        for p, v in zip(params, values):
            if p.value.shape != np.shape(v):
                raise ValueError(f"shape mismatch for {p.name}: {p.value.shape} vs {np.shape(v)}")
            p.value[...] = v


def glorot_uniform(n_in: int, n_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


class Affine(Module):
    """``y = x W^T + b`` with ``W`` stored as (out, in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 name: str = "affine") -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in = n_in
        self.n_out = n_out
        self.name = name
        self.weight = Parameter(glorot_uniform(n_in, n_out, rng), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), f"{name}.bias")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(
                f"layer {self.name!r} expects input length {self.n_in}, got {x.shape[-1]}")
        return x @ self.weight.value.T + self.bias.value, x

    def backward(self, dy: np.ndarray, x: np.ndarray) -> np.ndarray:
        dy2 = np.atleast_2d(dy)
        x2 = np.atleast_2d(x)
        self.weight.grad += dy2.T @ x2
        self.bias.grad += dy2.sum(axis=0)
        return dy @ self.weight.value

    def flops(self) -> int:
        return 2 * self.n_in * self.n_out


def affine_forward(x: np.ndarray, layer: Affine) -> np.ndarray:
    return layer.forward(x)[0]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x: np.ndarray, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    return x * dropout_mask(np.shape(x), rate, rng)


class MLP(Module):
    """Stack of affine layers with ReLU between them.

    ``final_relu`` adds a ReLU after the last layer too (encoders, state
    encoder). ``dropout`` is applied after every hidden ReLU in training mode.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, *,
                 final_relu: bool = False, dropout: float = 0.0, name: str = "mlp") -> None:
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = tuple(int(s) for s in sizes)
        self.final_relu = final_relu
        self.dropout = dropout
        self.name = name
        self.layers = [Affine(a, b, rng, name=f"{name}.{i}")
                       for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:]))]

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, list]:
        cache = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x, c_aff = layer.forward(x)
            pre = x
            mask = None
            if i < last or self.final_relu:
                x = relu(x)
                if i < last and training and self.dropout > 0.0:
                    if rng is None:
                        raise ValueError("dropout in training mode needs an rng")
                    mask = dropout_mask(x.shape, self.dropout, rng)
                    x = x * mask
            cache.append((c_aff, pre, mask))
        return x, cache

    def backward(self, dy: np.ndarray, cache: list) -> np.ndarray:
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            c_aff, pre, mask = cache[i]
            if i < last or self.final_relu:
                if mask is not None:
                    dy = dy * mask
                dy = relu_backward(dy, pre)
            dy = self.layers[i].backward(dy, c_aff)
        return dy

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def flops(self) -> int:
        return sum(layer.flops() for layer in self.layers)


def softmax_tau(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis; ``-inf`` logits get probability 0."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_tau(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy over the last axis; zero-probability entries contribute 0."""
    p = np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def clamp_prob(p: np.ndarray | float) -> np.ndarray:
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def bce_loss(p_hat, y) -> np.ndarray:
    """Binary cross-entropy on clamped probabilities (elementwise)."""
    p = clamp_prob(np.asarray(p_hat, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce_from_logits(logits: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row BCE of a two-logit classifier and its gradient w.r.t. the logits.

    Returns ``(p_hat, loss, dloss/dlogits)``. Rows whose probability hits the
    clamp get zero gradient, matching the clamped forward value.
    """
    logits = np.atleast_2d(logits)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    p = softmax_tau(logits)[:, 1]
    loss = bce_loss(p, y)
    pc = clamp_prob(p)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    dp = np.where(inside, -(y / pc) + (1.0 - y) / (1.0 - pc), 0.0)
    # dp/dl1 = p(1-p), dp/dl0 = -p(1-p)
    s = dp * p * (1.0 - p)
    dlogits = np.stack([-s, s], axis=1)
    return p, loss, dlogits


class AdamW:
    """Decoupled weight-decay Adam over groups of parameters.

    ``groups`` is a sequence of ``(parameters, lr)`` pairs so components can
    train at different rates.
    """

    def __init__(self, groups: Iterable[tuple[Sequence[Parameter], float]], *,
                 weight_decay: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8) -> None:
        self.groups = [(list(ps), float(lr)) for ps, lr in groups]
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.value) for ps, _ in self.groups for p in ps}
        self.v = {id(p): np.zeros_like(p.value) for ps, _ in self.groups for p in ps}

    def parameters(self) -> list[Parameter]:
        return [p for ps, _ in self.groups for p in ps]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def step(self) -> None:
        for p in self.parameters():
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {p.name or 'parameter'}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for ps, lr in self.groups:
            for p in ps:
                m = self.m[id(p)]
                v = self.v[id(p)]
                p.value *= 1.0 - lr * self.weight_decay
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad * p.grad
                p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params: Sequence[Parameter], state: AdamW) -> None:
    """Functional alias: apply one step of ``state`` (which already tracks ``params``)."""
    known = {id(p) for p in state.parameters()}
    if any(id(p) not in known for p in params):
        raise ValueError("parameters are not registered with this optimizer")
    state.step()


def grad_check(loss_fn: Callable[[bool], float], params: Sequence[Parameter],
               eps: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(backward)`` must return the scalar loss; when ``backward`` is
    true it also accumulates analytic gradients into ``params``. The loss
    must be deterministic (dropout off). ``max_entries`` caps how many
    coordinates per parameter are probed (all of them when ``None``).
    """
    for p in params:
        p.zero_grad()
    loss_fn(True)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn(False)
            flat[i] = orig - eps
            lm = loss_fn(False)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(fd), 1e-8)
            worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
