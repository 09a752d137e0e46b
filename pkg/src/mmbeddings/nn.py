"""Dense feed-forward networks with hand-written reverse-mode gradients.

Everything here works on float64 numpy arrays. Parameters live in a
:class:`ParamSet`, which carries the gradient accumulator and the Adam
moment slots next to each value, so optimizers and checkpoints only need
to walk one container.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "sigmoid")


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    trainable: bool = True


class ParamSet:
    """Named float64 parameters with gradient and optimizer slots."""

    def __init__(self) -> None:
        self._entries: dict[str, Param] = {}
        # bumped on every in-place value change; forward caches record it
        self.version = 0

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self._entries[name] = Param(
            value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value), trainable
        )
        self.version += 1
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> Param:
        return self._entries[name]

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def names(self, trainable_only: bool = False, prefix: str | None = None) -> list[str]:
        return [
            n
            for n, p in self._entries.items()
            if (p.trainable or not trainable_only) and (prefix is None or n.startswith(prefix))
        ]

    def set(self, name: str, value) -> None:
        self._entries[name].value[...] = value
        self.version += 1

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad.fill(0.0)

    def count(self, names: Iterable[str] | None = None) -> int:
        names = self._entries if names is None else names
        return int(sum(self._entries[n].value.size for n in names))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._entries.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            self._entries[n].value[...] = v
        self.version += 1

    def reset_moments(self) -> None:
        for p in self._entries.values():
            p.m.fill(0.0)
            p.v.fill(0.0)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        widths = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(w) <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        acts = self.activations or ("relu",) * len(self.hidden) + ("identity",)
        if len(acts) != len(self.hidden) + 1:
            raise ValueError("need one activation per layer")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "activations", tuple(acts))

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def n_params(self) -> int:
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(self.n_layers))


@dataclass
class MlpCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    version: int = -1
    prefix: str = ""


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(spec: MlpSpec, params: ParamSet, rng: np.random.Generator, prefix: str = "") -> None:
    w = spec.widths
    for i in range(spec.n_layers):
        params.add(f"{prefix}{i}.W", glorot_uniform(w[i], w[i + 1], rng))
        params.add(f"{prefix}{i}.b", np.zeros(w[i + 1]))


def as_float(x) -> np.ndarray:
    """float64 array; complex input is kept complex (complex-step checks)."""
    x = np.asarray(x)
    return x if np.iscomplexobj(x) else x.astype(np.float64, copy=False)


def affine_forward(W: np.ndarray, b: np.ndarray, X: np.ndarray) -> np.ndarray:
    X = as_float(X)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0] or b.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"cannot apply weights {W.shape} / bias {np.shape(b)} to input {X.shape}"
        )
    return X @ W + b


def sigmoid(z):
    z = as_float(z)
    out = np.empty_like(z)
    pos = z.real >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation_forward(kind: str, Z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        if np.iscomplexobj(Z):
            return np.where(Z.real > 0, Z, 0.0)
        return np.maximum(Z, 0.0)
    if kind == "identity":
        return Z
    if kind == "sigmoid":
        return sigmoid(Z)
    raise ValueError(f"unknown activation {kind!r}")


def softplus(z):
    """log(1 + e^z) without overflow."""
    z = as_float(z)
    if not np.iscomplexobj(z):
        return np.logaddexp(0.0, z)
    pos = z.real > 0
    safe = np.where(pos, -z, z)
    return np.where(pos, z, 0.0) + np.log1p(np.exp(safe))


def activation_backward(kind: str, Z: np.ndarray, A: np.ndarray, dA: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dA * (Z > 0)
    if kind == "identity":
        return dA
    return dA * A * (1.0 - A)


def mlp_forward(
    spec: MlpSpec, params: ParamSet, X: np.ndarray, prefix: str = ""
) -> tuple[np.ndarray, MlpCache]:
    X = as_float(X)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"network expects input width {spec.input_dim}, got shape {X.shape}")
    cache = MlpCache(version=params.version, prefix=prefix)
    A = X
    for i, act in enumerate(spec.activations):
        Z = affine_forward(params[f"{prefix}{i}.W"], params[f"{prefix}{i}.b"], A)
        cache.inputs.append(A)
        cache.preacts.append(Z)
        A = activation_forward(act, Z)
        cache.outputs.append(A)
    return A, cache


def backward(
    spec: MlpSpec, params: ParamSet, cache: MlpCache | None, dout: np.ndarray
) -> np.ndarray:
    """Accumulate parameter gradients into ``params`` and return dLoss/dInput."""
    if cache is None or len(cache.inputs) != spec.n_layers:
        raise StaleCacheError("backward called without a matching forward cache")
    if cache.version != params.version:
        raise StaleCacheError("parameters changed since the forward pass")
    prefix = cache.prefix
    dA = np.asarray(dout, dtype=np.float64)
    for i in reversed(range(spec.n_layers)):
        dZ = activation_backward(spec.activations[i], cache.preacts[i], cache.outputs[i], dA)
        W = params[f"{prefix}{i}.W"]
        params.grad(f"{prefix}{i}.W")[...] += cache.inputs[i].T @ dZ
        params.grad(f"{prefix}{i}.b")[...] += dZ.sum(axis=0)
        dA = dZ @ W.T
    return dA


def _check_finite(params: ParamSet, names: Sequence[str]) -> None:
    for n in names:
        if not np.all(np.isfinite(params.grad(n))):
            raise NumericError(f"non-finite gradient in parameter {n!r}")


def adam_step(
    params: ParamSet,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
    names: Sequence[str] | None = None,
) -> None:
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    names = params.names(trainable_only=True) if names is None else list(names)
    _check_finite(params, names)
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for n in names:
        p = params.entry(n)
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        p.value -= lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + eps)
        g.fill(0.0)
    params.version += 1


def sgd_step(params: ParamSet, lr: float = 1e-2, names: Sequence[str] | None = None) -> None:
    names = params.names(trainable_only=True) if names is None else list(names)
    _check_finite(params, names)
    for n in names:
        p = params.entry(n)
        p.value -= lr * p.grad
        p.grad.fill(0.0)
    params.version += 1


class Adam:
    def __init__(self, params: ParamSet, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, names=None):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.names = params.names(trainable_only=True) if names is None else list(names)
        self.t = 0

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.t, self.names)


class SGD:
    def __init__(self, params: ParamSet, lr=1e-2, names=None):
        self.params = params
        self.lr = lr
        self.names = params.names(trainable_only=True) if names is None else list(names)

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.names)


def make_optimizer(kind: str, params: ParamSet, lr: float, names=None):
    if kind == "adam":
        return Adam(params, lr=lr, names=names)
    if kind == "sgd":
        return SGD(params, lr=lr, names=names)
    raise ValueError(f"unknown optimizer {kind!r}")


def grad_check(
    loss_fn: Callable[[ParamSet], float],
    params: ParamSet,
    step: float | None = None,
    names: Sequence[str] | None = None,
    method: str = "central",
    value_fn: Callable[[ParamSet], complex] | None = None,
) -> float:
    """Max relative error between analytic and numeric gradients.

    ``loss_fn`` must be deterministic and must write its analytic gradient
    into ``params`` (accumulating onto zeroed slots). The error per entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.

    ``method="central"`` uses ``(L(t+h) - L(t-h)) / 2h`` (default h=1e-5).
    ``method="complex"`` uses the complex step ``Im L(t+ih) / h`` (default
    h=1e-20): no subtractive cancellation, and the real part never crosses a
    ReLU kink. It needs ``value_fn``, a forward-only loss that propagates
    complex parameters.
    """
    if method not in ("central", "complex"):
        raise ValueError(f"unknown method {method!r}")
    if method == "complex" and value_fn is None:
        raise ValueError("complex-step checking needs a forward-only value_fn")
    if step is None:
        step = 1e-5 if method == "central" else 1e-20
    names = params.names(trainable_only=True) if names is None else list(names)
    params.zero_grad()
    loss_fn(params)
    analytic = {n: params.grad(n).copy() for n in names}
    params.zero_grad()
    worst = 0.0
    for n in names:
        entry = params.entry(n)
        ana = analytic[n].reshape(-1)
        if method == "complex":
            orig = entry.value
            entry.value = orig.astype(np.complex128)
            flat = entry.value.reshape(-1)
            try:
                for idx in range(flat.size):
                    flat[idx] += 1j * step
                    params.version += 1
                    num = float(np.imag(value_fn(params))) / step
                    flat[idx] = orig.reshape(-1)[idx]
                    denom = max(abs(ana[idx]), abs(num), 1e-12)
                    worst = max(worst, abs(ana[idx] - num) / denom)
            finally:
                entry.value = orig
                params.version += 1
            continue
        flat = entry.value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            params.version += 1
            up = loss_fn(params)
            flat[idx] = orig - step
            params.version += 1
            down = loss_fn(params)
            flat[idx] = orig
            params.version += 1
            num = (up - down) / (2.0 * step)
            denom = max(abs(ana[idx]), abs(num), 1e-12)
            worst = max(worst, abs(ana[idx] - num) / denom)
    params.zero_grad()
    return worst
