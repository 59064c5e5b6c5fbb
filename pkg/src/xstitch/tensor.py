"""Dense numeric primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in float64.  Every differentiable
primitive comes as a ``*_forward`` / ``*_backward`` pair (or a forward that
returns what its backward needs); modules that own a forward graph compose
these by hand.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

DTYPE = np.float64
MASK_FILL = -1e9

_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------- random


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    """xoshiro256** seeded through splitmix64.

    Pure integer arithmetic, so a given seed yields the same stream on every
    platform.  Floats use the top 53 bits; normals use Box-Muller.
    """

    def __init__(self, seed: int):
        sm = int(seed) & _MASK64
        s = []
        for _ in range(4):
            sm, z = _splitmix64(sm)
            s.append(z)
        self.s = s
        self._spare: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        x = (s1 * 5) & _MASK64
        result = ((((x << 7) | (x >> 57)) & _MASK64) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError(f"randint needs n > 0, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = self.random()
        while u1 <= 0.0:
            u1 = self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        out = np.empty(n, dtype=DTYPE)
        rnd = self.random
        for i in range(n):
            out[i] = rnd()
        return out.reshape(shape)

    def normal_array(self, shape, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        out = np.empty(n, dtype=DTYPE)
        nrm = self.normal
        for i in range(n):
            out[i] = nrm()
        return (out * std).reshape(shape)

    def shuffle(self, items: list) -> None:
        """Fisher-Yates, in place."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def spawn(self) -> "Rng":
        """Independent child stream derived from this one."""
        return Rng(self.next_u64())


# ---------------------------------------------------------------- params


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")


class ParamStore:
    """Ordered name -> Param map.  Insertion order is the canonical order."""

    def __init__(self):
        self._entries: OrderedDict[str, Param] = OrderedDict()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._entries[name] = Param(value, trainable=trainable)
        return self._entries[name].value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def param(self, name: str) -> Param:
        return self._entries[name]

    def items(self):
        return self._entries.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._entries if n.startswith(prefix)]

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def accumulate(self, name: str, g: np.ndarray) -> None:
        self._entries[name].grad += g

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0.0

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for n, p in self._entries.items():
            if n.startswith(prefix):
                p.trainable = flag

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, p in self._entries.items():
            out._entries[n] = Param(p.value.copy(), p.grad.copy(), p.trainable)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.value for n, p in self._entries.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            if n not in self._entries:
                raise KeyError(f"unknown parameter {n!r}")
            if v.shape != self._entries[n].value.shape:
                raise DimensionError(
                    f"{n}: shape {tuple(v.shape)} does not match {self._entries[n].value.shape}")
            self._entries[n].value[...] = v


# ---------------------------------------------------------------- primitives


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product; leading axes of a 3-D+ operand are treated as a batch."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through softmax given its output y."""
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def layer_norm_forward(x, gamma, beta, eps: float = 1e-5):
    if x.shape[-1] != gamma.shape[-1]:
        raise DimensionError(f"layer_norm width {x.shape[-1]} != gamma width {gamma.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    return layer_norm_forward(np.asarray(x, dtype=DTYPE), gamma, beta, eps)[0]


def layer_norm_backward(cache, dy):
    """Returns (dx, dgamma, dbeta); parameter grads are summed over leading axes."""
    xhat, rstd, gamma = cache
    d = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = (rstd / d) * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                       - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def linear_forward(x, w, b):
    return x @ w + b


def linear_backward(x, w, dy):
    """Returns (dx, dw, db) for y = x @ w + b with any number of leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {name}")


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool
    coords_checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]

    def lines(self) -> list[str]:
        return [f"{'ok  ' if e.passed else 'FAIL'} {e.name:40s} rel={e.max_rel_error:.3e}"
                for e in self.entries]


def grad_check(loss_and_grad: Callable[[ParamStore], float], loss_fn: Callable[[ParamStore], float],
               params: ParamStore, step: float = 1e-5, tol: float = 1e-4,
               coords: int = 16, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_and_grad(params)`` must zero and populate ``params`` grads and return
    the loss; ``loss_fn(params)`` returns the loss only.  At most ``coords``
    randomly chosen coordinates per trainable tensor are perturbed (all of them
    when the tensor is smaller).
    """
    params.zero_grad()
    loss0 = loss_and_grad(params)
    if not math.isfinite(loss0):
        raise NonFiniteError("loss is non-finite at the unperturbed point")
    analytic = {n: p.grad.copy() for n, p in params.items()}
    rng = Rng(seed)
    entries = []
    for name, p in params.items():
        if not p.trainable:
            continue
        flat = p.value.reshape(-1)
        n = flat.size
        if n <= coords:
            idx = list(range(n))
        else:
            idx = rng.permutation(n)[:coords]
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn(params)
            flat[i] = orig - step
            lm = loss_fn(params)
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{i}]")
            fd = (lp - lm) / (2 * step)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
        entries.append(GradCheckEntry(name, worst, worst <= tol, len(idx)))
    return GradCheckReport(entries, tol)
