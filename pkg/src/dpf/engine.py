"""Reverse-mode differentiation substrate.

Tensors are ``torch`` float64 tensors; the autograd graph torch records is the
tape.  This module adds the pieces the filters need on top of it: a named
parameter store, checked primitives, single-use backward, finite-difference
gradient checks, SGD/Adam, small MLPs, conditional affine-coupling flows and
reparameterised Gaussian sampling.
"""

from __future__ import annotations

import builtins
import math
import weakref
from collections.abc import Callable, Iterator, Sequence

import numpy as np
import torch

DTYPE = torch.float64
LOG_SCALE_CLAMP = 7.0

torch.set_default_dtype(DTYPE)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    """A primitive was evaluated outside its domain (log of negative, ...)."""


class TapeError(RuntimeError):
    pass


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return g


_MASK64 = 0xFFFF_FFFF_FFFF_FFFF


def derive_seed(master: int, *path: int) -> int:
    """Splitmix64 derivation of a child seed from ``master`` and an index path."""
    z = int(master) & _MASK64
    for p in path:
        z = (z + 0x9E3779B97F4A7C15 * (int(p) + 1)) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
    return z & 0x7FFF_FFFF_FFFF_FFFF


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def _check_domain(x: torch.Tensor, ok: torch.Tensor, what: str) -> None:
    if not bool(ok.all()):
        raise DomainError(f"{what} outside domain")


def add(a, b):
    return a + b


def sub(a, b):
    return a - b


def mul(a, b):
    return a * b


def div(a, b):
    b = as_tensor(b) if not torch.is_tensor(b) else b
    _check_domain(b, b != 0, "division by zero:")
    return a / b


def neg(a):
    return -a


def matmul(a, b):
    if a.shape[-1] != b.shape[0 if b.dim() == 1 else -2]:
        raise ShapeError(f"matmul inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def exp(a):
    return torch.exp(a)


def log(a):
    _check_domain(a, a >= 0, "log of negative input:")
    return torch.log(a)


def sqrt(a):
    _check_domain(a, a >= 0, "sqrt of negative input:")
    return torch.sqrt(a)


def tanh(a):
    return torch.tanh(a)


def relu(a):
    return torch.relu(a)


def square(a):
    return a * a


def sum(a, dim=None):  # noqa: A001
    return a.sum() if dim is None else a.sum(dim)


def mean(a, dim=None):
    return a.mean() if dim is None else a.mean(dim)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1):
    return torch.cat(list(tensors), dim=dim)


def gather(a, index, dim: int = 0):
    return torch.index_select(a, dim, torch.as_tensor(index, dtype=torch.long))


def log_softmax(a, dim: int = -1):
    return torch.log_softmax(a, dim=dim)


def logsumexp(a, dim: int = -1):
    return torch.logsumexp(a, dim=dim)


def stop_gradient(a):
    """Same value, no adjoint flow."""
    return a.detach()


ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "identity": lambda x: x,
}


# --------------------------------------------------------------------------
# parameters, backward, gradient checks
# --------------------------------------------------------------------------


class ParamStore:
    """Named collection of leaf tensors that require grad."""

    def __init__(self):
        self._params: dict[str, torch.Tensor] = {}

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = as_tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r}")
            p = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if tuple(arr.shape) != tuple(p.shape):
                raise ShapeError(
                    f"parameter {name!r}: stored shape {arr.shape} != expected {tuple(p.shape)}"
                )
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr))

    def num_elements(self) -> int:
        return int(builtins.sum(p.numel() for p in self._params.values()))


def backward(root: torch.Tensor, store: ParamStore | None = None) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``root``.

    Each root may be differentiated once.  Leaves in ``store`` that ``root``
    does not depend on receive zero gradients.
    """
    if root.numel() != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    if getattr(root, "_dpf_consumed", False):
        raise TapeError("tape already consumed by a previous backward")
    if root.requires_grad:
        root.backward()
    root._dpf_consumed = True
    if store is not None:
        for p in store._params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)


def grad_check(
    f: Callable[[ParamStore], torch.Tensor],
    store: ParamStore,
    h: float = 1e-5,
    eps: float = 1e-6,
    names: Sequence[str] | None = None,
) -> float:
    """Largest relative gap between autograd and central differences.

    The relative error of one coordinate is
    ``|analytic - numeric| / (|analytic| + |numeric| + eps)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = list(store) if names is None else list(names)
    store.zero_grad()
    root = f(store)
    backward(root, store)
    worst = 0.0
    with torch.no_grad():
        for name in names:
            p = store[name]
            analytic = p.grad.detach().clone().reshape(-1)
            flat = p.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                fp = float(f(store))
                flat[k] = orig - h
                fm = float(f(store))
                flat[k] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError(f"non-finite objective probing {name}[{k}]")
                num = (fp - fm) / (2 * h)
                a = analytic[k].item()
                worst = max(worst, abs(a - num) / (abs(a) + abs(num) + eps))
    store.zero_grad()
    return worst


# --------------------------------------------------------------------------
# optimisers
# --------------------------------------------------------------------------


def _checked_grads(store: ParamStore) -> dict[str, torch.Tensor]:
    grads = {}
    for name, p in store.items():
        if p.grad is None:
            raise RuntimeError(f"parameter {name!r} has no gradient; call backward first")
        if not bool(torch.isfinite(p.grad).all()):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        grads[name] = p.grad
    return grads


class SGD:
    def __init__(self, store: ParamStore, lr: float):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.store = store
        self.lr = lr

    def step(self) -> None:
        grads = _checked_grads(self.store)
        with torch.no_grad():
            for name, p in self.store.items():
                p -= self.lr * grads[name]
        self.store.zero_grad()

    def state(self) -> dict:
        return {}


class Adam:
    def __init__(self, store: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in store.items()}
        self.v = {n: torch.zeros_like(p) for n, p in store.items()}

    def step(self) -> None:
        grads = _checked_grads(self.store)
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        with torch.no_grad():
            for name, p in self.store.items():
                g = grads[name]
                self.m[name].mul_(self.beta1).add_((1 - self.beta1) * g)
                self.v[name].mul_(self.beta2).add_((1 - self.beta2) * g * g)
                p -= self.lr * (self.m[name] / c1) / (torch.sqrt(self.v[name] / c2) + self.eps)
        self.store.zero_grad()

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def make_optimizer(store: ParamStore, mode: str, lr: float):
    if mode == "sgd":
        return SGD(store, lr)
    if mode == "adam":
        return Adam(store, lr)
    raise ValueError(f"unknown optimiser {mode!r}; expected 'sgd' or 'adam'")


_OPTIMIZERS: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def optimizer_step(store: ParamStore, mode: str, lr: float) -> None:
    """One update of ``store`` from its populated gradients, then zero them.

    Adam moment buffers persist per store between calls.
    """
    opt = _OPTIMIZERS.get(store)
    if opt is None or not isinstance(opt, SGD if mode == "sgd" else Adam) or opt.lr != lr:
        opt = make_optimizer(store, mode, lr)
        _OPTIMIZERS[store] = opt
    opt.step()


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------


class MLP:
    """Affine/activation chain whose weights live in a ParamStore.

    The final layer is linear.  ``zero_last`` starts it at zero so the network
    initially outputs zeros.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        widths: Sequence[int],
        activation: str = "tanh",
        generator: torch.Generator | None = None,
        zero_last: bool = False,
    ):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.weights: list[torch.Tensor] = []
        self.biases: list[torch.Tensor] = []
        n_layers = len(widths) - 1
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if zero_last and k == n_layers - 1:
                w = torch.zeros(fan_in, fan_out)
            else:
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                w = (torch.rand(fan_in, fan_out, generator=generator) * 2 - 1) * bound
            self.weights.append(store.add(f"{prefix}.W{k}", w))
            self.biases.append(store.add(f"{prefix}.b{k}", torch.zeros(fan_out)))

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(f"MLP expects input width {self.widths[0]}, got {x.shape[-1]}")
        act = ACTIVATIONS[self.activation]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if k < last:
                x = act(x)
        return x


def mlp_apply(store: ParamStore, prefix: str, x: torch.Tensor, widths: Sequence[int],
              activation: str = "tanh") -> torch.Tensor:
    """Evaluate an MLP whose parameters are already registered under ``prefix``."""
    if x.shape[-1] != widths[0]:
        raise ShapeError(f"MLP expects input width {widths[0]}, got {x.shape[-1]}")
    act = ACTIVATIONS[activation]
    n = len(widths) - 1
    for k in range(n):
        x = x @ store[f"{prefix}.W{k}"] + store[f"{prefix}.b{k}"]
        if k < n - 1:
            x = act(x)
    return x


class CouplingFlow:
    """Stack of conditional affine couplings with alternating masks.

    In block k the masked coordinates pass through unchanged and feed (with
    the optional conditioning vector) a net producing log-scales ``s`` and
    shifts ``t`` for the remaining coordinates: ``y = x * exp(s) + t``.
    Log-scales are clamped to ``[-7, 7]`` in both directions.  For a 1-D state
    every coordinate is transformed and the net sees only the conditioning
    vector (or a constant), giving a conditional elementwise affine map.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        dim: int,
        cond_dim: int = 0,
        depth: int = 4,
        hidden: int = 32,
        generator: torch.Generator | None = None,
        zero_init: bool = True,
    ):
        self.dim, self.cond_dim, self.depth = dim, cond_dim, depth
        self.masks = []
        self.nets = []
        for k in range(depth):
            if dim == 1:
                mask = torch.zeros(1)
            else:
                mask = torch.tensor([float((j + k) % 2) for j in range(dim)])
            self.masks.append(mask)
            self.nets.append(
                MLP(store, f"{prefix}.block{k}", [dim + cond_dim, hidden, 2 * dim],
                    "tanh", generator, zero_last=zero_init)
            )

    def _scale_shift(self, k: int, x_masked: torch.Tensor, cond: torch.Tensor | None):
        inp = x_masked
        if self.cond_dim:
            if cond is None:
                raise ShapeError("conditioning vector required")
            if cond.shape[-1] != self.cond_dim:
                raise ShapeError(f"conditioning width {cond.shape[-1]} != {self.cond_dim}")
            cond = cond.expand(*x_masked.shape[:-1], self.cond_dim)
            inp = torch.cat([x_masked, cond], dim=-1)
        out = self.nets[k](inp)
        inv = 1 - self.masks[k]
        s = torch.clamp(out[..., : self.dim], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP) * inv
        t = out[..., self.dim:] * inv
        return s, t

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"flow expects width {self.dim}, got {x.shape[-1]}")
        logdet = torch.zeros(x.shape[:-1])
        for k in range(self.depth):
            m = self.masks[k]
            s, t = self._scale_shift(k, x * m, cond)
            x = x * m + (1 - m) * (x * torch.exp(s) + t)
            logdet = logdet + s.sum(-1)
        return x, logdet

    def inverse(self, y: torch.Tensor, cond: torch.Tensor | None = None):
        if y.shape[-1] != self.dim:
            raise ShapeError(f"flow expects width {self.dim}, got {y.shape[-1]}")
        logdet = torch.zeros(y.shape[:-1])
        for k in reversed(range(self.depth)):
            m = self.masks[k]
            s, t = self._scale_shift(k, y * m, cond)
            y = y * m + (1 - m) * ((y - t) * torch.exp(-s))
            logdet = logdet - s.sum(-1)
        return y, logdet


def coupling_apply(flow: CouplingFlow, x: torch.Tensor, cond: torch.Tensor | None = None,
                   mode: str = "forward"):
    if mode == "forward":
        return flow.forward(x, cond)
    if mode == "inverse":
        return flow.inverse(x, cond)
    raise ValueError(f"mode must be 'forward' or 'inverse', got {mode!r}")


# --------------------------------------------------------------------------
# reparameterised sampling
# --------------------------------------------------------------------------


def reparam_gaussian(mean: torch.Tensor, log_std: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """``mean + exp(log_std) * noise``; pathwise-differentiable in mean and log_std."""
    if noise.shape != torch.broadcast_shapes(mean.shape, log_std.shape, noise.shape):
        raise ShapeError("noise shape does not cover mean/log_std")
    return mean + torch.exp(log_std) * noise


def pathwise_gradient(
    psi: Callable[[torch.Tensor], torch.Tensor],
    mean: torch.Tensor,
    log_std: torch.Tensor,
    n_samples: int,
    generator: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Average of ``n_samples`` pathwise gradients of ``E[psi(x)]``, x ~ N(mean, exp(log_std)^2)."""
    mean = mean.detach().clone().requires_grad_(True)
    log_std = log_std.detach().clone().requires_grad_(True)
    noise = torch.randn((n_samples, *mean.shape), generator=generator)
    x = reparam_gaussian(mean, log_std, noise)
    psi(x).sum().div(n_samples).backward()
    return mean.grad, log_std.grad


def normal_log_density(x: torch.Tensor, mean, var) -> torch.Tensor:
    """Elementwise log N(x; mean, var)."""
    var = torch.as_tensor(var, dtype=DTYPE)
    return -0.5 * (torch.log(2 * math.pi * var) + (x - mean) ** 2 / var)


def standard_normal_log_density(z: torch.Tensor) -> torch.Tensor:
    """log N(z; 0, I) summed over the last axis."""
    return (-0.5 * z * z - 0.5 * math.log(2 * math.pi)).sum(-1)
