"""Minimal reverse-mode autodiff over row-batched numpy arrays.

Every value on a :class:`Tape` is a 2-D ``float64`` array whose rows are
independent items (nodes, edges, codewords).  Only the handful of primitives
the localization network needs are provided: affine layers, GELU, row
gathers, segment sums, concatenation, squared norms, stop-gradient and the
straight-through estimator.

A tape can run in *frozen* mode: the values produced by ``stop_gradient`` and
by discrete choices (``choose``) are replayed from an earlier recording
instead of being recomputed.  Perturbing parameters under a frozen tape
evaluates the smooth surrogate whose true derivative is the gradient that
``backward`` reports, which is what :func:`grad_check` differentiates
numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numba
import numpy as np


class TapeError(RuntimeError):
    """Misuse of a computation tape (backward before forward, bad shapes...)."""


class OptimizerError(ValueError):
    """Raised when a gradient block contains non-finite entries."""


@numba.njit(cache=True)
def _gelu_fused(x, out, slope):
    for k in range(x.size):
        v = x.flat[k]
        cdf = 0.5 * (1.0 + math.erf(v * 0.7071067811865476))
        out.flat[k] = v * cdf
        slope.flat[k] = cdf + v * 0.3989422804014327 * math.exp(-0.5 * v * v)


def gelu_and_slope(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GELU values and derivatives in one pass."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    slope = np.empty_like(x)
    _gelu_fused(x, out, slope)
    return out, slope


def gelu(x):
    """Exact (erf-based) GELU, ``x * Phi(x)``."""
    scalar = np.ndim(x) == 0
    out = gelu_and_slope(np.atleast_1d(x))[0]
    return float(out[0]) if scalar else out


class Var:
    """A value slot on the tape."""

    __slots__ = ("value", "grad", "parents", "fwd", "bwd", "name", "index")

    def __init__(self, value, parents=(), fwd=None, bwd=None, name=None, index=-1):
        self.value = value
        self.grad = None
        self.parents = parents
        self.fwd = fwd
        self.bwd = bwd
        self.name = name
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or f"#{self.index}"
        return f"Var({label}, shape={self.value.shape})"


@dataclass
class Frozen:
    """Recorded stop-gradient values and discrete choices of one forward pass."""

    sg: list = field(default_factory=list)
    choices: list = field(default_factory=list)


class Tape:
    """Append-only record of primitive operations.

    Args:
        frozen: when given, ``stop_gradient`` and ``choose`` return the values
            stored in it (in call order) instead of computing fresh ones.
    """

    def __init__(self, frozen: Frozen | None = None):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}
        self.frozen = frozen
        self.record = Frozen()
        self._sg_pos = 0
        self._choice_pos = 0

    # -- construction -------------------------------------------------

    def _push(self, value, parents=(), fwd=None, bwd=None, name=None) -> Var:
        var = Var(value, tuple(parents), fwd, bwd, name, len(self.nodes))
        self.nodes.append(var)
        return var

    def param(self, name: str, array: np.ndarray) -> Var:
        """Register a trainable leaf (reused if the name was seen before)."""
        if name in self.params:
            return self.params[name]
        var = self._push(array, name=name)
        self.params[name] = var
        return var

    def constant(self, array) -> Var:
        return self._push(np.asarray(array, dtype=np.float64))

    # -- primitives -------------------------------------------------

    def affine(self, x: Var, weight: Var, bias: Var) -> Var:
        """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
        if x.value.ndim != 2 or x.value.shape[1] != weight.value.shape[1]:
            raise TapeError(
                f"affine: input {x.value.shape} does not match weight {weight.value.shape}"
            )

        def fwd(xv, wv, bv):
            return xv @ wv.T + bv

        def bwd(g, xv, wv, bv):
            return g @ wv, g.T @ xv, g.sum(axis=0)

        return self._push(fwd(x.value, weight.value, bias.value), (x, weight, bias), fwd, bwd)

    def gelu(self, x: Var) -> Var:
        value, slope = gelu_and_slope(x.value)
        cache = [slope]

        def fwd(xv):
            out, cache[0] = gelu_and_slope(xv)
            return out

        def bwd(g, xv):
            return (g * cache[0],)

        return self._push(value, (x,), fwd, bwd)

    def add(self, a: Var, b: Var) -> Var:
        def fwd(av, bv):
            return av + bv

        def bwd(g, av, bv):
            return g, g

        return self._push(a.value + b.value, (a, b), fwd, bwd)

    def sub(self, a: Var, b: Var) -> Var:
        def fwd(av, bv):
            return av - bv

        def bwd(g, av, bv):
            return g, -g

        return self._push(a.value - b.value, (a, b), fwd, bwd)

    def scale(self, a: Var, c: float) -> Var:
        c = float(c)

        def fwd(av):
            return c * av

        def bwd(g, av):
            return (c * g,)

        return self._push(c * a.value, (a,), fwd, bwd)

    def concat(self, parts: list[Var]) -> Var:
        widths = [p.value.shape[1] for p in parts]
        stops = np.cumsum(widths)[:-1]

        def fwd(*vals):
            return np.concatenate(vals, axis=1)

        def bwd(g, *vals):
            return tuple(np.split(g, stops, axis=1))

        return self._push(fwd(*[p.value for p in parts]), parts, fwd, bwd)

    def gather(self, x: Var, rows: np.ndarray) -> Var:
        """Select rows ``x[rows]``; repeated rows accumulate gradient."""
        rows = np.asarray(rows, dtype=np.intp)
        n = x.value.shape[0]

        def fwd(xv):
            return xv[rows]

        def bwd(g, xv):
            out = np.zeros((n, g.shape[1]))
            np.add.at(out, rows, g)
            return (out,)

        return self._push(x.value[rows], (x,), fwd, bwd)

    def segment_sum(self, x: Var, segments: np.ndarray, num_segments: int) -> Var:
        """Sum rows of ``x`` into ``num_segments`` buckets; empty buckets are zero."""
        segments = np.asarray(segments, dtype=np.intp)

        def fwd(xv):
            out = np.zeros((num_segments, xv.shape[1]))
            np.add.at(out, segments, xv)
            return out

        def bwd(g, xv):
            return (g[segments],)

        return self._push(fwd(x.value), (x,), fwd, bwd)

    def sum_squares(self, x: Var) -> Var:
        """Total squared Frobenius norm, as a 1x1 value."""

        def fwd(xv):
            return np.array([[np.sum(xv * xv)]])

        def bwd(g, xv):
            return (2.0 * g[0, 0] * xv,)

        return self._push(fwd(x.value), (x,), fwd, bwd)

    def row_sum_squares(self, x: Var) -> Var:
        """Per-row squared norm, shape (n, 1)."""

        def fwd(xv):
            return np.sum(xv * xv, axis=1, keepdims=True)

        def bwd(g, xv):
            return (2.0 * g * xv,)

        return self._push(fwd(x.value), (x,), fwd, bwd)

    def total(self, terms: list[Var]) -> Var:
        """Sum of 1x1 scalars."""

        def fwd(*vals):
            return np.array([[math.fsum(float(v[0, 0]) for v in vals)]])

        def bwd(g, *vals):
            return tuple(g for _ in vals)

        return self._push(fwd(*[t.value for t in terms]), terms, fwd, bwd)

    def stop_gradient(self, x: Var) -> Var:
        """Forward the value, block the gradient."""
        if self.frozen is not None:
            value = self.frozen.sg[self._sg_pos]
            self._sg_pos += 1
        else:
            value = x.value.copy()
        self.record.sg.append(value)
        return self._push(value)

    def straight_through(self, latent: Var, codeword: Var) -> Var:
        """``latent + sg(codeword - latent)``: codeword value, identity gradient."""
        gap = self.stop_gradient(self.sub(codeword, latent))
        return self.add(latent, gap)

    def choose(self, compute: Callable[[], np.ndarray]) -> np.ndarray:
        """Make (or replay) a non-differentiable discrete decision."""
        if self.frozen is not None:
            out = self.frozen.choices[self._choice_pos]
            self._choice_pos += 1
        else:
            out = compute()
        self.record.choices.append(out)
        return out

    # -- evaluation -------------------------------------------------

    def replay(self) -> None:
        """Recompute every value from the current leaf values, in tape order."""
        for var in self.nodes:
            if var.fwd is not None:
                var.value = var.fwd(*[p.value for p in var.parents])

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Reverse sweep from a 1x1 ``loss``; returns gradients of named params."""
        if not self.nodes or loss.index < 0 or loss.index >= len(self.nodes) or self.nodes[loss.index] is not loss:
            raise TapeError("backward called on a value that was not produced by this tape")
        if loss.value.shape != (1, 1):
            raise TapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for var in self.nodes:
            var.grad = None
        loss.grad = np.ones((1, 1))
        for var in reversed(self.nodes[: loss.index + 1]):
            if var.grad is None or var.bwd is None:
                continue
            parent_grads = var.bwd(var.grad, *[p.value for p in var.parents])
            for parent, g in zip(var.parents, parent_grads):
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g
        grads = {}
        for name, var in self.params.items():
            grads[name] = var.grad if var.grad is not None else np.zeros_like(var.value)
        return grads


# -- networks --------------------------------------------------------------


@dataclass(frozen=True)
class Mlp:
    """A stack of dense layers; ``sizes`` lists widths from input to output.

    Every layer is followed by GELU unless ``linear_last`` is set, in which
    case the final layer is affine only.
    """

    name: str
    sizes: tuple[int, ...]
    linear_last: bool = False

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    def keys(self):
        for k in range(self.num_layers):
            yield f"{self.name}.layer{k}.weight", (self.sizes[k + 1], self.sizes[k])
            yield f"{self.name}.layer{k}.bias", (self.sizes[k + 1],)

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Glorot-uniform weights, zero biases."""
        out = {}
        for key, shape in self.keys():
            if key.endswith("weight"):
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                out[key] = rng.uniform(-bound, bound, size=shape)
            else:
                out[key] = np.zeros(shape)
        return out


def mlp_forward(tape: Tape, net: Mlp, params: Mapping[str, np.ndarray], x: Var) -> Var:
    if x.value.ndim != 2 or x.value.shape[1] != net.sizes[0]:
        raise TapeError(f"{net.name}: expected input width {net.sizes[0]}, got {x.value.shape}")
    h = x
    for k in range(net.num_layers):
        w = tape.param(f"{net.name}.layer{k}.weight", params[f"{net.name}.layer{k}.weight"])
        b = tape.param(f"{net.name}.layer{k}.bias", params[f"{net.name}.layer{k}.bias"])
        h = tape.affine(h, w, b)
        if not (net.linear_last and k == net.num_layers - 1):
            h = tape.gelu(h)
    return h


def mlp_apply(net: Mlp, params: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Tape-free forward pass (inference)."""
    h = np.asarray(x, dtype=np.float64)
    for k in range(net.num_layers):
        h = h @ params[f"{net.name}.layer{k}.weight"].T + params[f"{net.name}.layer{k}.bias"]
        if not (net.linear_last and k == net.num_layers - 1):
            h = gelu(h)
    return h


# -- gradient checking -----------------------------------------------------


def grad_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    keys=None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    The relative error of each entry uses ``max(|a|, |n|, 1e-8)`` as the
    denominator.  ``max_entries`` subsamples entries per block.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    worst = 0.0
    for key in keys if keys is not None else list(work):
        block = work[key]
        flat = block.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        a_flat = np.asarray(analytic[key]).reshape(-1)
        for n in idx:
            orig = flat[n]
            flat[n] = orig + eps
            up = f(work)
            flat[n] = orig - eps
            down = f(work)
            flat[n] = orig
            num = (up - down) / (2.0 * eps)
            a = a_flat[n]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(state: AdamState, params: dict, grads: Mapping[str, np.ndarray]) -> dict:
    """One adaptive-moment update, in place on ``params`` (also returned)."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in block {key!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for key, g in grads.items():
        p = params[key]
        if g.shape != p.shape:
            raise OptimizerError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key!r}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
