"""Minimal dense feedforward networks with exact reverse-mode gradients.

Parameters live in a single flat float64 vector; per-layer weight and bias
views are carved out of it, so optimizer updates on the flat vector are
immediately visible to forward passes. The flat vector may itself be a view
into a larger buffer, which lets several networks share one optimizer.

Layout is layer-major: for each layer, the (n_out, n_in) weight matrix in
row-major order, then the bias. Forward accepts a single input vector or a
(batch, n_in) matrix; parameter gradients are summed over the batch.

Everything is 64-bit. Subgradients at kinks: ReLU'(0) = 0, Abs'(0) = 0,
ELU uses alpha = 1 and is smooth at 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    """Input, gradient, or parameter dimensions do not match the topology."""


class NonFiniteGradient(FloatingPointError):
    """A gradient entry is NaN or infinite; training should halt with diagnostics."""


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_vjp(z, g):
    return np.where(z > 0.0, g, 0.0)


def _abs(z):
    return np.abs(z)


def _abs_vjp(z, g):
    return g * np.sign(z)


def _tanh(z):
    return np.tanh(z)


def _tanh_vjp(z, g):
    t = np.tanh(z)
    return g * (1.0 - t * t)


def _identity(z):
    return z


def _identity_vjp(z, g):
    return g


def _elu(z):
    return np.where(z > 0.0, z, np.expm1(z))


def _elu_vjp(z, g):
    return g * np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


# name -> (activation, vjp); the vjp maps an output gradient to a
# pre-activation gradient, dz = g * act'(z), without materializing act'(z)
ACTIVATIONS = {
    "relu": (_relu, _relu_vjp),
    "abs": (_abs, _abs_vjp),
    "tanh": (_tanh, _tanh_vjp),
    "identity": (_identity, _identity_vjp),
    "elu": (_elu, _elu_vjp),
}

# activations with a non-differentiable point at 0 (relevant to finite differences)
KINKED_ACTIVATIONS = ("relu", "abs")


@dataclass(frozen=True)
class Topology:
    """Layer sizes [n0, n1, ..., nL] and one activation name per layer."""

    sizes: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.sizes) < 2:
            raise ValueError("topology needs at least one layer")
        if any(s < 1 for s in self.sizes):
            raise ValueError("layer sizes must be >= 1")
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need exactly one activation per layer")
        for name in self.activations:
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(n_in * n_out + n_out
                   for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]))


class NetParams:
    """Flat parameter vector plus per-layer views into it."""

    def __init__(self, topology: Topology, flat: np.ndarray):
        flat = np.asarray(flat)
        if flat.dtype != np.float64 or flat.ndim != 1:
            raise ShapeMismatch("params must be a 1-D float64 vector")
        if flat.shape[0] != topology.n_params:
            raise ShapeMismatch(
                f"expected {topology.n_params} params, got {flat.shape[0]}")
        self.topology = topology
        self.flat = flat
        self.layers: list[tuple[np.ndarray, np.ndarray]] = []
        offset = 0
        for n_in, n_out in zip(topology.sizes[:-1], topology.sizes[1:]):
            w = flat[offset:offset + n_in * n_out].reshape(n_out, n_in)
            offset += n_in * n_out
            b = flat[offset:offset + n_out]
            offset += n_out
            self.layers.append((w, b))

    @classmethod
    def zeros(cls, topology: Topology) -> "NetParams":
        return cls(topology, np.zeros(topology.n_params))

    def copy(self) -> "NetParams":
        return NetParams(self.topology, self.flat.copy())


def init_params(topology: Topology, rng: np.random.Generator,
                flat_out: np.ndarray | None = None) -> NetParams:
    """Scaled uniform init: W ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero."""
    if flat_out is None:
        flat_out = np.zeros(topology.n_params)
    params = NetParams(topology, flat_out)
    for w, b in params.layers:
        bound = math.sqrt(1.0 / w.shape[1])
        w[:] = rng.uniform(-bound, bound, size=w.shape)
        b[:] = 0.0
    return params


@dataclass
class Tape:
    """Cached per-layer inputs and pre-activations from one forward pass."""

    params: NetParams
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    single: bool


def forward(params: NetParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Affine + activation stack. Returns the output and a backprop tape."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.topology.sizes[0]:
        raise ShapeMismatch(
            f"input width {x.shape[-1]} != {params.topology.sizes[0]}")
    inputs: list[np.ndarray] = []
    preacts: list[np.ndarray] = []
    for (w, b), act in zip(params.layers, params.topology.activations):
        inputs.append(x)
        z = x @ w.T + b
        preacts.append(z)
        x = ACTIVATIONS[act][0](z)
    out = x[0] if single else x
    return out, Tape(params, inputs, preacts, single)


def backward(tape: Tape, grad_output: np.ndarray,
             need_input_grad: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Exact gradients of sum(grad_output * output) w.r.t. params and input.

    Parameter gradients are summed over batch rows and returned as one flat
    vector in the parameter layout; the input gradient matches the shape of
    the forward input. Passing ``need_input_grad=False`` skips the first
    layer's input-gradient matmul (a real saving on wide inputs) and
    returns None in its place.
    """
    params = tape.params
    g = np.asarray(grad_output, dtype=np.float64)
    if tape.single:
        g = g[None, :]
    if g.shape != tape.preacts[-1].shape:
        raise ShapeMismatch(
            f"grad_output shape {grad_output.shape} does not match output")
    grad_flat = np.empty(params.topology.n_params)
    grads = NetParams(params.topology, grad_flat)
    for layer in range(params.topology.n_layers - 1, -1, -1):
        act = params.topology.activations[layer]
        dz = ACTIVATIONS[act][1](tape.preacts[layer], g)
        gw, gb = grads.layers[layer]
        np.matmul(dz.T, tape.inputs[layer], out=gw)
        dz.sum(axis=0, out=gb)
        if layer == 0 and not need_input_grad:
            return grad_flat, None
        w, _ = params.layers[layer]
        g = dz @ w
    grad_input = g[0] if tape.single else g
    return grad_flat, grad_input


def tape_has_kink(tape: Tape, threshold: float = 1e-7) -> bool:
    """True when some ReLU/Abs pre-activation sits within ``threshold`` of 0.

    Finite-difference checks are unreliable at such points; callers should
    resample their instance.
    """
    for act, z in zip(tape.params.topology.activations, tape.preacts):
        if act in KINKED_ACTIVATIONS and np.any(np.abs(z) < threshold):
            return True
    return False


@dataclass
class AdamState:
    """Adaptive-moment optimizer state over one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self._scratch = np.empty_like(self.m)

    @classmethod
    def for_size(cls, n: int, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0,
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(flat_params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """Bias-corrected adaptive-moment update, in place. Deterministic.

    The update is the standard m_hat / (sqrt(v_hat) + eps) rule with the
    bias corrections folded into the step size, which avoids temporaries on
    the hot path: lr * m_hat / (sqrt(v_hat) + eps) is computed as
    (lr * s2 / (1 - b1^t)) * m / (sqrt(v) + eps * s2) with s2 = sqrt(1 - b2^t).
    """
    if flat_params.shape != grads.shape or flat_params.shape != state.m.shape:
        raise ShapeMismatch("params, grads, and moments must have equal length")
    # one reduction instead of an isfinite pass: any nan/inf entry poisons the sum
    if not math.isfinite(float(grads.sum())):
        raise NonFiniteGradient("non-finite gradient entry; halting update")
    state.step += 1
    scratch = state._scratch
    state.m *= state.beta1
    np.multiply(grads, 1.0 - state.beta1, out=scratch)
    state.m += scratch
    state.v *= state.beta2
    np.square(grads, out=scratch)
    scratch *= 1.0 - state.beta2
    state.v += scratch
    s2 = math.sqrt(1.0 - state.beta2 ** state.step)
    alpha = state.lr * s2 / (1.0 - state.beta1 ** state.step)
    np.sqrt(state.v, out=scratch)
    scratch += state.eps * s2
    np.divide(state.m, scratch, out=scratch)
    scratch *= alpha
    flat_params -= scratch
    return flat_params


def clip_global_norm(grads: np.ndarray, max_norm: float) -> float:
    """Scale ``grads`` in place so its l2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    norm = float(np.linalg.norm(grads))
    if norm > max_norm and norm > 0.0:
        grads *= max_norm / norm
    return norm


def finite_diff_check(flat_params: np.ndarray, loss_fn, eps: float = 1e-5,
                      n_coords: int | None = None,
                      rng: np.random.Generator | None = None,
                      tolerance: float | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(flat) -> (loss, grad)`` must be differentiable at the given
    point (resample the instance when a kink is hit, see tape_has_kink).
    Checks every coordinate, or a random subset of ``n_coords``. The
    relative error denominator is floored at 1e-6 to absorb cancellation
    noise in near-zero gradient entries. When ``tolerance`` is given, an
    AssertionError reports the worst coordinate if it is exceeded.
    """
    flat_params = np.asarray(flat_params, dtype=np.float64)
    _, analytic = loss_fn(flat_params)
    n = flat_params.shape[0]
    if n_coords is None or n_coords >= n:
        coords = np.arange(n)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(n, size=n_coords, replace=False)
    work = flat_params.copy()
    max_err = 0.0
    worst = -1
    for i in coords:
        saved = work[i]
        work[i] = saved + eps
        loss_plus = loss_fn(work)[0]
        work[i] = saved - eps
        loss_minus = loss_fn(work)[0]
        work[i] = saved
        fd = (loss_plus - loss_minus) / (2.0 * eps)
        err = abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), 1e-6)
        if err > max_err:
            max_err = err
            worst = int(i)
    if tolerance is not None and max_err > tolerance:
        raise AssertionError(
            f"gradient mismatch {max_err:.3e} > {tolerance:.1e} at coord {worst}")
    return max_err


# --- checkpointing ----------------------------------------------------------

CHECKPOINT_VERSION = 1


def params_to_payload(params: NetParams) -> dict:
    """JSON-safe dict; float repr round-trips bit-exactly."""
    return {
        "format_version": CHECKPOINT_VERSION,
        "sizes": list(params.topology.sizes),
        "activations": list(params.topology.activations),
        "params": params.flat.tolist(),
    }


def params_from_payload(payload: dict) -> NetParams:
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    topology = Topology(tuple(payload["sizes"]), tuple(payload["activations"]))
    return NetParams(topology, np.array(payload["params"], dtype=np.float64))


def save_params(params: NetParams, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_payload(params), fh)


def load_params(path: str) -> NetParams:
    with open(path) as fh:
        return params_from_payload(json.load(fh))
