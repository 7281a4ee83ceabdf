"""Minimal tensor engine with tape-based reverse-mode differentiation.

Only the primitives the decoder needs are provided: 3x3 "same" convolution,
batch normalization (2-D and 1-D), ReLU, 2x2 max pooling, flatten, linear,
softmax cross-entropy and mean squared error.

Usage::

    with Tape() as tape:
        loss = softmax_cross_entropy(model.forward(x, train=True), labels)
    tape.backward(loss)

Outside an active tape, ops run forward only and record nothing.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidArgument, ShapeError

_local = threading.local()
# names of ops whose backward is deliberately wrong; negative control for gradient checks
_FAULTY_BACKWARD: set = set()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive ops; ``backward`` replays it in reverse."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, loss: Tensor, grad=None):
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError("backward without an explicit gradient needs a scalar loss")
            grad = np.ones_like(loss.data)
        # intermediate gradients live only for this pass; leaves accumulate in .grad
        produced = {id(out) for out, _, _ in self.records}
        pending = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        if id(loss) not in produced and loss.requires_grad:
            loss.grad = pending[id(loss)] if loss.grad is None else loss.grad + pending[id(loss)]
        for out, inputs, backward in reversed(self.records):
            g_out = pending.pop(id(out), None)
            if g_out is None:
                continue
            for inp, g in zip(inputs, backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                if id(inp) in produced:
                    pending[id(inp)] = g if id(inp) not in pending else pending[id(inp)] + g
                else:
                    inp.grad = g if inp.grad is None else inp.grad + g


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _record(out: Tensor, inputs, backward):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, inputs, backward))
    return out


def _needs(t):
    return t.requires_grad and _active_tape() is not None


# --- primitives ------------------------------------------------------------

def _batched_left_matmul(a, b):
    # one GEMM per image: faster than a broadcast matmul for these small left operands
    out = np.empty((b.shape[0], a.shape[0], b.shape[2]), dtype=np.result_type(a, b))
    for i in range(b.shape[0]):
        np.matmul(a, b[i], out=out[i])
    return out


def conv2d(x, weight, bias):
    """3x3 cross-correlation, stride 1, zero padding 1: (N,C,H,W) -> (N,K,H,W)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    k = weight.shape[0]
    if weight.shape != (k, c, 3, 3):
        raise ShapeError(f"conv2d weight {weight.shape} does not match {c} input channels")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d bias must have shape ({k},)")
    cols = kernels.im2col3x3(np.ascontiguousarray(x.data))  # (N, 9C, HW)
    wmat = weight.data.reshape(k, c * 9)
    y = _batched_left_matmul(wmat, cols)
    y += bias.data[None, :, None]
    out = Tensor(y.reshape(n, k, h, w))

    def backward(dy):
        dyr = dy.reshape(n, k, h * w)
        dw = np.zeros((k, c * 9), dtype=dy.dtype)
        for i in range(n):
            dw += dyr[i] @ cols[i].T
        dw = dw.reshape(weight.shape)
        db = dyr.sum(axis=(0, 2))
        dx = None
        if x.requires_grad:
            dx = kernels.col2im3x3(_batched_left_matmul(np.ascontiguousarray(wmat.T), dyr), n, c, h, w)
        if "conv2d" in _FAULTY_BACKWARD:
            dw = dw * 1.01
        return dx, dw, db

    return _record(out, (x, weight, bias), backward)


@dataclass
class BatchNormState:
    """Running statistics; ``eval`` mode normalizes with these."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    steps: int = 0

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x, gamma, beta, state: BatchNormState, train: bool):
    """Per-channel normalization over every axis except 1 (works for 2-D and 4-D input).

    Train mode uses batch statistics (biased variance) and updates the running
    mean and unbiased running variance with the state's momentum.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError("batchnorm affine parameters must match the channel count")
    x4 = x.data if x.data.ndim == 4 else x.data[:, :, None, None]
    x4 = np.ascontiguousarray(x4)
    count = x.data.size // channels
    if train:
        if count < 2:
            raise ShapeError("train-mode batchnorm needs at least two values per channel")
        mean, var = kernels.channel_moments(x4)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        unbiased = var * (count / (count - 1))
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
        state.steps += 1
    else:
        mean, var = state.running_mean, state.running_var
    dtype = x.dtype
    mean = np.ascontiguousarray(mean, dtype=dtype)
    inv_std = np.ascontiguousarray(1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + state.eps), dtype=dtype)
    g = np.ascontiguousarray(gamma.data, dtype=dtype)
    xhat, y = kernels.bn_apply(x4, mean, inv_std, g, np.ascontiguousarray(beta.data, dtype=dtype))
    out = Tensor(y.reshape(x.shape))

    def backward(dy):
        dy4 = np.ascontiguousarray(dy.reshape(xhat.shape))
        dx, dgamma, dbeta = kernels.bn_backward(dy4, xhat, g, inv_std, train)
        return dx.reshape(x.shape), dgamma, dbeta

    return _record(out, (x, gamma, beta), backward)


def relu(x):
    x = as_tensor(x)
    y = kernels.relu_forward(np.ascontiguousarray(x.data).reshape(-1)).reshape(x.shape)
    out = Tensor(y)
    return _record(out, (x,), lambda dy: (kernels.relu_backward(
        np.ascontiguousarray(dy).reshape(-1), y.reshape(-1)).reshape(x.shape),))


def maxpool2x2(x):
    """Max over disjoint 2x2 blocks; ties route the gradient to the first row-major entry."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects N x C x H x W input, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape[2:]}")
    y, idx = kernels.maxpool2x2_forward(np.ascontiguousarray(x.data))
    out = Tensor(y)
    return _record(out, (x,), lambda dy: (kernels.maxpool2x2_backward(np.ascontiguousarray(dy), idx),))


def flatten(x):
    x = as_tensor(x)
    shape = x.shape
    out = Tensor(x.data.reshape(shape[0], -1))
    return _record(out, (x,), lambda dy: (dy.reshape(shape),))


def linear(x, weight, bias):
    """Affine map (N, D) -> (N, O) with weight (O, D)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError("linear bias must match the output width")
    out = Tensor(x.data @ weight.data.T + bias.data)

    def backward(dy):
        dx = dy @ weight.data if x.requires_grad else None
        dw = dy.T @ x.data
        if "linear" in _FAULTY_BACKWARD:
            dw = dw * 1.01
        return dx, dw, dy.sum(axis=0)

    return _record(out, (x, weight, bias), backward)


def softmax(logits):
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels under row-wise softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"need one label per row, got {labels.shape} for {n} rows")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise InvalidArgument(f"labels must be integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def backward(dy):
        g = softmax(logits.data)
        g[rows, labels] -= 1.0
        return (g * (dy / n),)

    return _record(out, (logits,), backward)


def mse(pred, target):
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    diff = pred.data - target
    out = Tensor(np.asarray((diff * diff).mean(), dtype=pred.dtype))
    return _record(out, (pred,), lambda dy: (diff * (2.0 * dy / diff.size),))


# --- gradient checking -------------------------------------------------------

def _entry_error(loss_fn, flat, i, h, analytic, floor):
    orig = flat[i]
    flat[i] = orig + h
    up = float(loss_fn().data)
    flat[i] = orig - h
    down = float(loss_fn().data)
    flat[i] = orig
    numeric = (up - down) / (2.0 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        lines.append(f"{'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def grad_check(loss_fn, params, tolerance=1e-4, rel_step=1e-3, min_step=1e-6,
               samples_per_param=None, seed=0, floor=1e-5, refine=True):
    """Compare tape gradients with central differences, parameter by parameter.

    ``loss_fn()`` must build a scalar loss from the tensors in ``params``
    (a name -> Tensor mapping, float64). The step for entry i is
    ``max(rel_step * |theta_i|, min_step)``. Relative error per entry is
    ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, floor)``; the report keeps the
    maximum per parameter. ``samples_per_param`` limits the number of
    randomly chosen entries probed per parameter.

    With ``refine``, an entry that misses the tolerance is re-measured once
    at a tenth of the step and the smaller error kept: a ReLU or max-pool
    switch straddled by the first step rarely survives the smaller one,
    whereas a wrong backward disagrees at every step.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise InvalidArgument(f"grad_check requires float64 tensors; {name} is {p.dtype}")
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for name, p in params.items()}
    rng = np.random.Generator(np.random.PCG64(seed))
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples_per_param is not None and flat.size > samples_per_param:
            idx = np.sort(rng.choice(flat.size, samples_per_param, replace=False))
        worst = 0.0
        for i in idx:
            a = analytic[name].reshape(-1)[i]
            h = max(rel_step * abs(flat[i]), min_step)
            err = _entry_error(loss_fn, flat, i, h, a, floor)
            if refine and err >= tolerance:
                err = min(err, _entry_error(loss_fn, flat, i, h / 10.0, a, floor))
            worst = max(worst, err)
        report.errors[name] = worst
    return report
