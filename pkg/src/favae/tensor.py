"""Dense tensors with reverse-mode automatic differentiation.

The op set is exactly what a ladder time-convolution autoencoder needs:
causal 1-D convolution along time, its transpose, batch normalization,
ReLU, affine maps, reparameterized Gaussian sampling, and the handful of
elementwise/reduction primitives the losses are built from.  Everything is
numpy-backed; convolutions are lowered to GEMM via im2col.

Recording is explicit: ops append to the active :class:`Tape`, and
:func:`backward` replays it in reverse.  With no active tape, ops run
plain (evaluation mode).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_SIGMA_CLAMP = 7.0

_nan_checks = False


def set_nan_checks(enabled: bool) -> None:
    """Enable per-op finiteness checks (slow; meant for tests/debugging)."""
    global _nan_checks
    _nan_checks = enabled


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN/Inf from finite inputs."""


class Tensor:
    """A dense array plus an optional gradient of the same shape.

    ``node_id`` is assigned when an op involving this tensor is recorded on
    the active tape; leaves created with ``requires_grad=True`` (parameters)
    always accumulate gradients during :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        # set for parameters and for outputs of recorded ops; constants stay
        # out of the gradient flow entirely
        self._needs_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


class _TapeOp:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of executed primitives; execution order is already
    topological, so one reversed sweep backpropagates everything."""

    def __init__(self):
        self.ops: list[_TapeOp] = []
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, *exc) -> None:
        _pop_tape(self)

    def __len__(self) -> int:
        return len(self.ops)

    def _assign_id(self, t: Tensor) -> None:
        if t.node_id is None:
            t.node_id = self._next_id
            self._next_id += 1

    def record(self, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], None], name: str) -> None:
        for t in inputs:
            self._assign_id(t)
        self._assign_id(output)
        self.ops.append(_TapeOp(tuple(inputs), output, backward_fn, name))


_tape_stack: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _tape_stack.append(tape)


def _pop_tape(tape: Tape) -> None:
    if not _tape_stack or _tape_stack[-1] is not tape:
        raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
    _tape_stack.pop()


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _tracked(t: Tensor) -> bool:
    return t._needs_grad


def _finish(inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], None], name: str) -> Tensor:
    """Wrap op output, optionally recording it on the active tape."""
    if _nan_checks and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t._needs_grad for t in inputs):
        out._needs_grad = True
        tape.record(inputs, out, backward_fn, name)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` for every tensor reachable from ``loss``.

    Fan-out accumulates; each parameter's gradient is complete after one
    call.  ``loss`` must be scalar.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for op in reversed(tape.ops):
        g = op.output.grad
        if g is None:
            continue
        op.backward_fn(g)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        if _tracked(a):
            _accum(a, _unbroadcast(g, a.shape))
        if _tracked(b):
            _accum(b, _unbroadcast(g, b.shape))

    return _finish((a, b), out, bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        if _tracked(a):
            _accum(a, _unbroadcast(g, a.shape))
        if _tracked(b):
            _accum(b, _unbroadcast(-g, b.shape))

    return _finish((a, b), out, bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        if _tracked(a):
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if _tracked(b):
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _finish((a, b), out, bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def bwd(g):
        if _tracked(a):
            _accum(a, g * c)

    return _finish((a,), out, bwd, "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data + c

    def bwd(g):
        if _tracked(a):
            _accum(a, g)

    return _finish((a,), out, bwd, "add_scalar")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def bwd(g):
        if _tracked(a):
            _accum(a, 2.0 * a.data * g)

    return _finish((a,), out, bwd, "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        if _tracked(a):
            _accum(a, g * out)

    return _finish((a,), out, bwd, "exp")


def abs_(a: Tensor) -> Tensor:
    """Elementwise |a|; subgradient at 0 is 0."""
    out = np.abs(a.data)

    def bwd(g):
        if _tracked(a):
            _accum(a, g * np.sign(a.data))

    return _finish((a,), out, bwd, "abs")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes inside the closed interval."""
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        if _tracked(a):
            mask = (a.data >= lo) & (a.data <= hi)
            _accum(a, g * mask)

    return _finish((a,), out, bwd, "clip")


_relu_sign_sink: list | None = None


def capture_relu_signs(sink: list | None) -> None:
    """Route the sign pattern of every ReLU input into ``sink`` (gradcheck
    uses this to detect kink crossings between finite-difference points)."""
    global _relu_sign_sink
    _relu_sign_sink = sink


def relu(a: Tensor) -> Tensor:
    """max(0, a); the subgradient at 0 is taken to be 0."""
    mask = a.data > 0
    if _relu_sign_sink is not None:
        _relu_sign_sink.append(mask.copy())
    out = np.where(mask, a.data, 0.0).astype(a.data.dtype, copy=False)

    def bwd(g):
        if _tracked(a):
            _accum(a, g * mask)

    return _finish((a,), out, bwd, "relu")


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bwd(g):
        if _tracked(a):
            _accum(a, np.broadcast_to(g, a.shape))

    return _finish((a,), out, bwd, "sum_all")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        if _tracked(a):
            _accum(a, g.reshape(a.shape))

    return _finish((a,), out, bwd, "reshape")


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[B, N] @ w[M, N].T + b[M] -> [B, M]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError("affine expects 2-D x and w")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"affine dimension mismatch: x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"affine bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T + b.data

    def bwd(g):
        if _tracked(x):
            _accum(x, g @ w.data)
        if _tracked(w):
            _accum(w, g.T @ x.data)
        if _tracked(b):
            _accum(b, g.sum(axis=0))

    return _finish((x, w, b), out, bwd, "affine")


# ---------------------------------------------------------------------------
# time convolution / transposed time convolution
# ---------------------------------------------------------------------------

def conv_out_len(t: int, stride: int) -> int:
    """Output time extent of a stride-``stride`` causal conv on length ``t``."""
    return -(-t // stride)


def _as_batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 2:
        return x.data[None], True
    if x.data.ndim == 3:
        return x.data, False
    raise ValueError(f"expected [C, T] or [B, C, T], got shape {x.shape}")


def _gather_windows(xp: np.ndarray, kernel: int, stride: int, t_out: int) -> np.ndarray:
    """[B, C, Tpad] -> contiguous columns [B*t_out, C*kernel]."""
    win = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride][:, :, :t_out]
    b, c = xp.shape[0], xp.shape[1]
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b * t_out, c * kernel)


def _scatter_windows(dwin: np.ndarray, kernel: int, stride: int,
                     t_in_padded: int) -> np.ndarray:
    """Adjoint of :func:`_gather_windows`: [B, C, t_out, K] -> [B, C, Tpad]."""
    b, c, t_out, _ = dwin.shape
    xp = np.zeros((b, c, t_in_padded), dtype=dwin.dtype)
    end = stride * (t_out - 1) + 1
    for q in range(kernel):
        xp[:, :, q:q + end:stride] += dwin[:, :, :, q]
    return xp


def time_conv(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Causal convolution along time.

    ``x`` is [C_in, T] or [B, C_in, T]; ``w`` is [C_out, C_in, K].  The input
    is left-padded with K-1 zeros, so output step t sums x at input indices
    stride*t - p for p in [0, K).  Output length is ceil(T / stride).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    xd, squeezed = _as_batched(x)
    if w.data.ndim != 3:
        raise ValueError("conv weight must be [C_out, C_in, K]")
    c_out, c_in, kernel = w.shape
    if xd.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {xd.shape[1]}, weight expects {c_in}")
    if b.shape != (c_out,):
        raise ValueError(f"bias shape {b.shape} != ({c_out},)")
    n_batch, _, t_in = xd.shape
    t_out = conv_out_len(t_in, stride)

    xp = np.pad(xd, ((0, 0), (0, 0), (kernel - 1, 0)))
    cols = _gather_windows(xp, kernel, stride, t_out)
    w_rev = np.ascontiguousarray(w.data[:, :, ::-1]).reshape(c_out, c_in * kernel)
    out = (cols @ w_rev.T).reshape(n_batch, t_out, c_out).transpose(0, 2, 1) + b.data[:, None]
    if squeezed:
        out = out[0]

    def bwd(g):
        gd = g[None] if squeezed else g
        g2 = np.ascontiguousarray(gd.transpose(0, 2, 1)).reshape(n_batch * t_out, c_out)
        if _tracked(b):
            _accum(b, gd.sum(axis=(0, 2)))
        if _tracked(w):
            dw_rev = (g2.T @ cols).reshape(c_out, c_in, kernel)
            _accum(w, dw_rev[:, :, ::-1])
        if _tracked(x):
            dcols = (g2 @ w_rev).reshape(n_batch, t_out, c_in, kernel).transpose(0, 2, 1, 3)
            dxp = _scatter_windows(dcols, kernel, stride, t_in + kernel - 1)
            dx = dxp[:, :, kernel - 1:]
            _accum(x, dx[0] if squeezed else dx)

    return _finish((x, w, b), out, bwd, "time_conv")


def deconv_target_range(t_in: int, kernel: int, stride: int) -> tuple[int, int]:
    """Attainable output lengths for a transposed conv on input length ``t_in``."""
    return stride * (t_in - 1) + 1, stride * t_in + kernel - 1


def time_deconv(x: Tensor, w: Tensor, b: Tensor, stride: int,
                target_t: int) -> Tensor:
    """Transposed causal time convolution (adjoint of :func:`time_conv`).

    ``x`` is [C_in, T] or [B, C_in, T]; ``w`` is [C_in, C_out, K].  The caller
    fixes ``target_t`` so decoder lengths exactly mirror recorded encoder
    lengths; it must lie in ``deconv_target_range(T, K, stride)``.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    xd, squeezed = _as_batched(x)
    if w.data.ndim != 3:
        raise ValueError("deconv weight must be [C_in, C_out, K]")
    c_in, c_out, kernel = w.shape
    if xd.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {xd.shape[1]}, weight expects {c_in}")
    if b.shape != (c_out,):
        raise ValueError(f"bias shape {b.shape} != ({c_out},)")
    n_batch, _, t_in = xd.shape
    lo, hi = deconv_target_range(t_in, kernel, stride)
    if not lo <= target_t <= hi:
        raise ValueError(f"target_t={target_t} outside attainable [{lo}, {hi}] "
                         f"for T={t_in}, K={kernel}, stride={stride}")

    w_rev = np.ascontiguousarray(w.data[:, :, ::-1]).reshape(c_in, c_out * kernel)
    x2 = np.ascontiguousarray(xd.transpose(0, 2, 1)).reshape(n_batch * t_in, c_in)
    win = (x2 @ w_rev).reshape(n_batch, t_in, c_out, kernel).transpose(0, 2, 1, 3)
    out_p = _scatter_windows(win, kernel, stride, target_t + kernel - 1)
    out = out_p[:, :, kernel - 1:] + b.data[:, None]
    if squeezed:
        out = out[0]

    def bwd(g):
        gd = g[None] if squeezed else g
        gp = np.pad(gd, ((0, 0), (0, 0), (kernel - 1, 0)))
        dwin = sliding_window_view(gp, kernel, axis=2)[:, :, ::stride][:, :, :t_in]
        dwin2 = np.ascontiguousarray(dwin.transpose(0, 2, 1, 3)).reshape(
            n_batch * t_in, c_out * kernel)
        if _tracked(b):
            _accum(b, gd.sum(axis=(0, 2)))
        if _tracked(x):
            dx = (dwin2 @ w_rev.T).reshape(n_batch, t_in, c_in).transpose(0, 2, 1)
            _accum(x, dx[0] if squeezed else dx)
        if _tracked(w):
            dw_rev = (x2.T @ dwin2).reshape(c_in, c_out, kernel)
            _accum(w, dw_rev[:, :, ::-1])

    return _finish((x, w, b), out, bwd, "time_deconv")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics, one entry per channel."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta_shift: Tensor, state: BatchNormState,
               train: bool, momentum: float = 0.1, eps: float = 1e-5,
               update_running: bool = True) -> Tensor:
    """Normalize [B, C, T] per channel over batch x time.

    Train mode uses batch statistics and, unless ``update_running`` is off,
    folds them into ``state`` by EMA.  Eval mode normalizes with the stored
    running statistics.  Train mode needs B*T >= 2 for a defined variance.
    """
    if x.data.ndim != 3:
        raise ValueError(f"batch_norm expects [B, C, T], got shape {x.shape}")
    n_batch, channels, t_len = x.shape
    if gamma.shape != (channels,) or beta_shift.shape != (channels,):
        raise ValueError("gamma/beta must be per-channel vectors")
    n = n_batch * t_len
    if train:
        if n < 2:
            raise ValueError("batch_norm train mode needs B*T >= 2")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        if update_running:
            unbiased = var * (n / (n - 1))
            state.running_mean += momentum * (mean - state.running_mean)
            state.running_var += momentum * (unbiased - state.running_var)
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[:, None]) * inv_std[:, None]
    out = gamma.data[:, None] * x_hat + beta_shift.data[:, None]

    def bwd(g):
        if _tracked(gamma):
            _accum(gamma, (g * x_hat).sum(axis=(0, 2)))
        if _tracked(beta_shift):
            _accum(beta_shift, g.sum(axis=(0, 2)))
        if _tracked(x):
            gx = g * gamma.data[:, None]
            if train:
                s1 = gx.sum(axis=(0, 2), keepdims=True)
                s2 = (gx * x_hat).sum(axis=(0, 2), keepdims=True)
                dx = inv_std[:, None] * (gx - s1 / n - x_hat * s2 / n)
            else:
                dx = gx * inv_std[:, None]
            _accum(x, dx)

    return _finish((x, gamma, beta_shift), out.astype(x.data.dtype, copy=False),
                   bwd, "batch_norm")


# ---------------------------------------------------------------------------
# reparameterized sampling
# ---------------------------------------------------------------------------

class RngStream:
    """Deterministic PCG64 stream: same (seed, key) => same draws everywhere."""

    algorithm = "pcg64"

    def __init__(self, seed: int, key: int = 0):
        self.seed = int(seed)
        self.key = int(key)
        self.draws = 0
        self._bitgen = np.random.PCG64(np.random.SeedSequence([self.seed, self.key]))
        self._gen = np.random.Generator(self._bitgen)

    def standard_normal(self, shape, dtype=np.float64) -> np.ndarray:
        arr = self._gen.standard_normal(shape, dtype=dtype)
        self.draws += arr.size
        return arr

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "key": self.key, "draws": self.draws,
                "algorithm": self.algorithm, "bitgen": self._bitgen.state}

    def set_state(self, state: dict) -> None:
        if state.get("algorithm") != self.algorithm:
            raise ValueError(f"rng algorithm mismatch: {state.get('algorithm')}")
        self.seed = int(state["seed"])
        self.key = int(state["key"])
        self.draws = int(state["draws"])
        self._bitgen.state = state["bitgen"]


def reparameterize(mu: Tensor, log_sigma: Tensor, rng: RngStream | None) -> Tensor:
    """mu + exp(log_sigma) * eps with eps ~ N(0, 1) from ``rng``.

    log_sigma is clamped to [-7, 7] before exponentiation.  Gradients flow to
    mu and log_sigma only.  ``rng=None`` forces eps = 0 (deterministic pass).
    """
    if mu.shape != log_sigma.shape:
        raise ValueError(f"mu shape {mu.shape} != log_sigma shape {log_sigma.shape}")
    clamped = np.clip(log_sigma.data, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
    sigma = np.exp(clamped)
    if rng is None:
        eps = np.zeros_like(mu.data)
    else:
        eps = rng.standard_normal(mu.shape, dtype=mu.data.dtype)
    out = mu.data + sigma * eps

    def bwd(g):
        if _tracked(mu):
            _accum(mu, g)
        if _tracked(log_sigma):
            mask = (log_sigma.data >= -LOG_SIGMA_CLAMP) & (log_sigma.data <= LOG_SIGMA_CLAMP)
            _accum(log_sigma, g * sigma * eps * mask)

    return _finish((mu, log_sigma), out, bwd, "reparameterize")


# ---------------------------------------------------------------------------
# parameter initialization helpers
# ---------------------------------------------------------------------------

def he_normal(shape: tuple[int, ...], fan_in: int, rng: RngStream,
              dtype=np.float32) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def linear_normal(shape: tuple[int, ...], fan_in: int, rng: RngStream,
                  dtype=np.float32) -> Tensor:
    std = math.sqrt(1.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def zeros_param(shape: tuple[int, ...], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape: tuple[int, ...], dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
