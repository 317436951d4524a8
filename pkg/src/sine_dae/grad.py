"""Minimal reverse-mode differentiation for the handful of ops the model needs.

Arrays are float64 numpy arrays. Convolutions operate on batched 3-D arrays
``(batch, channels, length)``; 2-D inputs are treated as a batch of one.
All convolutions use cross-correlation semantics (no kernel flip).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LN10 = math.log(10.0)
SNR_EPS = 1e-12


class DimensionError(ValueError):
    """Array shapes are inconsistent for the requested operation."""


class TapeStateError(RuntimeError):
    """Backward was requested on a tape that cannot provide it."""


class UndefinedReferenceError(ValueError):
    """A reference signal has zero energy."""


# ---------------------------------------------------------------------------
# padding helpers


def frame_count(n: int, stride: int) -> int:
    """Number of analysis frames ``ceil(n / stride)``."""
    return -(-n // stride)


def same_frames_padding(n: int, kernel_len: int, stride: int) -> tuple[int, int]:
    """Zero padding that makes a strided conv emit exactly ``ceil(n/stride)`` frames.

    The padding is split symmetrically; an odd remainder goes to the right.
    """
    t = frame_count(n, stride)
    total = max(0, (t - 1) * stride + kernel_len - n)
    left = total // 2
    return left, total - left


def same_length_padding(kernel_len: int, dilation: int) -> tuple[int, int]:
    total = (kernel_len - 1) * dilation
    left = total // 2
    return left, total - left


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise DimensionError(f"expected {ndim - 1}-D or {ndim}-D array, got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# raw forward / adjoint kernels


def conv1d(
    x: np.ndarray,
    kernels: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
    pad: tuple[int, int] = (0, 0),
    out_len: int | None = None,
) -> np.ndarray:
    """Strided, dilated cross-correlation.

    ``x`` is ``(B, Cin, N)`` (or ``(Cin, N)``), ``kernels`` is ``(Cout, Cin, L)``.
    Output frame ``t`` of channel ``o`` is
    ``sum_i sum_l kernels[o, i, l] * xpad[i, t*stride + l*dilation]``.
    """
    if stride < 1 or dilation < 1:
        raise DimensionError("stride and dilation must be >= 1")
    xb, squeeze = _as_batch(np.asarray(x, dtype=np.float64), 3)
    if kernels.ndim != 3 or kernels.shape[1] != xb.shape[1]:
        raise DimensionError(f"kernels {kernels.shape} do not match input channels {xb.shape[1]}")
    cout, cin, klen = kernels.shape
    xp = np.pad(xb, ((0, 0), (0, 0), pad)) if any(pad) else xb
    span = (klen - 1) * dilation + 1
    if span > xp.shape[-1]:
        raise DimensionError(f"kernel span {span} exceeds padded length {xp.shape[-1]}")
    win = sliding_window_view(xp, span, axis=-1)[..., ::stride, ::dilation]
    if out_len is not None:
        if win.shape[2] < out_len:
            raise DimensionError(f"only {win.shape[2]} frames available, {out_len} requested")
        win = win[:, :, :out_len]
    out = np.tensordot(win, kernels, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def _scatter_taps(contrib: np.ndarray, length: int, stride: int, dilation: int) -> np.ndarray:
    """Overlap-add ``contrib[b, t, i, l]`` into ``out[b, i, t*stride + l*dilation]``."""
    b, t, cin, klen = contrib.shape
    out = np.zeros((b, cin, length))
    stop = (t - 1) * stride + 1
    view = contrib.transpose(0, 2, 3, 1)  # (B, Cin, L, T)
    for tap in range(klen):
        start = tap * dilation
        out[:, :, start:start + stop:stride] += view[:, :, tap]
    return out


def conv1d_input_grad(
    grad_out: np.ndarray,
    kernels: np.ndarray,
    in_len: int,
    stride: int = 1,
    dilation: int = 1,
    pad: tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Adjoint of :func:`conv1d` with respect to its input."""
    gb, squeeze = _as_batch(grad_out, 3)
    contrib = np.tensordot(gb.transpose(0, 2, 1), kernels, axes=([2], [0]))  # (B, T, Cin, L)
    full = _scatter_taps(contrib, in_len + pad[0] + pad[1], stride, dilation)
    out = full[:, :, pad[0]:pad[0] + in_len]
    return out[0] if squeeze else out


def conv1d_kernel_grad(
    grad_out: np.ndarray,
    x: np.ndarray,
    klen: int,
    stride: int = 1,
    dilation: int = 1,
    pad: tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Gradient of :func:`conv1d` with respect to the kernels."""
    gb, _ = _as_batch(grad_out, 3)
    xb, _ = _as_batch(x, 3)
    xp = np.pad(xb, ((0, 0), (0, 0), pad)) if any(pad) else xb
    span = (klen - 1) * dilation + 1
    win = sliding_window_view(xp, span, axis=-1)[..., ::stride, ::dilation][:, :, :gb.shape[2]]
    return np.tensordot(gb, win, axes=([0, 2], [0, 2]))


def conv_transpose1d(
    activations: np.ndarray,
    kernels: np.ndarray,
    stride: int,
    out_len: int,
    offset: int = 0,
) -> np.ndarray:
    """Overlap-add synthesis: ``out[n] = sum_c sum_t A[c, t] * W[c, n + offset - t*stride]``.

    ``activations`` is ``(B, C, T)`` (or ``(C, T)``), ``kernels`` is ``(C, L)``.
    With ``offset`` equal to the left padding of the matching :func:`conv1d`
    this is that conv's exact adjoint (single input channel).
    """
    ab, squeeze = _as_batch(np.asarray(activations, dtype=np.float64), 3)
    if kernels.ndim != 2 or kernels.shape[0] != ab.shape[1]:
        raise DimensionError(f"kernels {kernels.shape} do not match {ab.shape[1]} channels")
    t = ab.shape[2]
    if t != frame_count(out_len, stride):
        raise DimensionError(f"{t} frames at stride {stride} inconsistent with length {out_len}")
    frames = np.tensordot(ab.transpose(0, 2, 1), kernels, axes=([2], [0]))  # (B, T, L)
    full = _overlap_add(frames, stride)
    out = _crop(full, offset, out_len)
    return out[0] if squeeze else out


def _overlap_add(frames: np.ndarray, stride: int) -> np.ndarray:
    b, t, klen = frames.shape
    return _scatter_taps(frames[:, :, None, :], (t - 1) * stride + klen, stride, 1)[:, 0]


def _crop(full: np.ndarray, offset: int, out_len: int) -> np.ndarray:
    out = np.zeros(full.shape[:-1] + (out_len,))
    avail = full[..., offset:offset + out_len]
    out[..., :avail.shape[-1]] = avail
    return out


def _uncrop(grad: np.ndarray, offset: int, full_len: int) -> np.ndarray:
    full = np.zeros(grad.shape[:-1] + (full_len,))
    seg = full[..., offset:offset + grad.shape[-1]]
    seg[...] = grad[..., :seg.shape[-1]]
    return full


def conv_transpose1d_grads(
    grad_out: np.ndarray,
    activations: np.ndarray,
    kernels: np.ndarray,
    stride: int,
    offset: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv_transpose1d` w.r.t. activations and kernels."""
    gb, squeeze = _as_batch(grad_out, 2)
    ab, _ = _as_batch(activations, 3)
    t, klen = ab.shape[2], kernels.shape[1]
    full = _uncrop(gb, offset, (t - 1) * stride + klen)
    win = sliding_window_view(full, klen, axis=-1)[:, ::stride][:, :t]  # (B, T, L)
    ga = np.tensordot(win, kernels, axes=([2], [1])).transpose(0, 2, 1)
    gw = np.tensordot(ab, win, axes=([0, 2], [0, 1]))
    ga = np.ascontiguousarray(ga)
    return (ga[0] if squeeze else ga), gw


def modulated_cosine(
    freq: np.ndarray,
    phase: np.ndarray,
    envelope: np.ndarray | None,
    length: int,
    squared: bool = True,
) -> np.ndarray:
    """Kernel bank ``W[c, n] = cos(2*pi*g(f_c)*n + phi_c) * b[c, n]``, ``g(f) = f**2`` or ``f``."""
    n = np.arange(length, dtype=np.float64)
    eff = freq * freq if squared else freq
    theta = 2.0 * np.pi * eff[:, None] * n + phase[:, None]
    w = np.cos(theta)
    return w if envelope is None else w * envelope


def total_variation(a: np.ndarray) -> np.ndarray:
    """Mean l1 first difference across rows and columns of each ``(C, T)`` map."""
    ab, squeeze = _as_batch(a, 3)
    c, t = ab.shape[1:]
    dc = np.abs(np.diff(ab, axis=1)).sum(axis=(1, 2))
    dt = np.abs(np.diff(ab, axis=2)).sum(axis=(1, 2))
    out = (dc + dt) / (c * t)
    return out[0] if squeeze else out


def neg_snr(ref: np.ndarray, est: np.ndarray, eps: float = SNR_EPS) -> np.ndarray:
    """``-10 log10(||ref||^2 / max(||ref - est||^2, eps))`` along the last axis.

    The error energy is floored rather than offset, so the value is exact
    whenever the error exceeds ``eps`` and finite at perfect reconstruction.
    """
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise DimensionError(f"reference {ref.shape} and estimate {est.shape} differ")
    num = np.sum(ref * ref, axis=-1)
    if np.any(num <= 0.0):
        raise UndefinedReferenceError("reference has zero energy; filter silent segments first")
    den = np.maximum(np.sum((ref - est) ** 2, axis=-1), eps)
    return 10.0 * (np.log10(den) - np.log10(num))


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class Var:
    """A node value on a tape. Leaves with ``requires_grad`` are parameters."""

    data: np.ndarray
    requires_grad: bool = False
    name: str = ""
    grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class _Node:
    out: Var
    inputs: tuple[Var, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Records primitive ops in forward order; :meth:`backward` replays them reversed."""

    nodes: list[_Node] = field(default_factory=list)
    params: dict[str, Var] = field(default_factory=dict)

    def param(self, name: str, value: np.ndarray) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = v
        return v

    def const(self, value: np.ndarray) -> Var:
        return Var(np.asarray(value, dtype=np.float64))

    def _record(self, data, inputs, backward) -> Var:
        out = Var(data, requires_grad=any(v.requires_grad for v in inputs))
        if out.requires_grad:
            self.nodes.append(_Node(out, tuple(inputs), backward))
        return out

    # -- ops ---------------------------------------------------------------

    def conv1d(self, x: Var, k: Var, stride=1, dilation=1, pad=(0, 0), out_len=None) -> Var:
        y = conv1d(x.data, k.data, stride, dilation, pad, out_len)

        def back(g):
            gx = conv1d_input_grad(g, k.data, x.shape[-1], stride, dilation, pad) if x.requires_grad else None
            gk = conv1d_kernel_grad(g, x.data, k.shape[-1], stride, dilation, pad) if k.requires_grad else None
            return gx, gk

        return self._record(y, (x, k), back)

    def conv_transpose1d(self, a: Var, w: Var, stride: int, out_len: int, offset: int = 0) -> Var:
        y = conv_transpose1d(a.data, w.data, stride, out_len, offset)

        def back(g):
            return conv_transpose1d_grads(g, a.data, w.data, stride, offset)

        return self._record(y, (a, w), back)

    def relu(self, x: Var) -> Var:
        mask = x.data > 0
        return self._record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))

    def add(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise DimensionError(f"cannot add {a.shape} and {b.shape}")
        return self._record(a.data + b.data, (a, b), lambda g: (g, g))

    def scale(self, a: Var, s: float) -> Var:
        return self._record(a.data * s, (a,), lambda g: (g * s,))

    def inner(self, a: Var, weights: np.ndarray) -> Var:
        """Scalar ``sum(a * weights)`` with constant weights."""
        return self._record(np.asarray(np.sum(a.data * weights)), (a,), lambda g: (g * weights,))

    def mean(self, a: Var) -> Var:
        n = a.data.size
        return self._record(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))

    def square(self, a: Var) -> Var:
        return self._record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))

    def modulated_cosine(self, f: Var, phi: Var, b: Var | None, length: int, squared: bool = True) -> Var:
        n = np.arange(length, dtype=np.float64)
        eff = f.data * f.data if squared else f.data
        theta = 2.0 * np.pi * eff[:, None] * n + phi.data[:, None]
        cos, sin = np.cos(theta), np.sin(theta)
        env = np.ones((1, length)) if b is None else b.data
        dfeff = 2.0 * f.data if squared else np.ones_like(f.data)

        def back(g):
            gs = -g * sin * env
            gf = (gs * n).sum(axis=1) * 2.0 * np.pi * dfeff
            gphi = gs.sum(axis=1)
            if b is None:
                return gf, gphi
            return gf, gphi, g * cos

        inputs = (f, phi) if b is None else (f, phi, b)
        return self._record(cos * env, inputs, back)

    def total_variation(self, a: Var) -> Var:
        ab = a.data if a.data.ndim == 3 else a.data[None]
        c, t = ab.shape[1:]

        def back(g):
            g = np.reshape(g, (-1, 1, 1)) / (c * t)
            sc = np.sign(np.diff(ab, axis=1)) * g
            st = np.sign(np.diff(ab, axis=2)) * g
            out = np.zeros_like(ab)
            out[:, 1:, :] += sc
            out[:, :-1, :] -= sc
            out[:, :, 1:] += st
            out[:, :, :-1] -= st
            return (out.reshape(a.shape),)

        return self._record(total_variation(a.data), (a,), back)

    def neg_snr(self, ref: Var, est: Var, eps: float = SNR_EPS) -> Var:
        val = neg_snr(ref.data, est.data, eps)
        diff = est.data - ref.data
        err = np.sum(diff * diff, axis=-1, keepdims=True)
        den = np.maximum(err, eps)
        live = err > eps  # below the floor the error term is constant
        num = np.sum(ref.data * ref.data, axis=-1, keepdims=True)

        def back(g):
            g = np.reshape(g, den.shape)
            gest = g * live * 20.0 * diff / (LN10 * den)
            gref = -gest - g * 20.0 * ref.data / (LN10 * num)
            return gref, gest

        return self._record(val, (ref, est), back)

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Propagate d(loss) through every recorded op; returns parameter grads by name."""
        if all(n.out is not loss for n in self.nodes):
            raise TapeStateError("loss was not produced by this tape (run the forward pass first)")
        if loss.data.size != 1:
            raise TapeStateError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for var, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not var.requires_grad:
                    continue
                key = id(var)
                grads[key] = grads[key] + gi if key in grads else gi
        out = {}
        for name, p in self.params.items():
            p.grad = grads.get(id(p), np.zeros_like(p.data))
            if p.grad.shape != p.data.shape:
                p.grad = np.reshape(p.grad, p.data.shape)
            out[name] = p.grad
        return out


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    def failures(self) -> dict[str, float]:
        return {k: e for k, e in self.max_rel_error.items() if e > self.tol}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    f: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8,
) -> GradcheckReport:
    """Compare analytic grads against central differences of ``f`` at every entry.

    ``f`` maps a parameter dict to a scalar. Never raises on mismatch; inspect
    the returned report.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    errors = {}
    for name, arr in work.items():
        numeric = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(work)
            flat[i] = orig - h
            fm = f(work)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        err = relative_error(np.asarray(analytic[name]), numeric, floor)
        errors[name] = float(err.max()) if err.size else 0.0
    return GradcheckReport(errors, tol)
