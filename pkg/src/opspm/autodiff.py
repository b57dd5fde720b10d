"""Dense-tensor engine with reverse-mode differentiation, Adam, and the LR schedule.

Tensors wrap float64/complex128 numpy arrays. Ops record parent links and
per-parent adjoint closures; a Tape is the topologically ordered node list
reachable from one output, replayable after leaf edits (used by the
finite-difference gradient check). Complex tensors are differentiated in the
real-pair convention: the adjoint of any R->C embedding is the real part,
applied centrally during accumulation.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.fft as sfft



class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "_vjps", "_refwd")

    # make ndarray <op> Tensor defer to our reflected dunders
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), vjps=(), refwd=None):
        data = np.asarray(data)
        if data.dtype.kind in "iub":
            data = data.astype(np.float64)
        if data.dtype not in (np.dtype(np.float64), np.dtype(np.complex128)):
            raise TypeError(f"unsupported dtype {data.dtype}; use float64 or complex128")
        self.data = data
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self.parents = parents
        self._vjps = vjps
        self._refwd = refwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self.parents

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # scalar-friendly arithmetic so physics formulas read naturally
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def leaf(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.complex128 if np.iscomplexobj(data) else np.float64),
                  requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data))


def _coerce(g, ref):
    # adjoint of the real->complex embedding is Re
    if ref.dtype.kind != "c" and np.iscomplexobj(g):
        g = g.real
    return g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(parents, forward, *vjps):
    t = Tensor(forward(), parents=parents, vjps=vjps, refwd=forward)
    return t


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    return _node((a, b), lambda: a.data + b.data,
                 lambda g: _unbroadcast(g, a.data.shape),
                 lambda g: _unbroadcast(g, b.data.shape))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node((a, b), lambda: a.data - b.data,
                 lambda g: _unbroadcast(g, a.data.shape),
                 lambda g: _unbroadcast(-g, b.data.shape))


def neg(a: Tensor) -> Tensor:
    return _node((a,), lambda: -a.data, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node((a, b), lambda: a.data * b.data,
                 lambda g: _unbroadcast(np.conj(b.data) * g, a.data.shape),
                 lambda g: _unbroadcast(np.conj(a.data) * g, b.data.shape))


def _quiet_div(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        return x / y


def div(a: Tensor, b: Tensor) -> Tensor:
    return _node((a, b), lambda: _quiet_div(a.data, b.data),
                 lambda g: _unbroadcast(_quiet_div(g, np.conj(b.data)), a.data.shape),
                 lambda g: _unbroadcast(-g * np.conj(_quiet_div(a.data, b.data**2)),
                                        b.data.shape))


def square(a: Tensor) -> Tensor:
    return _node((a,), lambda: a.data * a.data,
                 lambda g: 2.0 * np.conj(a.data) * g)


def sqrt(a: Tensor) -> Tensor:
    return _node((a,), lambda: np.sqrt(a.data),
                 lambda g: g * np.conj(0.5 / np.sqrt(a.data)))


def _quiet_exp(x):
    with np.errstate(over="ignore"):
        return np.exp(x)


def exp(a: Tensor) -> Tensor:
    return _node((a,), lambda: _quiet_exp(a.data),
                 lambda g: g * np.conj(_quiet_exp(a.data)))


def tanh(a: Tensor) -> Tensor:
    return _node((a,), lambda: np.tanh(a.data),
                 lambda g: g * np.conj(1.0 - np.tanh(a.data) ** 2))


def asinh(a: Tensor) -> Tensor:
    return _node((a,), lambda: np.arcsinh(a.data),
                 lambda g: g * np.conj(1.0 / np.sqrt(1.0 + a.data**2)))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-form GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3))).

    The forward tanh is saved; the adjoint reuses it, so inference pays
    nothing for the derivative.
    """
    saved = {}

    def fwd():
        x = a.data
        u = x * x
        u *= _GELU_A
        u += 1.0
        u *= x
        u *= _GELU_C
        np.tanh(u, out=u)
        saved["t"] = u
        y = u + 1.0
        y *= x
        y *= 0.5
        return y

    def back(g):
        x = a.data
        t = saved["t"]
        d = x * x
        d *= 3.0 * _GELU_A * 0.5 * _GELU_C
        d += 0.5 * _GELU_C
        d *= x                      # x c/2 (1 + 3a x^2)
        s = t * t
        np.subtract(1.0, s, out=s)
        d *= s
        d += 0.5
        d += 0.5 * t
        d *= g
        return d

    return _node((a,), fwd, back)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    return _node((a,), lambda: np.clip(a.data, lo, hi),
                 lambda g: g * ((a.data >= lo) & (a.data <= hi)))


def real_part(a: Tensor) -> Tensor:
    return _node((a,), lambda: a.data.real.copy(),
                 lambda g: g.astype(np.complex128))


# ------------------------------------------------------------ shape plumbing

def broadcast_axis(a: Tensor, axis: int, size: int) -> Tensor:
    def fwd():
        return np.repeat(np.expand_dims(a.data, axis), size, axis=axis)

    return _node((a,), fwd, lambda g: g.sum(axis=axis))


def pad2d(a: Tensor, pad: tuple[int, int]) -> Tensor:
    pr, pc = pad
    width = [(0, 0)] * (a.data.ndim - 2) + [(0, pr), (0, pc)]

    def fwd():
        return np.pad(a.data, width)

    def back(g):
        sl = (Ellipsis, slice(0, g.shape[-2] - pr), slice(0, g.shape[-1] - pc))
        return g[sl]

    return _node((a,), fwd, back)


def crop2d(a: Tensor, crop: tuple[int, int]) -> Tensor:
    cr, cc = crop
    H, W = a.data.shape[-2] - cr, a.data.shape[-1] - cc

    def back(g):
        width = [(0, 0)] * (g.ndim - 2) + [(0, cr), (0, cc)]
        return np.pad(g, width)

    return _node((a,), lambda: a.data[..., :H, :W].copy(), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.data.shape}")
    return _node((a,), lambda: a.data.T.copy(), lambda g: g.T)


def surface_row(a: Tensor) -> Tensor:
    """Last entry along the second-to-last axis (the outermost radial cell)."""
    def back(g):
        z = np.zeros(a.data.shape, dtype=a.data.dtype)
        z[..., -1, :] = g
        return z

    return _node((a,), lambda: a.data[..., -1, :].copy(), back)


def sum_tensor(a: Tensor, axes=None, keepdims=False) -> Tensor:
    def back(g):
        if axes is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axes)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _node((a,), lambda: a.data.sum(axis=axes, keepdims=keepdims), back)


def mean_tensor(a: Tensor, axes=None, keepdims=False) -> Tensor:
    n = a.data.size if axes is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axes)])
    return mul(sum_tensor(a, axes, keepdims), Tensor(np.float64(1.0 / n)))


# ------------------------------------------------------------- linear layers

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    return _node((a, b), lambda: a.data @ b.data,
                 lambda g: g @ np.conj(b.data).T,
                 lambda g: np.conj(a.data).T @ g)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.shape[-1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"affine shape mismatch: x{x.data.shape} w{w.data.shape} b{b.data.shape}")

    def back_w(g):
        return x.data.reshape(-1, x.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    return _node((x, w, b), lambda: x.data @ w.data + b.data,
                 lambda g: g @ w.data.T,
                 back_w,
                 lambda g: g.reshape(-1, g.shape[-1]).sum(axis=0))


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise channel mix: x (B,C,H,W), w (O,C), b (O,)."""
    B, C, H, W = x.data.shape
    O = w.data.shape[0]
    if w.data.shape[1] != C or b.data.shape != (O,):
        raise ValueError(f"conv1x1 shape mismatch: x{x.data.shape} w{w.data.shape} b{b.data.shape}")

    def fwd():
        y = np.matmul(w.data, x.data.reshape(B, C, H * W))
        return y.reshape(B, O, H, W) + b.data[None, :, None, None]

    def back_x(g):
        return np.matmul(w.data.T, g.reshape(B, O, H * W)).reshape(B, C, H, W)

    def back_w(g):
        gf = g.reshape(B, O, H * W)
        xf = x.data.reshape(B, C, H * W)
        return np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0)

    return _node((x, w, b), fwd, back_x, back_w,
                 lambda g: g.sum(axis=(0, 2, 3)))


def _windows3x3(x):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))


def dwconv3x3(x: Tensor, k: Tensor) -> Tensor:
    """Depthwise same-padded 3x3 convolution: x (B,C,H,W), k (C,3,3).

    The adjoint w.r.t. the field is correlation with the flipped kernel;
    both directions run as one strided-window einsum pass.
    """
    B, C, H, W = x.data.shape
    if k.data.shape != (C, 3, 3):
        raise ValueError(f"dwconv3x3 kernel must be ({C},3,3), got {k.data.shape}")

    return _node(
        (x, k),
        lambda: np.einsum("bchwij,cij->bchw", _windows3x3(x.data), k.data),
        lambda g: np.einsum("bchwij,cij->bchw", _windows3x3(g),
                            k.data[:, ::-1, ::-1]),
        lambda g: np.einsum("bchwij,bchw->cij", _windows3x3(x.data), g))


# -------------------------------------------------------------- spectral ops

def fft2(a: Tensor) -> Tensor:
    HW = a.data.shape[-2] * a.data.shape[-1]
    return _node((a,), lambda: sfft.fft2(a.data),
                 lambda g: HW * sfft.ifft2(g))


def ifft2(a: Tensor) -> Tensor:
    HW = a.data.shape[-2] * a.data.shape[-1]
    return _node((a,), lambda: sfft.ifft2(a.data),
                 lambda g: sfft.fft2(g) / HW)


def mode_gather(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def back(g):
        z = np.zeros(a.data.shape, dtype=a.data.dtype)
        z[..., rows[:, None], cols[None, :]] = g
        return z

    return _node((a,),
                 lambda: a.data[..., rows[:, None], cols[None, :]].copy(), back)


def mode_scatter(a: Tensor, rows: np.ndarray, cols: np.ndarray, hw: tuple[int, int]) -> Tensor:
    """Place a kept-mode block into a zero full spectrum with Hermitian completion.

    cols must be the contiguous non-negative frequencies 0..k_t-1; rows are
    wrapped signed row frequencies. Column 0 is split half/half between each
    row and its mirror so the result is exactly conjugate-symmetric.
    """
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if cols[0] != 0:
        raise ValueError("mode_scatter expects column frequencies starting at 0")
    H, W = hw
    mrows = (-rows) % H
    mcols = (-cols) % W

    def fwd():
        b = a.data
        out = np.zeros(b.shape[:-2] + (H, W), dtype=np.complex128)
        out[..., rows[:, None], cols[None, 1:]] = b[..., :, 1:]
        out[..., mrows[:, None], mcols[None, 1:]] = np.conj(b[..., :, 1:])
        out[..., rows, 0] += 0.5 * b[..., :, 0]
        out[..., mrows, 0] += 0.5 * np.conj(b[..., :, 0])
        return out

    def back(g):
        gb = np.empty(a.data.shape, dtype=np.complex128)
        gb[..., :, 1:] = g[..., rows[:, None], cols[None, 1:]] \
            + np.conj(g[..., mrows[:, None], mcols[None, 1:]])
        gb[..., :, 0] = 0.5 * (g[..., rows, 0] + np.conj(g[..., mrows, 0]))
        return gb

    return _node((a,), fwd, back)


def complex_mode_mul(w: Tensor, v: Tensor) -> Tensor:
    """Per-mode channel mixing: w (kr,kt,Cin,Cout) complex, v (B,Cin,kr,kt)."""
    if v.data.ndim != 4 or w.data.ndim != 4 or w.data.shape[:2] != v.data.shape[2:] \
            or w.data.shape[2] != v.data.shape[1]:
        raise ValueError(f"complex_mode_mul shape mismatch: w{w.data.shape} v{v.data.shape}")

    return _node((w, v),
                 lambda: np.einsum("ijco,bcij->boij", w.data, v.data),
                 lambda g: np.einsum("bcij,boij->ijco", np.conj(v.data), g),
                 lambda g: np.einsum("ijco,boij->bcij", np.conj(w.data), g))


def spectral_mix(modes: Tensor, v: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Fused ifft2(scatter(modes . gather(fft2 v))) on the real half-spectrum.

    Numerically identical to the composed ops for real v: the mirrored
    negative-frequency half is implied by Hermitian symmetry (rfft along t),
    and the radial transform only ever touches the kept columns. One tape
    node instead of six keeps the training loop fast.
    """
    B, C, H, W = v.data.shape
    kr, kt = modes.data.shape[:2]
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    mrows = (-rows) % H
    O = modes.data.shape[3]
    HW = H * W
    Wr = W // 2 + 1
    saved = {}
    memo = {}

    def _gather(x):
        # rfft over t, keep cols, fft over r, keep rows -> (B, ch, kr, kt)
        xc = sfft.rfft(x, axis=-1)[..., cols]
        return sfft.fft(xc, axis=-2)[..., rows, :]

    def _scatter_inverse(blk, ch, w_col0, scale):
        # row-Hermitian placement at col 0, then the two inverse transforms
        z = np.zeros((B, ch, H, kt), dtype=np.complex128)
        z[..., rows[:, None], np.arange(1, kt)[None, :]] = blk[..., 1:]
        z[..., rows, 0] += w_col0 * blk[..., 0]
        z[..., mrows, 0] += w_col0 * np.conj(blk[..., 0])
        if scale != 1.0:
            z *= scale
        half = np.zeros((B, ch, H, Wr), dtype=np.complex128)
        half[..., cols] = sfft.ifft(z, axis=-2)
        return sfft.irfft(half, axis=-1, n=W)

    def fwd():
        block = _gather(v.data)
        saved["block"] = block
        mixed = np.einsum("ijco,bcij->boij", modes.data, block)
        return _scatter_inverse(mixed, O, 0.5, 1.0)

    def gbar(g):
        if memo.get("gid") != id(g):
            gm = _gather(g) / HW
            gm[..., 1:] *= 2.0
            memo["gid"] = id(g)
            memo["gm"] = gm
        return memo["gm"]

    def back_modes(g):
        return np.einsum("bcij,boij->ijco", np.conj(saved["block"]), gbar(g))

    def back_v(g):
        gb = np.einsum("ijco,boij->bcij", np.conj(modes.data), gbar(g))
        # the extra 0.5 on positive columns pairs with the doubled gbar weights
        gb[..., 1:] *= 0.5
        return _scatter_inverse(gb, C, 0.5, float(HW))

    return _node((modes, v), fwd, back_modes, back_v)


OPS = {
    "add": add, "elementwise-mul": mul, "matmul": matmul, "affine": affine,
    "gelu": gelu, "pad2d": pad2d, "crop2d": crop2d, "broadcast-axis": broadcast_axis,
    "fft2": fft2, "ifft2": ifft2, "complex-mode-mul": complex_mode_mul,
    "conv-1x1-channel-mix": conv1x1, "depthwise-conv-3x3": dwconv3x3,
}


# ---------------------------------------------------------------------- tape

class Tape:
    """Topologically ordered view of the graph below one output tensor."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._topo(output)

    @staticmethod
    def _topo(root):
        order, seen, stack = [], set(), [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        return order

    @property
    def leaves(self):
        return [t for t in self.nodes if t.is_leaf and t.requires_grad]

    def replay(self):
        for t in self.nodes:
            if t._refwd is not None:
                t.data = np.asarray(t._refwd())

    def backward(self):
        """Reverse sweep; leaves unreachable from the output keep zero grads."""
        if self.output.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {self.output.data.shape}")
        for t in self.nodes:
            t.grad = None
        self.output.grad = np.ones_like(self.output.data)
        for t in reversed(self.nodes):
            if t.grad is None or not t.parents:
                continue
            g = t.grad
            for p, fn in zip(t.parents, t._vjps):
                if not p.requires_grad:
                    continue
                pg = _coerce(np.asarray(fn(g)), p.data)
                p.grad = pg if p.grad is None else p.grad + pg
        for t in self.leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def backward(loss: Tensor) -> Tape:
    tape = Tape(loss)
    tape.backward()
    return tape


def finite_diff_check(tape: Tape, leaf_tensor: Tensor, h: float = 1e-5) -> float:
    """Worst relative error of the backward gradient vs central differences.

    Complex leaves are perturbed along the real and imaginary directions
    separately (the gradient stores dL/dRe + i dL/dIm). Denominators floor
    at 1e-8 so true zeros do not blow up the ratio.
    """
    if not h > 0:
        raise ValueError(f"h must be > 0, got {h}")
    tape.backward()
    g = leaf_tensor.grad.copy()
    base = leaf_tensor.data.copy()
    directions = [1.0, 1.0j] if np.iscomplexobj(base) else [1.0]
    worst = 0.0
    for direction in directions:
        num = np.zeros(base.shape)
        for idx in np.ndindex(base.shape):
            for sign in (+1.0, -1.0):
                leaf_tensor.data = base.copy()
                leaf_tensor.data[idx] += sign * direction * h
                tape.replay()
                num[idx] += sign * float(np.real(tape.output.data))
            num[idx] /= 2.0 * h
        gpart = g.real if direction == 1.0 else g.imag
        denom = np.maximum(np.abs(gpart), 1e-8)
        worst = max(worst, float(np.max(np.abs(num - gpart) / denom)))
    leaf_tensor.data = base
    tape.replay()
    return worst


# ---------------------------------------------------------------- optimizer

class AdamState:
    """First/second moment buffers; complex parameters use their float views."""

    def __init__(self, params):
        self.m = [np.zeros_like(self._flt(p.data)) for p in params]
        self.v = [np.zeros_like(self._flt(p.data)) for p in params]
        self.step = 0

    @staticmethod
    def _flt(x):
        return x.view(np.float64) if np.iscomplexobj(x) else x


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One in-place Adam update over aligned parameter/gradient lists."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        gf = np.ascontiguousarray(g).view(np.float64) if np.iscomplexobj(g) else g
        m *= beta1
        m += (1.0 - beta1) * gf
        v *= beta2
        v += (1.0 - beta2) * gf * gf
        pf = AdamState._flt(p.data)
        pf -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(progress: float, warmup_frac: float, lr_max: float = 1e-2,
              lr_min: float = 1e-4) -> float:
    """Linear warmup 0 -> lr_max, then cosine decay lr_max -> lr_min."""
    if not 0.0 < warmup_frac < 1.0:
        raise ValueError(f"warmup_frac must be in (0,1), got {warmup_frac}")
    if progress <= warmup_frac:
        return lr_max * progress / warmup_frac
    s = (progress - warmup_frac) / (1.0 - warmup_frac)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * s))
