"""Minimal reverse-mode autodiff over dense float64 tensors.

Just enough machinery to express and train a small convolutional
refinement network: elementwise arithmetic, leaky ReLU, strided conv2d
with zero padding, nearest-neighbor x2 upsampling, channel concat and a
masked mean-absolute reduction. Every operation is recorded on an
explicit GradientTape; `tape.gradients(loss, params)` replays the tape
in reverse.

Tensors are immutable once recorded. A tape is single-writer; separate
tapes may run concurrently.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

_MAX_RANK = 4


class Tensor:
    """N-d value array (rank <= 4, layout batch x channel x height x width).

    float32 arrays stay float32 (training storage); anything else becomes
    float64 (the precision used by gradient verification). Reductions
    accumulate in 64-bit regardless of storage dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        data = np.asarray(data)
        if data.dtype != np.float32:
            data = data.astype(np.float64)
        self.data = data
        if self.data.ndim > _MAX_RANK:
            raise ValueError(f"rank {self.data.ndim} exceeds maximum {_MAX_RANK}")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class _BufferPool:
    """Shape-keyed freelist of scratch arrays.

    Large transient buffers (im2col matrices, padded grids) are expensive
    to fault in on every step; tapes borrow them here and hand them back
    when the tape itself is collected. Pooled buffers never escape an op.
    """

    def __init__(self):
        self._free: dict[tuple, list[np.ndarray]] = {}

    def acquire(self, shape: tuple, dtype) -> np.ndarray:
        key = (shape, np.dtype(dtype).str)
        stack = self._free.get(key)
        if stack:
            return stack.pop()
        return np.empty(shape, dtype)

    def release(self, arrays: list) -> None:
        for a in arrays:
            self._free.setdefault((a.shape, a.dtype.str), []).append(a)


_POOL = _BufferPool()


def _check_finite(arr: np.ndarray, op: str) -> None:
    # NaN/Inf after a forward op is a fault, never silently propagated.
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


class GradientTape:
    """Ordered record of executed primitive ops for reverse-mode replay."""

    def __init__(self):
        self._records: list[_Record] = []
        self._scratch: list[np.ndarray] = []

    def _borrow(self, shape: tuple, dtype) -> np.ndarray:
        buf = _POOL.acquire(shape, dtype)
        self._scratch.append(buf)
        return buf

    def __del__(self):
        try:
            _POOL.release(self._scratch)
        except Exception:
            pass  # interpreter teardown

    # -- recording helpers -------------------------------------------------

    def _emit(self, data: np.ndarray, inputs: Sequence[Tensor], op: str,
              backward_fn: Callable) -> Tensor:
        _check_finite(data, op)
        out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
        if out.requires_grad:
            self._records.append(_Record(out, tuple(inputs), backward_fn))
        return out

    @staticmethod
    def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
        if a.data.shape != b.data.shape:
            raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")

    # -- primitives ---------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._same_shape(a, b, "add")
        return self._emit(a.data + b.data, (a, b), "add", lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._same_shape(a, b, "sub")
        return self._emit(a.data - b.data, (a, b), "sub", lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise (Hadamard) product."""
        self._same_shape(a, b, "mul")
        ad, bd = a.data, b.data
        return self._emit(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))

    def scalar_mul(self, a: Tensor, s: float) -> Tensor:
        s = float(s)
        return self._emit(a.data * s, (a,), "scalar_mul", lambda g: (g * s,))

    def leaky_relu(self, a: Tensor, slope: float = 0.1) -> Tensor:
        """max(x, slope * x). Derivative at exactly 0 is taken as slope."""
        dt = a.data.dtype.type
        factor = np.where(a.data > 0, dt(1.0), dt(slope))
        return self._emit(a.data * factor, (a,), "leaky_relu",
                          lambda g: (g * factor,))

    def conv2d(self, x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
               stride: int = 1, padding: int = 0) -> Tensor:
        """2-D convolution (cross-correlation), zero padding, square stride.

        x: (B, C, H, W), w: (F, C, kh, kw), bias: (F,) or None.
        Output spatial size is floor((H + 2p - k) / s) + 1.
        """
        if x.data.ndim != 4 or w.data.ndim != 4:
            raise ValueError("conv2d expects 4-D input and weight tensors")
        B, C, H, W = x.data.shape
        F, Cw, kh, kw = w.data.shape
        if Cw != C:
            raise ValueError(f"conv2d: input has {C} channels, weight expects {Cw}")
        if stride < 1 or padding < 0:
            raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
        Ho = (H + 2 * padding - kh) // stride + 1
        Wo = (W + 2 * padding - kw) // stride + 1
        if Ho < 1 or Wo < 1:
            raise ValueError(f"conv2d: empty output {Ho}x{Wo}")
        if bias is not None and bias.data.shape != (F,):
            raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({F},)")

        xp = _pad2d(x.data, padding, self)
        w_mat = w.data.reshape(F, C * kh * kw)
        # cols are borrowed scratch, retained via this closure for backward
        cols = _im2col(xp, kh, kw, stride, Ho, Wo, self)  # (B, C*kh*kw, Ho*Wo)
        y = np.matmul(w_mat, cols).reshape(B, F, Ho, Wo)
        if bias is not None:
            y += bias.data[None, :, None, None]

        inputs = (x, w) if bias is None else (x, w, bias)

        def backward(g: np.ndarray):
            # no reference back to the tape here: a closure capturing the
            # tape would form a cycle and delay scratch release to the GC
            g2 = np.ascontiguousarray(g).reshape(B, F, Ho * Wo)
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            dw = dw.reshape(F, C, kh, kw)
            dx = None
            if x.requires_grad:
                dcols = _POOL.acquire((B, C * kh * kw, Ho * Wo), g2.dtype)
                np.matmul(w_mat.T, g2, out=dcols)
                dx = _col2im(dcols, (B, C, H, W), kh, kw, stride, padding, Ho, Wo)
                _POOL.release([dcols])
            if bias is None:
                return (dx, dw)
            return (dx, dw, g2.sum(axis=(0, 2)))

        return self._emit(y, inputs, "conv2d", backward)

    def upsample_nearest2(self, x: Tensor) -> Tensor:
        """Nearest-neighbor x2 spatial upsampling of a (B, C, H, W) tensor."""
        if x.data.ndim != 4:
            raise ValueError("upsample_nearest2 expects a 4-D tensor")
        y = x.data.repeat(2, axis=2).repeat(2, axis=3)
        B, C, H, W = x.data.shape

        def backward(g):
            return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

        return self._emit(y, (x,), "upsample_nearest2", backward)

    def concat_channels(self, tensors: Sequence[Tensor]) -> Tensor:
        """Concatenate 4-D tensors along the channel axis."""
        if not tensors:
            raise ValueError("concat_channels needs at least one tensor")
        shapes = [t.data.shape for t in tensors]
        for s in shapes:
            if len(s) != 4 or (s[0], s[2], s[3]) != (shapes[0][0], shapes[0][2], shapes[0][3]):
                raise ValueError(f"concat_channels: incompatible shapes {shapes}")
        y = np.concatenate([t.data for t in tensors], axis=1)
        splits = np.cumsum([s[1] for s in shapes])[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=1))

        return self._emit(y, tuple(tensors), "concat_channels", backward)

    def mean_abs(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """Mean of |x| over mask-true positions (all positions if mask is None).

        An empty mask yields loss 0 with zero gradients. The reduction
        selects masked elements first, so values outside the mask cannot
        influence the result even at the bit level.
        """
        if mask is None:
            mask = np.ones(x.data.shape, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != x.data.shape:
                raise ValueError(
                    f"mean_abs: mask shape {mask.shape} != data shape {x.data.shape}"
                )
        count = int(mask.sum())
        total = np.abs(x.data[mask]).sum(dtype=np.float64) if count else 0.0
        y = np.asarray(total / count if count else 0.0)

        def backward(g):
            if count == 0:
                return (np.zeros_like(x.data),)
            dx = np.zeros_like(x.data)
            scale = x.data.dtype.type(float(g) / count)
            np.multiply(np.sign(x.data), scale, out=dx, where=mask)
            return (dx,)

        return self._emit(y, (x,), "mean_abs", backward)

    # -- reverse pass --------------------------------------------------------

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar loss for every tensor in `params`.

        Parameters that do not reach the loss get zero gradients. Results
        are deterministic: accumulation follows reverse recording order.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            input_grads = rec.backward_fn(g)
            for tensor, ig in zip(rec.inputs, input_grads):
                if ig is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else g)
        return out

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> None:
        """Like gradients(), but stores each result on the tensor's .grad."""
        for p, g in zip(params, self.gradients(loss, params)):
            p.grad = g


# -- conv plumbing ------------------------------------------------------------

def _pad2d(x: np.ndarray, p: int, tape: "GradientTape") -> np.ndarray:
    if p == 0:
        return x
    B, C, H, W = x.shape
    xp = tape._borrow((B, C, H + 2 * p, W + 2 * p), x.dtype)
    xp[:, :, :p, :] = 0.0
    xp[:, :, -p:, :] = 0.0
    xp[:, :, p:-p, :p] = 0.0
    xp[:, :, p:-p, -p:] = 0.0
    xp[:, :, p:-p, p:-p] = x
    return xp


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, Ho: int, Wo: int,
            tape: "GradientTape") -> np.ndarray:
    B, C = xp.shape[:2]
    cols = tape._borrow((B, C, kh, kw, Ho, Wo), xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    return cols.reshape(B, C * kh * kw, Ho * Wo)


def _col2im(dcols: np.ndarray, x_shape: tuple, kh: int, kw: int, s: int,
            p: int, Ho: int, Wo: int) -> np.ndarray:
    B, C, H, W = x_shape
    d6 = dcols.reshape(B, C, kh, kw, Ho, Wo)
    dxp = _POOL.acquire((B, C, H + 2 * p, W + 2 * p), dcols.dtype)
    dxp.fill(0.0)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += d6[:, :, i, j]
    # the pooled buffer must not escape; hand back a compact copy
    if p == 0:
        dx = dxp.copy()
    else:
        dx = np.ascontiguousarray(dxp[:, :, p:-p, p:-p])
    _POOL.release([dxp])
    return dx


# -- numerical verification ----------------------------------------------------

def grad_check(forward_fn: Callable[[GradientTape], Tensor],
               params: Sequence[Tensor], h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    `forward_fn(tape)` must rebuild the graph from `params` and return the
    scalar loss. Every parameter coordinate is perturbed by +-h; relative
    error uses denominator max(|analytic|, |numeric|, 1e-8). Inputs should
    be nudged away from ReLU/abs kinks, where one-sided derivatives differ.
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    tape = GradientTape()
    loss = forward_fn(tape)
    analytic = tape.gradients(loss, params)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(forward_fn(GradientTape()).data)
            flat[i] = orig - h
            lo = float(forward_fn(GradientTape()).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
