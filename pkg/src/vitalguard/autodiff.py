"""Dense 2-D tensor kernels with reverse-mode differentiation.

Everything is float64 and strictly two-dimensional; a batch of windows is a
loop at the caller, never a third axis. Gradients are recorded onto an
explicit :class:`Tape`. Ops called with ``tape=None`` run forward-only, which
is the cheap path used for inference.

A tape is single-threaded; independent tapes can run concurrently because no
state is shared between them. Forward-only evaluation of frozen tensors is
safe to share across threads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

__all__ = [
    "Tensor2",
    "Tape",
    "matmul",
    "transpose",
    "add",
    "scale",
    "add_row_bias",
    "add_col_bias",
    "concat_rows",
    "slice_rows",
    "stack_rows",
    "row_softmax",
    "layer_norm",
    "conv1d",
    "relu",
    "sigmoid",
    "dropout",
    "sigmoid_array",
]


class Tensor2:
    """A rows x cols float64 matrix, optionally tracked for gradients.

    Public construction validates shape and rejects non-finite entries. The
    ``grad`` buffer is allocated lazily by the backward pass; it stays None
    for tensors no gradient ever reached.
    """

    __slots__ = ("data", "requires_grad", "grad", "_track")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2 requires a 2-D array, got ndim={arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor2 entries must be finite (no NaN/Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._track = self.requires_grad

    @classmethod
    def _result(cls, arr: np.ndarray, track: bool) -> "Tensor2":
        # internal fast path: arr is owned, float64, finiteness preserved by ops
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._track = track
        return t

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        # first write copies: backward fns may hand the same buffer to
        # several inputs, and in-place += on a shared buffer would alias
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor2(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's inputs precede it;
    the backward pass walks the list once in reverse. Outputs whose gradient
    buffer was never touched are dead branches and are skipped, which leaves
    parameters on unused paths with no gradient at all.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[tuple[Tensor2, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor2, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def backward(self, loss: Tensor2) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate through every recorded node."""
        if loss.data.shape != (1, 1):
            raise ShapeError(f"backward() needs a 1x1 loss, got {loss.data.shape}")
        loss.grad = np.ones((1, 1))
        for out, backward in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            backward(g)


def _tracked(tape: Tape | None, *tensors: Tensor2) -> bool:
    return tape is not None and any(t._track for t in tensors)


def matmul(a: Tensor2, b: Tensor2, tape: Tape | None = None) -> Tensor2:
    """Standard matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ ({a.shape} @ {b.shape})")
    out = Tensor2._result(a.data @ b.data, _tracked(tape, a, b))
    if out._track:
        ad, bd = a.data, b.data

        def backward(g: np.ndarray) -> None:
            if a._track:
                a._accum(g @ bd.T)
            if b._track:
                b._accum(ad.T @ g)

        tape._record(out, backward)
    return out


def transpose(a: Tensor2, tape: Tape | None = None) -> Tensor2:
    out = Tensor2._result(np.ascontiguousarray(a.data.T), _tracked(tape, a))
    if out._track:
        def backward(g: np.ndarray) -> None:
            a._accum(g.T)

        tape._record(out, backward)
    return out


def add(a: Tensor2, b: Tensor2, tape: Tape | None = None) -> Tensor2:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ ({a.shape} vs {b.shape})")
    out = Tensor2._result(a.data + b.data, _tracked(tape, a, b))
    if out._track:
        def backward(g: np.ndarray) -> None:
            if a._track:
                a._accum(g)
            if b._track:
                b._accum(g)

        tape._record(out, backward)
    return out


def scale(a: Tensor2, k: float, tape: Tape | None = None) -> Tensor2:
    out = Tensor2._result(a.data * k, _tracked(tape, a))
    if out._track:
        def backward(g: np.ndarray) -> None:
            a._accum(g * k)

        tape._record(out, backward)
    return out


def add_row_bias(a: Tensor2, bias: Tensor2, tape: Tape | None = None) -> Tensor2:
    """Add a 1 x cols bias to every row of a."""
    if bias.shape != (1, a.cols):
        raise ShapeError(f"add_row_bias: bias {bias.shape} vs a {a.shape}")
    out = Tensor2._result(a.data + bias.data, _tracked(tape, a, bias))
    if out._track:
        def backward(g: np.ndarray) -> None:
            if a._track:
                a._accum(g)
            if bias._track:
                bias._accum(g.sum(axis=0, keepdims=True))

        tape._record(out, backward)
    return out


def add_col_bias(a: Tensor2, bias: Tensor2, tape: Tape | None = None) -> Tensor2:
    """Add a rows x 1 bias to every column of a."""
    if bias.shape != (a.rows, 1):
        raise ShapeError(f"add_col_bias: bias {bias.shape} vs a {a.shape}")
    out = Tensor2._result(a.data + bias.data, _tracked(tape, a, bias))
    if out._track:
        def backward(g: np.ndarray) -> None:
            if a._track:
                a._accum(g)
            if bias._track:
                bias._accum(g.sum(axis=1, keepdims=True))

        tape._record(out, backward)
    return out


def concat_rows(a: Tensor2, b: Tensor2, tape: Tape | None = None) -> Tensor2:
    """Stack b below a (same column count)."""
    if a.cols != b.cols:
        raise ShapeError(f"concat_rows: column counts differ ({a.shape} vs {b.shape})")
    out = Tensor2._result(np.vstack((a.data, b.data)), _tracked(tape, a, b))
    if out._track:
        na = a.rows

        def backward(g: np.ndarray) -> None:
            if a._track:
                a._accum(g[:na])
            if b._track:
                b._accum(g[na:])

        tape._record(out, backward)
    return out


def slice_rows(a: Tensor2, start: int, stop: int, tape: Tape | None = None) -> Tensor2:
    if not (0 <= start < stop <= a.rows):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    out = Tensor2._result(a.data[start:stop].copy(), _tracked(tape, a))
    if out._track:
        def backward(g: np.ndarray) -> None:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a._accum(full)

        tape._record(out, backward)
    return out


def stack_rows(tensors: Sequence[Tensor2], tape: Tape | None = None) -> Tensor2:
    """Concatenate tensors along rows; used to batch per-window logits."""
    if not tensors:
        raise ShapeError("stack_rows: empty input")
    cols = tensors[0].cols
    for t in tensors:
        if t.cols != cols:
            raise ShapeError("stack_rows: column counts differ")
    out = Tensor2._result(
        np.vstack([t.data for t in tensors]), _tracked(tape, *tensors)
    )
    if out._track:
        offsets = np.cumsum([0] + [t.rows for t in tensors])

        def backward(g: np.ndarray) -> None:
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t._track:
                    t._accum(g[lo:hi])

        tape._record(out, backward)
    return out


def row_softmax(a: Tensor2, scaling: float, tape: Tape | None = None) -> Tensor2:
    """Softmax over each row of a / scaling, with max-subtraction for stability."""
    if scaling <= 0:
        raise ConfigError(f"row_softmax: scaling must be positive, got {scaling}")
    z = a.data / scaling
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor2._result(p, _tracked(tape, a))
    if out._track:
        def backward(g: np.ndarray) -> None:
            dot = (g * p).sum(axis=1, keepdims=True)
            a._accum(p * (g - dot) / scaling)

        tape._record(out, backward)
    return out


def layer_norm(
    a: Tensor2,
    gain: Tensor2,
    shift: Tensor2,
    eps: float = 1e-8,
    tape: Tape | None = None,
) -> Tensor2:
    """Per-row standardization over the column axis, then affine gain/shift."""
    if gain.shape != (1, a.cols) or shift.shape != (1, a.cols):
        raise ShapeError(
            f"layer_norm: gain/shift must be 1x{a.cols}, got {gain.shape}/{shift.shape}"
        )
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    mu = a.data.mean(axis=1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor2._result(xhat * gain.data + shift.data, _tracked(tape, a, gain, shift))
    if out._track:
        n = a.cols

        def backward(g: np.ndarray) -> None:
            if gain._track:
                gain._accum((g * xhat).sum(axis=0, keepdims=True))
            if shift._track:
                shift._accum(g.sum(axis=0, keepdims=True))
            if a._track:
                dxhat = g * gain.data
                term = dxhat - dxhat.mean(axis=1, keepdims=True)
                term -= xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / n
                a._accum(term * inv)

        tape._record(out, backward)
    return out


def conv1d(
    x: Tensor2,
    w: Tensor2,
    b: Tensor2,
    kernel_size: int,
    tape: Tape | None = None,
) -> Tensor2:
    """Same-length 1-D convolution over channels x time input.

    The kernel bank w is stored flattened as (out_channels, in_channels *
    kernel_size) with w[o, i*k + j] the tap-j weight for input channel i.
    Output length equals input length via symmetric zero padding, so the
    residual add around the conv stack always lines up.
    """
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ConfigError(f"conv1d: kernel_size must be odd, got {kernel_size}")
    cin, t_len = x.shape
    if w.cols != cin * kernel_size:
        raise ShapeError(
            f"conv1d: kernel bank cols {w.cols} != in_channels*k = {cin * kernel_size}"
        )
    cout = w.rows
    if b.shape != (cout, 1):
        raise ShapeError(f"conv1d: bias must be {cout}x1, got {b.shape}")
    pad = kernel_size // 2
    xp = np.zeros((cin, t_len + 2 * pad))
    xp[:, pad:pad + t_len] = x.data
    # cols[i*k + j, t] = xp[i, t + j]
    cols = np.empty((cin * kernel_size, t_len))
    for j in range(kernel_size):
        cols[j::kernel_size, :] = xp[:, j:j + t_len]
    out = Tensor2._result(w.data @ cols + b.data, _tracked(tape, x, w, b))
    if out._track:
        def backward(g: np.ndarray) -> None:
            if w._track:
                w._accum(g @ cols.T)
            if b._track:
                b._accum(g.sum(axis=1, keepdims=True))
            if x._track:
                dcols = w.data.T @ g
                dxp = np.zeros_like(xp)
                for j in range(kernel_size):
                    dxp[:, j:j + t_len] += dcols[j::kernel_size, :]
                x._accum(dxp[:, pad:pad + t_len])

        tape._record(out, backward)
    return out


def relu(a: Tensor2, tape: Tape | None = None) -> Tensor2:
    out_data = np.maximum(a.data, 0.0)
    out = Tensor2._result(out_data, _tracked(tape, a))
    if out._track:
        def backward(g: np.ndarray) -> None:
            a._accum(g * (out_data > 0.0))

        tape._record(out, backward)
    return out


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    """Overflow-safe elementwise logistic function on a plain array."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Tensor2, tape: Tape | None = None) -> Tensor2:
    s = sigmoid_array(a.data)
    out = Tensor2._result(s, _tracked(tape, a))
    if out._track:
        def backward(g: np.ndarray) -> None:
            a._accum(g * s * (1.0 - s))

        tape._record(out, backward)
    return out


def dropout(
    a: Tensor2,
    p: float,
    training: bool,
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
) -> Tensor2:
    """Channel dropout: one mask value per row, broadcast over time.

    Kept rows are rescaled by 1/(1-p) so expectations match eval mode. In
    eval mode (or at p=0) the input passes through untouched.
    """
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ConfigError("dropout: training mode requires an rng")
    mask = (rng.random((a.rows, 1)) >= p) / (1.0 - p)
    out = Tensor2._result(a.data * mask, _tracked(tape, a))
    if out._track:
        def backward(g: np.ndarray) -> None:
            a._accum(g * mask)

        tape._record(out, backward)
    return out
