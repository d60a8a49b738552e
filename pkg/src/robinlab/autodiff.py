"""Reverse-mode automatic differentiation over dense float64 arrays.

A thread-local tape records every operation whose inputs carry gradients.
``backward`` replays the tape once in reverse, populates ``.grad`` on every
tensor that requires it, then clears the tape: training and attack loops
rebuild the graph on every step. Only ranks 1, 2 and 4 are used in practice
(vectors, logit matrices, image batches); no broadcasting beyond scalar
scaling, so every backward rule is explicit and auditable.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "DimensionError",
    "NonFiniteError",
    "TapeError",
    "backward",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "matmul",
    "add_bias",
    "conv2d",
    "reshape",
    "flatten",
    "hstack",
    "pair_logits",
    "sum_all",
    "sum_per_example",
    "take_per_row",
    "softmax_cross_entropy",
    "kl_rows",
    "kl_divergence",
    "true_class_prob",
    "cw_hinge",
    "mart_bce",
    "softmax_rows",
    "sigmoid_np",
]


class AutodiffError(Exception):
    """Base class for engine errors."""


class DimensionError(AutodiffError):
    """Operand shapes do not compose; the message names both shapes."""


class NonFiniteError(AutodiffError):
    """A forward operation produced NaN or infinity from finite inputs."""


class TapeError(AutodiffError):
    """Backward misuse: non-scalar loss, detached tensor, or consumed tape."""


class Tensor:
    """Shape-carrying float64 array participating in the gradient tape.

    ``grad`` is populated by :func:`backward` for every tensor with
    ``requires_grad`` that is an ancestor of the loss. The flag is
    transitive: an operation output requires a gradient as soon as any
    input does.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # 0-d arrays are contiguous; keep rank
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detached(self) -> "Tensor":
        """Same buffer, no gradient participation."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed operations, replayed exactly once."""

    __slots__ = ("_entries", "_consumed")

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._entries)


_tls = threading.local()


def _current_tape() -> Tape:
    tape = getattr(_tls, "tape", None)
    if tape is None or tape._consumed:
        tape = Tape()
        _tls.tape = tape
    return tape


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
            backward_fn: Callable) -> Tensor:
    """Wrap an op result; record on the tape when any input needs gradients.

    ``backward_fn(g)`` must return one gradient array (or None) per input.
    """
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _current_tape()
        tape._entries.append((out, inputs, backward_fn))
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad ancestor of ``loss``.

    The loss must be a scalar produced on the active tape. The tape is
    cleared afterwards; calling backward twice on the same graph raises.
    """
    if loss.data.shape != ():
        raise TapeError(f"backward expects a scalar, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("backward on a detached tensor (no recorded producer)")
    if tape._consumed:
        raise TapeError("tape already consumed; rebuild the graph before backward")

    # id -> (tensor, accumulated gradient); outputs are finalized when their
    # producing entry is reached, leaves when the scan completes.
    grads: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones((), dtype=np.float64))
    }
    for out, inputs, backward_fn in reversed(tape._entries):
        got = grads.pop(id(out), None)
        if got is None:
            continue
        _, g = got
        out.grad = g
        for inp, gin in zip(inputs, backward_fn(g)):
            if gin is None or not inp.requires_grad:
                continue
            held = grads.get(id(inp))
            if held is None:
                grads[id(inp)] = (inp, np.array(gin, dtype=np.float64))
            else:
                np.add(held[1], gin, out=held[1])
    for t, g in grads.values():
        t.grad = g

    tape._entries.clear()
    tape._consumed = True
    _tls.tape = None


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _record("relu", np.where(mask, a.data, 0.0), (a,),
                   lambda g: (g * mask,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a plain array."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)
    return _record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _record("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


# ---------------------------------------------------------------------------
# linear algebra and structural operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not compose")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias addition: (n,m) + (m,). Backward sums over the batch."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {b.shape} do not compose")
    return _record("add_bias", x.data + b.data, (x, b),
                   lambda g: (g, g.sum(axis=0)))


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """Direct 2-D convolution, stride 1, zero padding.

    x: (n, C, H, W), w: (O, C, kh, kw), b: (O,). The kernel offsets are
    looped explicitly; no im2col buffer.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: ranks {x.data.ndim} and {w.data.ndim}, need 4 and 4")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw or b.shape != (o,):
        raise DimensionError(
            f"conv2d: input {x.shape}, kernel {w.shape}, bias {b.shape} do not compose")
    if padding < 0:
        raise DimensionError(f"conv2d: negative padding {padding}")
    oh, ow = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")

    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = x.data
    out = np.tile(b.data[None, :, None, None], (n, 1, oh, ow))
    for dy in range(kh):
        for dx in range(kw):
            out += np.einsum("ncij,oc->noij",
                             xp[:, :, dy:dy + oh, dx:dx + ow], w.data[:, :, dy, dx])

    wdata = w.data

    def bwd(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wdata) if w.requires_grad else None
        for dy in range(kh):
            for dx in range(kw):
                if gxp is not None:
                    gxp[:, :, dy:dy + oh, dx:dx + ow] += np.einsum(
                        "noij,oc->ncij", g, wdata[:, :, dy, dx])
                if gw is not None:
                    gw[:, :, dy, dx] = np.einsum(
                        "noij,ncij->oc", g, xp[:, :, dy:dy + oh, dx:dx + ow])
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return _record("conv2d", out, (x, w, b), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    return _record("reshape", a.data.reshape(shape).copy(), (a,),
                   lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """(n, ...) -> (n, prod(rest))."""
    n = a.shape[0]
    return reshape(a, (n, int(a.data.size // n)))


def hstack(parts: Sequence[Tensor]) -> Tensor:
    """Column-concatenate (n, m_i) tensors; backward splits the gradient."""
    if not parts:
        raise DimensionError("hstack: empty input")
    n = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != n:
            raise DimensionError(
                f"hstack: shapes {[p.shape for p in parts]} do not row-align")
    widths = [p.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _record("hstack", np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), bwd)


def take_per_row(a: Tensor, idx) -> Tensor:
    """Pick one column per row: (n,k)[i, idx[i]] -> (n,). Backward scatters."""
    if a.data.ndim != 2:
        raise DimensionError(f"take_per_row: rank {a.data.ndim}, need 2")
    n, k = a.shape
    idx = _check_labels(idx, k, "take_per_row")
    rows = np.arange(n)
    shp = a.shape

    def bwd(g):
        gz = np.zeros(shp)
        gz[rows, idx] = g
        return (gz,)

    return _record("take_per_row", a.data[rows, idx].copy(), (a,), bwd)


def pair_logits(z: Tensor) -> Tensor:
    """Lift single-logit scores (n,1) to 2-class logits (n,2) = [0, z].

    softmax of the pair equals [1-sigmoid(z), sigmoid(z)], so binary arms
    reuse every multiclass loss unchanged.
    """
    if z.data.ndim != 2 or z.shape[1] != 1:
        raise DimensionError(f"pair_logits: expected (n,1), got {z.shape}")
    out = np.concatenate([np.zeros_like(z.data), z.data], axis=1)
    return _record("pair_logits", out, (z,), lambda g: (g[:, 1:2].copy(),))


def sum_all(a: Tensor) -> Tensor:
    shp = a.shape
    return _record("sum_all", np.asarray(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shp).copy(),))


def sum_per_example(a: Tensor) -> Tensor:
    """Sum over all axes but the first: (n, ...) -> (n,)."""
    n = a.shape[0]
    flat_shape = (n, int(a.data.size // n)) if n else (0, 0)
    shp = a.shape
    return _record(
        "sum_per_example", a.data.reshape(flat_shape).sum(axis=1), (a,),
        lambda g: (np.broadcast_to(g.reshape((n,) + (1,) * (len(shp) - 1)), shp).copy(),))


# ---------------------------------------------------------------------------
# classification losses (fused forward/backward, verified by finite
# differences in the test suite)
# ---------------------------------------------------------------------------

def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Stable row-wise softmax on a plain array."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, k: int, op: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise DimensionError(f"{op}: labels must be rank 1, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"{op}: label out of range [0, {k})")
    return labels


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """-log softmax(logits)[label], averaged (or summed) over the batch.

    Max-subtraction keeps the log-sum-exp stable. The "sum" reduction makes
    per-example gradients independent of the batch size, which attack loops
    rely on for bit-reproducibility across batch splits.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits rank {logits.data.ndim}, need 2")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    n, k = logits.shape
    if n < 1:
        raise DimensionError("softmax_cross_entropy: empty batch")
    y = _check_labels(labels, k, "softmax_cross_entropy")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_example = lse - shifted[np.arange(n), y]
    loss = float(per_example.mean() if reduction == "mean" else per_example.sum())
    p = softmax_rows(z)
    denom = n if reduction == "mean" else 1

    def bwd(g):
        gz = p.copy()
        gz[np.arange(n), y] -= 1.0
        return (gz * (float(g) / denom),)

    return _record("softmax_cross_entropy", np.asarray(loss), (logits,), bwd)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def kl_rows(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Per-example KL(softmax(p) || softmax(q)): (n,k),(n,k) -> (n,).

    Gradients flow into both logit matrices.
    """
    _same_shape(p_logits, q_logits, "kl_rows")
    if p_logits.data.ndim != 2:
        raise DimensionError(f"kl_rows: logits rank {p_logits.data.ndim}, need 2")
    logp = _log_softmax(p_logits.data)
    logq = _log_softmax(q_logits.data)
    p = np.exp(logp)
    q = np.exp(logq)
    diff = logp - logq
    kl = (p * diff).sum(axis=1)

    def bwd(g):
        gcol = g[:, None]
        gp = None
        if p_logits.requires_grad:
            # d/dp_logits of sum_i p_i (logp_i - logq_i); the dlogp part cancels.
            gp = gcol * p * (diff - kl[:, None])
        gq = gcol * (q - p) if q_logits.requires_grad else None
        return gp, gq

    return _record("kl_rows", kl, (p_logits, q_logits), bwd)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over the batch of KL(softmax(p) || softmax(q))."""
    n = p_logits.shape[0]
    return scale(sum_all(kl_rows(p_logits, q_logits)), 1.0 / n)


def true_class_prob(logits: Tensor, labels) -> Tensor:
    """softmax(logits)[label] per example: (n,k) -> (n,). Differentiable."""
    n, k = logits.shape
    y = _check_labels(labels, k, "true_class_prob")
    p = softmax_rows(logits.data)
    py = p[np.arange(n), y]

    def bwd(g):
        gz = -p * (g * py)[:, None]
        gz[np.arange(n), y] += g * py
        return (gz,)

    return _record("true_class_prob", py, (logits,), bwd)


def cw_hinge(logits: Tensor, labels, kappa: float = 0.0) -> Tensor:
    """Per-example hinge max(Z_y - max_{j != y} Z_j, -kappa): (n,k) -> (n,).

    Minimizing it drives the true-class logit below the runner-up.
    """
    n, k = logits.shape
    if k < 2:
        raise DimensionError("cw_hinge: needs at least 2 classes")
    y = _check_labels(labels, k, "cw_hinge")
    kappa = float(kappa)
    z = logits.data
    masked = z.copy()
    masked[np.arange(n), y] = -np.inf
    runner = masked.argmax(axis=1)
    diff = z[np.arange(n), y] - z[np.arange(n), runner]
    out = np.maximum(diff, -kappa)
    active = diff > -kappa

    def bwd(g):
        gz = np.zeros_like(z)
        ga = g * active
        gz[np.arange(n), y] += ga
        gz[np.arange(n), runner] -= ga
        return (gz,)

    return _record("cw_hinge", out, (logits,), bwd)


def mart_bce(logits: Tensor, labels) -> Tensor:
    """Mean margin cross-entropy: -log p_y - log(1 - p_runnerup).

    The margin term penalizes the most competitive wrong class, so barely
    correct and misclassified examples are pushed harder.
    """
    n, k = logits.shape
    if k < 2:
        raise DimensionError("mart_bce: needs at least 2 classes")
    y = _check_labels(labels, k, "mart_bce")
    p = softmax_rows(logits.data)
    idx = np.arange(n)
    masked = p.copy()
    masked[idx, y] = -1.0
    runner = masked.argmax(axis=1)
    py = p[idx, y]
    pr = p[idx, runner]
    loss = float((-np.log(py) - np.log1p(-pr)).mean())

    def bwd(g):
        gz = p.copy()
        gz[idx, y] -= 1.0
        coeff = (pr / (1.0 - pr))[:, None]
        gz -= coeff * p
        gz[idx, runner] += coeff[:, 0]
        return (gz * (float(g) / n),)

    return _record("mart_bce", np.asarray(loss), (logits,), bwd)
