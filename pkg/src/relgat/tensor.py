"""Flat and 2-D tensors recorded on a tape, with reverse-mode gradients.

Everything the graph layers need is expressible with scalars, vectors and
matrices, so shapes are restricted to ndim <= 2. The default precision is
float64 so finite-difference checks are meaningful; float32 can be selected
per tape for speed runs.

Every public op validates its inputs, checks the result for non-finite
entries (raising OverflowError otherwise), and records a backward closure on
the tape. ``Tape.backward`` walks the recorded ops once, in reverse order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GradientMap",
    "KinkError",
    "Tape",
    "Tensor",
    "add",
    "concat_cols",
    "concat_flat",
    "concat_rows",
    "gather_rows",
    "grad_check",
    "leaky_relu",
    "log",
    "matmul",
    "mul",
    "neg",
    "relu",
    "reshape",
    "row_softmax",
    "rowsum",
    "scale_rows",
    "segment_reduce",
    "segment_softmax",
    "slice_rows",
    "sub",
    "sum_all",
    "sum_squares",
    "tanh",
]

_ALLOWED_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))


class KinkError(RuntimeError):
    """A finite-difference check sits on a non-smooth point even after shifting."""


class Tensor:
    """Immutable array bound to one tape. Created via ``Tape.leaf`` or ops."""

    __slots__ = ("tape", "id", "data")

    def __init__(self, tape: "Tape", tensor_id: int, data: np.ndarray):
        self.tape = tape
        self.id = tensor_id
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


class _Node:
    __slots__ = ("out_id", "backward", "kink_gap")

    def __init__(self, out_id: int, backward: Callable, kink_gap: float):
        self.out_id = out_id
        self.backward = backward
        self.kink_gap = kink_gap


class GradientMap:
    """Gradients of one scalar loss with respect to every tape leaf."""

    def __init__(self, by_id: dict[int, np.ndarray]):
        self._by_id = by_id

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        try:
            return self._by_id[leaf.id]
        except KeyError:
            raise KeyError(f"tensor {leaf.id} is not a leaf of this tape") from None

    def by_id(self, tensor_id: int) -> np.ndarray:
        return self._by_id[tensor_id]


class Tape:
    """Append-only record of primitive applications.

    Tensor ids increase strictly in creation order; ``backward`` visits the
    recorded ops exactly once, in reverse recording order, and returns the
    gradient for every leaf (zeros for leaves the loss never touched).
    """

    def __init__(self, dtype=np.float64):
        dt = np.dtype(dtype)
        if dt not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {dt}; use float64 or float32")
        self.dtype = dt
        self._ops: list[_Node] = []
        self._leaves: list[Tensor] = []
        self._count = 0

    def _next_id(self) -> int:
        i = self._count
        self._count += 1
        return i

    @property
    def num_recorded(self) -> int:
        return self._count

    def leaf(self, data) -> Tensor:
        arr = np.array(data, dtype=self.dtype)
        if arr.ndim > 2:
            raise ValueError(f"tensors are at most 2-D, got shape {arr.shape}")
        if arr.size and not np.all(np.isfinite(arr)):
            raise OverflowError("non-finite entries in leaf value")
        arr.setflags(write=False)
        t = Tensor(self, self._next_id(), arr)
        self._leaves.append(t)
        return t

    def record(self, out: np.ndarray, backward: Callable, kink_gap: float = np.inf) -> Tensor:
        out = np.asarray(out, dtype=self.dtype)
        if out.ndim > 2:
            raise ValueError(f"tensors are at most 2-D, got shape {out.shape}")
        if out.size and not np.all(np.isfinite(out)):
            raise OverflowError("non-finite entries in op result")
        out.setflags(write=False)
        t = Tensor(self, self._next_id(), out)
        self._ops.append(_Node(t.id, backward, float(kink_gap)))
        return t

    def min_kink_gap(self) -> float:
        """Smallest distance of any recorded pre-activation from a kink."""
        if not self._ops:
            return np.inf
        return min(node.kink_gap for node in self._ops)

    def backward(self, loss: Tensor) -> GradientMap:
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.ndim != 0:
            raise ValueError(f"loss must be a recorded scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=self.dtype)}
        for node in reversed(self._ops):
            g = grads.get(node.out_id)
            if g is None:
                continue
            node.backward(g, grads)
        out: dict[int, np.ndarray] = {}
        for leaf in self._leaves:
            g = grads.get(leaf.id)
            if g is None:
                g = np.zeros(leaf.shape, dtype=self.dtype)
            out[leaf.id] = np.asarray(g, dtype=self.dtype)
        return GradientMap(out)


def _acc(grads: dict[int, np.ndarray], tensor_id: int, value: np.ndarray) -> None:
    cur = grads.get(tensor_id)
    grads[tensor_id] = value if cur is None else cur + value


def _check_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands were recorded on different tapes")
    return tape


def _index_array(indices, bound: int, name: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"{name} must be a flat index array")
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise ValueError(f"{name} out of range [0, {bound})")
    return idx


def _ordered_segment_sum(values: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    # Accumulates each segment in value-sorted order so the result does not
    # depend on how the rows happen to be listed.
    if values.ndim == 1:
        out = np.zeros(num_segments, dtype=values.dtype)
        if values.size:
            order = np.lexsort((values, segments))
            np.add.at(out, segments[order], values[order])
        return out
    rows, cols = values.shape
    out = np.zeros((num_segments, cols), dtype=values.dtype)
    if rows:
        for c in range(cols):
            col = values[:, c]
            order = np.lexsort((col, segments))
            np.add.at(out[:, c], segments[order], col[order])
    return out


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _check_tape(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g, grads):
        _acc(grads, a.id, g @ b.data.T)
        _acc(grads, b.id, a.data.T @ g)

    return tape.record(out, backward)


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        tape = _check_tape(a, b)
        if a.shape == b.shape:
            out = a.data + b.data

            def backward(g, grads):
                _acc(grads, a.id, g)
                _acc(grads, b.id, g)

        elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            out = a.data + b.data

            def backward(g, grads):
                _acc(grads, a.id, g)
                _acc(grads, b.id, g.sum(axis=0))

        else:
            raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
        return tape.record(out, backward)

    const = np.asarray(b, dtype=a.tape.dtype)
    if const.ndim != 0 and const.shape != a.shape:
        raise ValueError(f"add shape mismatch: {a.shape} + {const.shape}")
    out = a.data + const

    def backward(g, grads):
        _acc(grads, a.id, g)

    return a.tape.record(out, backward)


def neg(a: Tensor) -> Tensor:
    return mul(a, -1.0)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -np.asarray(b, dtype=a.tape.dtype))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        tape = _check_tape(a, b)
        if a.shape != b.shape:
            raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
        out = a.data * b.data

        def backward(g, grads):
            _acc(grads, a.id, g * b.data)
            _acc(grads, b.id, g * a.data)

        return tape.record(out, backward)

    const = np.asarray(b, dtype=a.tape.dtype)
    if const.ndim != 0 and const.shape != a.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {const.shape}")
    out = a.data * const

    def backward(g, grads):
        _acc(grads, a.id, g * const)

    return a.tape.record(out, backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """Elementwise max(x, slope*x). The subgradient at exactly 0 is slope."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    x = a.data
    out = np.where(x > 0, x, slope * x)
    gap = float(np.min(np.abs(x))) if x.size else np.inf
    factor = np.where(x > 0, 1.0, slope)

    def backward(g, grads):
        _acc(grads, a.id, g * factor)

    return a.tape.record(out, backward, kink_gap=gap)


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g, grads):
        _acc(grads, a.id, g * (1.0 - out * out))

    return a.tape.record(out, backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g, grads):
        _acc(grads, a.id, g / a.data)

    return a.tape.record(out, backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"gather_rows expects a matrix, got shape {a.shape}")
    idx = _index_array(indices, a.shape[0], "row indices")
    out = a.data[idx]

    def backward(g, grads):
        buf = np.zeros(a.shape, dtype=a.tape.dtype)
        np.add.at(buf, idx, g)
        _acc(grads, a.id, buf)

    return a.tape.record(out, backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[0]
    if not (0 <= start <= stop <= n):
        raise ValueError(f"slice [{start}:{stop}] out of range for {n} rows")
    out = a.data[start:stop]

    def backward(g, grads):
        buf = np.zeros(a.shape, dtype=a.tape.dtype)
        buf[start:stop] = g
        _acc(grads, a.id, buf)

    return a.tape.record(out, backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g, grads):
        _acc(grads, a.id, np.asarray(g).reshape(a.shape))

    return a.tape.record(out, backward)


def concat_flat(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("nothing to concatenate")
    tape = _check_tape(*parts)
    if any(p.ndim != 1 for p in parts):
        raise ValueError("concat_flat expects flat tensors")
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts]) if parts else np.zeros(0)

    def backward(g, grads):
        for p, o, n in zip(parts, offsets, sizes):
            _acc(grads, p.id, g[o:o + n])

    return tape.record(out, backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("nothing to concatenate")
    tape = _check_tape(*parts)
    cols = {p.shape[1] for p in parts if p.ndim == 2}
    if any(p.ndim != 2 for p in parts) or len(cols) != 1:
        raise ValueError("concat_rows expects matrices with equal column counts")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=0)

    def backward(g, grads):
        for p, o, n in zip(parts, offsets, sizes):
            _acc(grads, p.id, g[o:o + n])

    return tape.record(out, backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("nothing to concatenate")
    tape = _check_tape(*parts)
    rows = {p.shape[0] for p in parts if p.ndim == 2}
    if any(p.ndim != 2 for p in parts) or len(rows) != 1:
        raise ValueError("concat_cols expects matrices with equal row counts")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward(g, grads):
        for p, o, n in zip(parts, offsets, sizes):
            _acc(grads, p.id, g[:, o:o + n])

    return tape.record(out, backward)


def rowsum(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"rowsum expects a matrix, got shape {a.shape}")
    out = a.data.sum(axis=1)

    def backward(g, grads):
        _acc(grads, a.id, np.broadcast_to(g[:, None], a.shape))

    return a.tape.record(out, backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.tape.dtype)

    def backward(g, grads):
        _acc(grads, a.id, np.broadcast_to(g, a.shape))

    return a.tape.record(out, backward)


def sum_squares(a: Tensor) -> Tensor:
    out = np.asarray((a.data * a.data).sum(), dtype=a.tape.dtype)

    def backward(g, grads):
        _acc(grads, a.id, 2.0 * g * a.data)

    return a.tape.record(out, backward)


def scale_rows(m: Tensor, v) -> Tensor:
    """Multiplies row i of m by v[i]. v may be a Tensor or a constant array."""
    if m.ndim != 2:
        raise ValueError(f"scale_rows expects a matrix, got shape {m.shape}")
    if isinstance(v, Tensor):
        tape = _check_tape(m, v)
        if v.ndim != 1 or v.size != m.shape[0]:
            raise ValueError(f"row scale shape mismatch: {m.shape} vs {v.shape}")
        out = m.data * v.data[:, None]

        def backward(g, grads):
            _acc(grads, m.id, g * v.data[:, None])
            _acc(grads, v.id, (g * m.data).sum(axis=1))

        return tape.record(out, backward)

    c = np.asarray(v, dtype=m.tape.dtype)
    if c.ndim != 1 or c.size != m.shape[0]:
        raise ValueError(f"row scale shape mismatch: {m.shape} vs {c.shape}")
    out = m.data * c[:, None]

    def backward(g, grads):
        _acc(grads, m.id, g * c[:, None])

    return m.tape.record(out, backward)


def segment_reduce(values: Tensor, segments, num_segments: int, mode: str = "sum") -> Tensor:
    """Per-segment sum, mean or max over rows. Empty segments yield zero rows."""
    if mode not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduce mode {mode!r}")
    if values.ndim not in (1, 2):
        raise ValueError(f"segment_reduce expects flat or matrix input, got {values.shape}")
    if num_segments < 0:
        raise ValueError("num_segments must be non-negative")
    rows = values.shape[0] if values.ndim else 0
    segs = _index_array(segments, max(num_segments, 1), "segment ids")
    if segs.size != rows:
        raise ValueError(f"segment ids cover {segs.size} rows, values have {rows}")
    flat_in = values.ndim == 1
    data = values.data[:, None] if flat_in else values.data
    cols = data.shape[1]
    tape = values.tape
    counts = np.bincount(segs, minlength=num_segments)

    if mode in ("sum", "mean"):
        out = _ordered_segment_sum(data, segs, num_segments)
        if mode == "mean":
            out = out / np.maximum(counts, 1)[:, None]

        def backward(g, grads):
            g2 = np.asarray(g)
            if flat_in:
                g2 = g2[:, None]
            pulled = g2[segs]
            if mode == "mean":
                pulled = pulled / np.maximum(counts, 1)[segs, None]
            _acc(grads, values.id, pulled[:, 0] if flat_in else pulled)

        out_final = out[:, 0] if flat_in else out
        return tape.record(out_final, backward)

    # max: gradient routes to the first maximal row entry of each segment
    maxed = np.full((num_segments, cols), -np.inf)
    if rows:
        np.maximum.at(maxed, segs, data)
    empty = counts == 0
    out = maxed.copy()
    out[empty] = 0.0

    winner = np.full((num_segments, cols), -1, dtype=np.int64)
    gap = np.inf
    if rows:
        for c in range(cols):
            col = data[:, c]
            hit = col == maxed[segs, c]
            w = np.full(num_segments, rows, dtype=np.int64)
            np.minimum.at(w, segs[hit], np.flatnonzero(hit))
            winner[:, c] = np.where(empty, -1, w)
            # distance between the top two values bounds how safe a
            # finite-difference probe is around this max
            order = np.lexsort((col, segs))
            ss = segs[order]
            vv = col[order]
            run_end = np.flatnonzero(np.diff(ss))
            last = np.concatenate([run_end, [len(ss) - 1]])
            starts = np.concatenate([[0], last[:-1] + 1])
            cand = last[last - starts >= 1]
            if cand.size:
                gap = min(gap, float(np.min(vv[cand] - vv[cand - 1])))

    def backward(g, grads):
        g2 = np.asarray(g)
        if flat_in:
            g2 = g2[:, None]
        buf = np.zeros(data.shape, dtype=tape.dtype)
        for c in range(cols):
            w = winner[:, c]
            ok = w >= 0
            buf[w[ok], c] += g2[ok, c]
        _acc(grads, values.id, buf[:, 0] if flat_in else buf)

    out_final = out[:, 0] if flat_in else out
    return tape.record(out_final, backward, kink_gap=gap)


def segment_softmax(logits: Tensor, segments) -> Tensor:
    """Softmax within each segment of a flat logit vector.

    Numerically stabilized by subtracting the per-segment max. Entries of a
    segment sum to 1; a singleton segment maps to exactly 1. Empty input
    yields empty output.
    """
    if logits.ndim != 1:
        raise ValueError(f"segment_softmax expects a flat tensor, got {logits.shape}")
    segs = np.asarray(segments, dtype=np.int64)
    if segs.ndim != 1 or segs.size != logits.size:
        raise ValueError("segment ids must align with the logits")
    if segs.size and segs.min() < 0:
        raise ValueError("segment ids must be non-negative")
    tape = logits.tape
    n = int(segs.max()) + 1 if segs.size else 0
    x = logits.data
    if x.size:
        mx = np.full(n, -np.inf)
        np.maximum.at(mx, segs, x)
        e = np.exp(x - mx[segs])
        denom = _ordered_segment_sum(e, segs, n)
        y = e / denom[segs]
    else:
        y = np.zeros(0, dtype=tape.dtype)

    def backward(g, grads):
        if y.size == 0:
            _acc(grads, logits.id, np.zeros(0, dtype=tape.dtype))
            return
        s = _ordered_segment_sum(y * g, segs, n)
        _acc(grads, logits.id, y * (g - s[segs]))

    return tape.record(y, backward)


def row_softmax(m: Tensor) -> Tensor:
    """Softmax along each row of a matrix, stabilized by the row max."""
    if m.ndim != 2:
        raise ValueError(f"row_softmax expects a matrix, got shape {m.shape}")
    x = m.data
    mx = x.max(axis=1, keepdims=True) if x.size else np.zeros((x.shape[0], 1))
    e = np.exp(x - mx)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g, grads):
        s = (y * g).sum(axis=1, keepdims=True)
        _acc(grads, m.id, y * (g - s))

    return m.tape.record(y, backward)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(
    f: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    *,
    rel_floor: float = 1e-8,
    kink_tol: float = 1e-6,
    kink_shift: float = 1e-3,
) -> float:
    """Compares tape gradients of f against central differences.

    f receives a fresh tape plus one leaf per entry of params and must return
    a scalar Tensor. Returns the maximum relative error
    |analytic - numeric| / max(|analytic|, |numeric|, rel_floor) over all
    parameter entries.

    If any recorded pre-activation sits within kink_tol of a non-smooth
    point, every parameter is shifted by +kink_shift and the check restarts
    once; if the kink persists, KinkError is raised so the caller can report
    and skip the case.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def build(p):
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in p.items()}
        loss = f(tape, leaves)
        if not isinstance(loss, Tensor) or loss.ndim != 0:
            raise ValueError("f must return a scalar Tensor")
        return tape, leaves, loss

    tape, leaves, loss = build(work)
    if tape.min_kink_gap() < kink_tol:
        work = {k: v + kink_shift for k, v in work.items()}
        tape, leaves, loss = build(work)
        if tape.min_kink_gap() < kink_tol:
            raise KinkError(
                f"pre-activation within {kink_tol} of a kink even after shifting by {kink_shift}"
            )

    gmap = tape.backward(loss)
    analytic = {k: np.array(gmap[leaves[k]], dtype=np.float64) for k in work}

    def value(p) -> float:
        _, _, out = build(p)
        return float(out.data)

    max_err = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value(work)
            flat[i] = orig - h
            down = value(work)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(ana[i]), abs(numeric), rel_floor)
            max_err = max(max_err, abs(ana[i] - numeric) / denom)
    return max_err
