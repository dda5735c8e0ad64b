"""Numerical substrate: tape-based reverse-mode gradients, Adam, PCA, RBF kernels.

All arrays are float64 numpy arrays of at most two dimensions. Scalars produced
by reductions are 0-d arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Var",
    "GradTape",
    "AdamState",
    "adam_step",
    "rbf_kernel",
    "pairwise_sq_dists",
    "median_of_pairs",
    "median_pairs",
    "median_heuristic_bandwidth",
    "pca_project",
    "make_rng",
]


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Seeded generator; tuples of ints derive independent streams."""
    return np.random.default_rng(seed)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {what}")


def rbf_kernel(a, b, bandwidth: float = 1.0) -> float:
    """Gaussian kernel exp(-||a - b||^2 / (2 bandwidth^2)) between two vectors."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    _check_finite(a, "a")
    _check_finite(b, "b")
    diff = a - b
    return float(np.exp(-np.dot(diff, diff) / (2.0 * bandwidth * bandwidth)))


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``a`` and rows of ``b``."""
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def median_heuristic_bandwidth(points) -> float:
    """sqrt(median pairwise squared distance / 2) over all unordered row pairs."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 rows")
    diff = pts[:, None, :] - pts[None, :, :]
    return median_of_pairs(np.einsum("ijk,ijk->ij", diff, diff))


@lru_cache(maxsize=256)
def _upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, k=1)


def median_pairs(sq_dists: np.ndarray) -> list[tuple[int, int]]:
    """Index pairs ``(i, j)``, i < j, whose mean squared distance is the median.

    One pair for an odd number of pairs, the two middle pairs otherwise. When
    more than half the pairs coincide (median 0) the median is taken over the
    positive pairs instead.
    """
    n = sq_dists.shape[0]
    rows, cols = _upper_pairs(n)
    pairs = sq_dists[rows, cols]
    if pairs.size == 0:
        raise ValueError("median heuristic needs at least 2 rows")
    order = np.argsort(pairs, kind="stable")
    m = pairs.size
    mid = order[[(m - 1) // 2, m // 2]]
    if pairs[mid].mean() <= 0.0:
        keep = np.flatnonzero(pairs > 0)
        if keep.size == 0:
            raise ValueError("degenerate bandwidth: all rows identical")
        order = keep[np.argsort(pairs[keep], kind="stable")]
        m = keep.size
        mid = order[[(m - 1) // 2, m // 2]]
    mid = np.unique(mid)
    return [(int(rows[k]), int(cols[k])) for k in mid]


def median_of_pairs(sq_dists: np.ndarray) -> float:
    """Median-heuristic bandwidth from a symmetric squared-distance matrix."""
    med = float(np.mean([sq_dists[i, j] for i, j in median_pairs(sq_dists)]))
    return float(np.sqrt(med / 2.0))


class Var:
    """A node on a :class:`GradTape` holding a value and, after backward, a grad."""

    __slots__ = ("value", "grad", "tape", "index", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "GradTape", requires_grad: bool):
        self.value = value
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.index = -1
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar delegating to the owning tape
    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


@dataclass
class _Record:
    out: Var
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class GradTape:
    """Ordered record of primitive operations for one forward evaluation.

    Primitives: matmul, add, sub, scale, relu, exp, square, sum, mean,
    take_rows, block, sq_dists and rbf (pairwise Gaussian kernel matrix). Each records a closure
    mapping the output gradient to input gradients; :meth:`gradient` replays
    the records in reverse.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    # -- leaves ---------------------------------------------------------
    def param(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self, True)

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self, False)

    def _wrap(self, x) -> Var:
        if isinstance(x, Var):
            return x
        return self.const(x)

    def _record(self, value, inputs, backward) -> Var:
        needs = any(v.requires_grad for v in inputs)
        out = Var(value, self, needs)
        if needs:
            out.index = len(self.records)
            self.records.append(_Record(out, inputs, backward))
        return out

    # -- primitives -----------------------------------------------------
    def matmul(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        return self._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def add(self, a, b) -> Var:
        """Elementwise sum; ``b`` may be a row vector broadcast over rows."""
        a, b = self._wrap(a), self._wrap(b)
        ashape, bshape = a.value.shape, b.value.shape
        return self._record(
            a.value + b.value,
            (a, b),
            lambda g: (_unbroadcast(g, ashape), _unbroadcast(g, bshape)),
        )

    def sub(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        ashape, bshape = a.value.shape, b.value.shape
        return self._record(
            a.value - b.value,
            (a, b),
            lambda g: (_unbroadcast(g, ashape), -_unbroadcast(g, bshape)),
        )

    def scale(self, a, c) -> Var:
        """Multiply by a constant scalar or a same-shape constant array."""
        a = self._wrap(a)
        c = float(c) if np.ndim(c) == 0 else np.asarray(c, dtype=np.float64)
        return self._record(a.value * c, (a,), lambda g: (g * c,))

    def relu(self, a) -> Var:
        a = self._wrap(a)
        mask = a.value > 0
        return self._record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))

    def exp(self, a) -> Var:
        a = self._wrap(a)
        out = np.exp(a.value)
        return self._record(out, (a,), lambda g: (g * out,))

    def square(self, a) -> Var:
        a = self._wrap(a)
        av = a.value
        return self._record(av * av, (a,), lambda g: (2.0 * g * av,))

    def sum(self, a, axis: int | None = None) -> Var:
        a = self._wrap(a)
        shape = a.value.shape
        if axis is None:
            return self._record(
                np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
            )
        return self._record(
            a.value.sum(axis=axis),
            (a,),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
        )

    def mean(self, a, axis: int | None = None) -> Var:
        a = self._wrap(a)
        n = a.value.size if axis is None else a.value.shape[axis]
        return self.scale(self.sum(a, axis), 1.0 / n)

    def take_rows(self, a, rows) -> Var:
        """Rows ``a[rows]``; ``rows`` must not repeat."""
        a = self._wrap(a)
        rows = np.asarray(rows, dtype=np.intp)
        shape = a.value.shape

        def back(g):
            full = np.zeros(shape)
            full[rows] = g
            return (full,)

        return self._record(a.value[rows], (a,), back)

    def sq_dists(self, a) -> Var:
        """Matrix of squared distances between all row pairs of ``a``."""
        a = self._wrap(a)
        av = a.value
        d = pairwise_sq_dists(av, av)
        np.fill_diagonal(d, 0.0)

        def back(g):
            s = g + g.T
            return (2.0 * (s.sum(axis=1)[:, None] * av - s @ av),)

        return self._record(d, (a,), back)

    def block(self, a, rows, cols) -> Var:
        """Sub-matrix ``a[rows][:, cols]``; indices must not repeat within an axis."""
        a = self._wrap(a)
        ix = np.ix_(np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp))
        shape = a.value.shape

        def back(g):
            full = np.zeros(shape)
            full[ix] = g
            return (full,)

        return self._record(a.value[ix], (a,), back)

    def divide(self, a, s) -> Var:
        """``a / s`` for a positive scalar var ``s``; gradient flows into both."""
        a, s = self._wrap(a), self._wrap(s)
        if s.value.size != 1:
            raise ValueError("divisor must be a scalar")
        sv = float(s.value.reshape(()))
        if not sv > 0:
            raise ValueError("divisor must be positive")
        out = a.value / sv
        shape = s.value.shape

        def back(g):
            return (g / sv, np.full(shape, -(g * out).sum() / sv))

        return self._record(out, (a, s), back)

    def rbf(self, a, b, bandwidth: float) -> Var:
        """Kernel matrix K[i, j] = exp(-||a_i - b_j||^2 / (2 bw^2)).

        ``bandwidth`` is a constant: no gradient flows into it.
        """
        a, b = self._wrap(a), self._wrap(b)
        if not bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        av, bv = a.value, b.value
        inv = 1.0 / (2.0 * bandwidth * bandwidth)
        k = np.exp(-pairwise_sq_dists(av, bv) * inv)

        def back(g):
            # d k_ij / d a_i = -2 inv k_ij (a_i - b_j)
            w = g * k * (-2.0 * inv)
            ga = w.sum(axis=1)[:, None] * av - w @ bv
            gb = w.sum(axis=0)[:, None] * bv - w.T @ av
            return (ga, gb)

        return self._record(k, (a, b), back)

    # -- reverse pass ---------------------------------------------------
    def gradient(self, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``output`` with respect to each var in ``wrt``."""
        if output.value.size != 1:
            raise ValueError("gradient requires a scalar output")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
        for rec in reversed(self.records[: output.index + 1] if output.index >= 0 else []):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for v in wrt:
            g = grads.get(id(v))
            out.append(np.zeros_like(v.value) if g is None else g)
        return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    names: Sequence[str] | None = None,
) -> list[np.ndarray]:
    """One Adam update with bias correction and coupled L2 weight decay.

    Returns new parameter arrays; ``state`` is advanced in place.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and Adam state disagree in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape or state.m[i].shape != params[i].shape:
            raise ValueError(f"shape mismatch in parameter block {i}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names is not None else str(i)
            raise FloatingPointError(f"non-finite gradient in parameter block {label}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay:
            g = g + state.weight_decay * p
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def pca_project(features, k: int):
    """Project rows onto the top-``k`` principal axes.

    Returns
    -------
    projected : (n, k) array, centered features times components
    components : (d, k) array with orthonormal columns
    explained_variance : (k,) non-increasing population variances
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if k < 1 or k > d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    if n < k:
        raise ValueError("need at least k rows")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order]
    # sign convention: largest-magnitude loading positive
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(k)])
    flip[flip == 0] = 1.0
    comps = comps * flip
    return centered @ comps, comps, evals
