"""
Array-valued reverse-mode differentiation on an append-only tape.

Every operation appends one node holding its parents and one vector-Jacobian
product per parent. Complex intermediates carry gradients as
dL/dRe + j dL/dIm of the real scalar loss L, so holomorphic operations
multiply by the conjugate derivative and real inputs keep only the real part
of what flows into them.
"""
import logging

import numpy as np
from django.core.exceptions import ValidationError
from scipy.linalg import expm, expm_frechet

logger = logging.getLogger(__name__)


def _is_complex(value):
    return np.iscomplexobj(value)


def _unbroadcast(grad, value):
    """Sum a gradient back down to the shape of the value it belongs to"""
    shape = np.shape(value)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    if not _is_complex(value) and _is_complex(grad):
        grad = grad.real
    return grad


def _value(x):
    return x.value if isinstance(x, Variable) else np.asarray(x)


class Variable:
    """Handle to one node of a tape"""

    __slots__ = ('tape', 'index', 'value')
    __array_ufunc__ = None

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Variable(index={self.index}, shape={self.value.shape}, dtype={self.value.dtype})"

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.neg(self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __rmatmul__(self, other):
        return self.tape.matmul(other, self)

    def __getitem__(self, key):
        return self.tape.getitem(self, key)


class Tape:
    """Append-only record of array operations with a reverse sweep"""

    def __init__(self):
        self._parents = []
        self._vjps = []

    def __len__(self):
        return len(self._parents)

    def _push(self, value, parents=(), vjps=()):
        index = len(self._parents)
        self._parents.append(tuple(parents))
        self._vjps.append(tuple(vjps))
        return Variable(self, index, value)

    def _record(self, value, inputs):
        """
        Append a node for ``value``. ``inputs`` pairs every operand with the
        VJP that maps the output gradient onto it; constants are skipped.
        """
        parents, vjps = [], []
        for operand, vjp in inputs:
            if isinstance(operand, Variable):
                if operand.tape is not self:
                    raise ValidationError('Operand was recorded on a different tape')
                parents.append(operand.index)
                vjps.append(lambda g, operand=operand, vjp=vjp: _unbroadcast(vjp(g), operand.value))
        return self._push(value, parents, vjps)

    def variable(self, value):
        """Leaf holding a copy of ``value``"""
        value = np.array(value, dtype=complex if _is_complex(value) else float)
        return self._push(value)

    # elementwise arithmetic

    def add(self, a, b):
        return self._record(_value(a) + _value(b), [(a, lambda g: g), (b, lambda g: g)])

    def sub(self, a, b):
        return self._record(_value(a) - _value(b), [(a, lambda g: g), (b, lambda g: -g)])

    def mul(self, a, b):
        A, B = _value(a), _value(b)
        return self._record(A * B, [(a, lambda g: g * np.conj(B)), (b, lambda g: g * np.conj(A))])

    def div(self, a, b):
        A, B = _value(a), _value(b)
        out = A / B
        return self._record(out, [(a, lambda g: g / np.conj(B)), (b, lambda g: -g * np.conj(out / B))])

    def neg(self, x):
        return self._record(-_value(x), [(x, lambda g: -g)])

    def exp(self, x):
        out = np.exp(_value(x))
        return self._record(out, [(x, lambda g: g * np.conj(out))])

    def log10(self, x):
        X = _value(x)
        return self._record(np.log10(X), [(x, lambda g: g / (X * np.log(10.0)))])

    def sqrt(self, x):
        out = np.sqrt(_value(x))
        return self._record(out, [(x, lambda g: g / (2.0 * out))])

    def square(self, x):
        X = _value(x)
        return self._record(X * X, [(x, lambda g: g * np.conj(2.0 * X))])

    def abs(self, x):
        """|x|, with a zero subgradient at the origin"""
        X = _value(x)
        out = np.abs(X)
        unit = np.divide(X, out, out=np.zeros_like(X), where=out > 0)
        return self._record(out, [(x, lambda g: g * unit)])

    def abs2(self, x):
        """|x|^2 of a real or complex array"""
        X = _value(x)
        return self._record((X * np.conj(X)).real, [(x, lambda g: 2.0 * g * X)])

    def real(self, x):
        return self._record(np.real(_value(x)), [(x, lambda g: g.astype(complex))])

    def maximum(self, x, floor):
        """Elementwise max against a constant floor"""
        X = _value(x)
        return self._record(np.maximum(X, floor), [(x, lambda g: g * (X > floor))])

    def relu(self, x):
        return self.maximum(x, 0.0)

    # reductions and layout

    def sum(self, x, axis=None, keepdims=False):
        X = _value(x)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, X.shape)

        return self._record(np.sum(X, axis=axis, keepdims=keepdims), [(x, vjp)])

    def mean(self, x, axis=None, keepdims=False):
        X = _value(x)
        count = X.size if axis is None else X.shape[axis]
        return self.sum(x, axis=axis, keepdims=keepdims) / float(count)

    def rev_cumsum(self, x, axis=-1):
        """y[n] = sum_{l >= n} x[l] along ``axis``"""
        X = _value(x)
        out = np.flip(np.cumsum(np.flip(X, axis=axis), axis=axis), axis=axis)
        return self._record(out, [(x, lambda g: np.cumsum(g, axis=axis))])

    def reshape(self, x, shape):
        X = _value(x)
        return self._record(X.reshape(shape), [(x, lambda g: g.reshape(X.shape))])

    def getitem(self, x, key):
        X = _value(x)

        def vjp(g):
            out = np.zeros(X.shape, dtype=np.result_type(g, X))
            np.add.at(out, key, g)
            return out

        return self._record(X[key], [(x, vjp)])

    def take(self, x, indices):
        """Gather from a 1-D array; ``indices`` may have any shape"""
        X = _value(x)
        if X.ndim != 1:
            raise ValidationError(f'take expects a 1-D operand, got shape {X.shape}')
        indices = np.asarray(indices)

        def vjp(g):
            out = np.zeros(X.shape, dtype=np.result_type(g, X))
            np.add.at(out, indices, g)
            return out

        return self._record(X[indices], [(x, vjp)])

    def stack(self, items, axis=0):
        values = [_value(item) for item in items]
        inputs = [(item, lambda g, i=i: np.take(g, i, axis=axis)) for i, item in enumerate(items)]
        return self._record(np.stack(values, axis=axis), inputs)

    # linear algebra

    def matmul(self, a, b):
        A, B = _value(a), _value(b)
        if A.ndim < 2 or B.ndim < 2:
            raise ValidationError(f'matmul expects matrices, got shapes {A.shape} and {B.shape}')
        return self._record(A @ B, [
            (a, lambda g: g @ np.conj(np.swapaxes(B, -1, -2))),
            (b, lambda g: np.conj(np.swapaxes(A, -1, -2)) @ g),
        ])

    def solve(self, s, r):
        """Batched x = S^-1 r; ``r`` broadcasts against S.shape[:-1]"""
        S = _value(s)
        R = np.broadcast_to(_value(r), S.shape[:-1])
        x = np.linalg.solve(S, R[..., None])[..., 0]
        adjoint = {}

        def rhs_grad(g):
            if 'r' not in adjoint:
                adjoint['r'] = np.linalg.solve(np.conj(np.swapaxes(S, -1, -2)), g[..., None])[..., 0]
            return adjoint['r']

        return self._record(x, [
            (s, lambda g: -rhs_grad(g)[..., :, None] * np.conj(x)[..., None, :]),
            (r, rhs_grad),
        ])

    def expm(self, x):
        """Matrix exponential of a real (..., n, n) stack"""
        X = _value(x)
        flat = X.reshape((-1,) + X.shape[-2:])
        out = np.stack([expm(m) for m in flat]).reshape(X.shape)

        def vjp(g):
            g = np.real(g).reshape(flat.shape)
            return np.stack([
                expm_frechet(m.T, gm, compute_expm=False) for m, gm in zip(flat, g)
            ]).reshape(X.shape)

        return self._record(out, [(x, vjp)])

    def skew(self, x):
        """U - U^T with U the strictly upper triangle of the last two axes"""
        X = _value(x)
        upper = np.triu(X, 1)
        return self._record(upper - np.swapaxes(upper, -1, -2),
                            [(x, lambda g: np.triu(g - np.swapaxes(g, -1, -2), 1))])

    # spectral

    def rfft(self, x, n):
        """Real FFT of length n along the last axis"""
        X = _value(x)
        length = X.shape[-1]

        def vjp(g):
            full = np.zeros(g.shape[:-1] + (n,), dtype=complex)
            full[..., :g.shape[-1]] = g
            back = n * np.fft.ifft(full, axis=-1).real
            if length <= n:
                return back[..., :length]
            return np.concatenate([back, np.zeros(g.shape[:-1] + (length - n,))], axis=-1)

        return self._record(np.fft.rfft(X, n=n, axis=-1), [(x, vjp)])

    def irfft(self, x, n):
        """Inverse real FFT of even length n from n/2 + 1 bins along the last axis"""
        X = _value(x)
        if n % 2 or X.shape[-1] != n // 2 + 1:
            raise ValidationError(f'irfft needs an even length and n/2 + 1 bins, got n={n}, bins={X.shape[-1]}')
        weights = np.full(n // 2 + 1, 2.0)
        weights[[0, -1]] = 1.0
        return self._record(np.fft.irfft(X, n=n, axis=-1),
                            [(x, lambda g: np.fft.rfft(g, n=n, axis=-1) * weights / n)])

    # reverse sweep

    def gradients(self, seeds, wrt):
        """
        Reverse sweep from ``seeds`` (Variable -> output gradient) and return
        the gradients of ``wrt`` in order. Nodes the seeds do not depend on
        get exact zeros.
        """
        wanted = {v.index for v in wrt}
        pending = {}
        for var, seed in seeds.items():
            if var.tape is not self:
                raise ValidationError('Seed was recorded on a different tape')
            seed = np.broadcast_to(np.asarray(seed, dtype=var.value.dtype), var.value.shape)
            pending[var.index] = pending[var.index] + seed if var.index in pending else seed

        found = {}
        for index in range(max(pending, default=-1), -1, -1):
            grad = pending.pop(index, None)
            if grad is None:
                continue
            if index in wanted:
                found[index] = grad
            for parent, vjp in zip(self._parents[index], self._vjps[index]):
                contribution = vjp(grad)
                pending[parent] = pending[parent] + contribution if parent in pending else contribution

        return [
            np.array(found[v.index]) if v.index in found else np.zeros_like(v.value)
            for v in wrt
        ]

    def backward(self, output, wrt):
        """Gradients of a scalar output"""
        if output.value.size != 1:
            raise ValidationError(f'backward needs a scalar output, got shape {output.value.shape}')
        return self.gradients({output: 1.0}, wrt)
