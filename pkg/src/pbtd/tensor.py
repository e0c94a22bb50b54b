"""Dense multilinear algebra.

A dense tensor is a plain float64 :class:`numpy.ndarray`. The linearization
used throughout the package is column-major (mode 0 varies fastest), so
``vec(x) == x.ravel(order="F")``. Mode-n unfoldings follow the Kolda-Bader
ordering: the remaining indices are linearized with the lowest remaining mode
varying fastest. Under this convention

    vec(G x_0 A0 x_1 A1 ... x_{N-1} A{N-1}) == (A{N-1} kron ... kron A0) vec(G)

Modes are zero-based, as numpy axes are.
"""

from functools import reduce

import numpy as np


def as_tensor(values, dims=None):
    """Return a float64 array, optionally built from a flat vec-ordered array."""
    arr = np.asarray(values, dtype=np.float64)
    if dims is None:
        if arr.ndim < 1:
            raise ValueError("a tensor needs at least one mode")
        return arr
    dims = tuple(int(d) for d in dims)
    if len(dims) < 1 or any(d < 1 for d in dims):
        raise ValueError(f"invalid dimensions {dims}")
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"{arr.size} values do not fill a tensor of shape {dims}")
    return arr.reshape(dims, order="F")


def vec(x):
    """Column-major vectorization."""
    return np.asarray(x).ravel(order="F")


def _check_mode(n, ndim):
    if not 0 <= n < ndim:
        raise ValueError(f"mode {n} out of range for a {ndim}-way tensor")


def matricize(x, n):
    """Mode-n unfolding ``X_(n)`` of shape ``(I_n, J / I_n)``."""
    x = np.asarray(x)
    _check_mode(n, x.ndim)
    return np.moveaxis(x, n, 0).reshape(x.shape[n], -1, order="F")


def fold(m, n, dims):
    """Inverse of :func:`matricize` for the same mode and dimensions."""
    m = np.asarray(m, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    _check_mode(n, len(dims))
    rest = dims[:n] + dims[n + 1:]
    if m.ndim != 2 or m.shape != (dims[n], int(np.prod(rest))):
        raise ValueError(f"matrix of shape {m.shape} cannot be folded into {dims} along mode {n}")
    return np.moveaxis(m.reshape((dims[n],) + rest, order="F"), 0, n)


def mode_n_product(x, m, n):
    """n-mode product ``X x_n M``, defined by ``(X x_n M)_(n) = M X_(n)``."""
    x = np.asarray(x)
    m = np.asarray(m)
    _check_mode(n, x.ndim)
    if m.ndim != 2 or m.shape[1] != x.shape[n]:
        raise ValueError(
            f"matrix with {m.shape[-1]} columns cannot multiply mode {n} of size {x.shape[n]}"
        )
    return np.moveaxis(np.tensordot(m, x, axes=(1, n)), 0, n)


def kronecker(a, b):
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def kronecker_chain(mats):
    """``mats[-1] kron ... kron mats[0]``, the order matching vec()."""
    return reduce(lambda acc, m: kronecker(m, acc), mats[1:], np.atleast_2d(mats[0]))


def multilinear_reconstruct(core, factors, skip=None, transpose=False):
    """Multiply ``core`` by ``factors[n]`` along every mode n.

    Parameters
    ----------
    core : ndarray
    factors : sequence of 2-D arrays
        ``factors[n]`` has ``core.shape[n]`` columns (rows when ``transpose``).
    skip : int, optional
        Mode left untouched.
    transpose : bool
        Multiply by ``factors[n].T`` instead, i.e. project onto the factors.
    """
    core = np.asarray(core)
    if len(factors) != core.ndim:
        raise ValueError(f"{len(factors)} factors given for a {core.ndim}-way core")
    out = core
    for n, a in enumerate(factors):
        if n == skip:
            continue
        out = mode_n_product(out, a.T if transpose else a, n)
    return out


def blkdiag_core(cores):
    """Stack cores along the hyper-diagonal of a single larger core."""
    cores = [np.asarray(c, dtype=np.float64) for c in cores]
    if not cores:
        raise ValueError("no cores given")
    order = cores[0].ndim
    if any(c.ndim != order for c in cores):
        raise ValueError("all cores must have the same order")
    shape = tuple(sum(c.shape[n] for c in cores) for n in range(order))
    out = np.zeros(shape)
    offset = np.zeros(order, dtype=int)
    for c in cores:
        out[tuple(slice(o, o + d) for o, d in zip(offset, c.shape))] = c
        offset += c.shape
    return out
