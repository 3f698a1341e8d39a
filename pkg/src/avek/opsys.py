"""Block operator systems ``F_i(x) = y_i`` on weighted finite-dimensional spaces.

Elements of the spaces are plain :class:`numpy.ndarray` objects; the
:class:`Space` they belong to carries the shape and the (diagonal) quadrature
weights that define the inner product.  Every operation that takes an element
checks it against the expected space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "SpaceMismatchError",
    "DegenerateBlockError",
    "Space",
    "OperatorBlock",
    "LinearBlock",
    "MatrixBlock",
    "NonlinearBlock",
    "ScaledBlock",
    "BlockSystem",
    "residual",
    "gradient_step_direction",
    "estimate_norm",
    "rescale_system",
    "adjoint_mismatch",
]


class SpaceMismatchError(ValueError):
    """An element does not live in the space an operation expects."""

    def __init__(self, message, block=None):
        if block is not None:
            message = f"block {block}: {message}"
        super().__init__(message)
        self.block = block


class DegenerateBlockError(ValueError):
    pass


class Space:
    """Real Hilbert space ``R^shape`` with inner product ``sum(w * a * b)``.

    Parameters
    ----------
    shape : tuple of int
        Shape of the coordinate arrays.
    weights : float or array_like, optional
        Positive cell measure, a scalar or an array broadcastable to `shape`.
        Zero entries are allowed (e.g. the ``r = 0`` row of a polar table).
    name : str, optional
        Tag used in error messages.
    """

    def __init__(self, shape, weights=1.0, name="X"):
        self.shape = tuple(int(s) for s in np.atleast_1d(shape))
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("space weights must be finite and nonnegative")
        if w.ndim:
            w = np.broadcast_to(w, self.shape).copy()
            w.setflags(write=False)
        self.weights = w
        self.name = name

    @property
    def size(self):
        return int(np.prod(self.shape))

    def __repr__(self):
        return f"Space({self.name!r}, shape={self.shape})"

    def __eq__(self, other):
        if not isinstance(other, Space) or self.shape != other.shape:
            return False
        return np.array_equal(np.broadcast_to(self.weights, self.shape),
                              np.broadcast_to(other.weights, other.shape))

    __hash__ = object.__hash__

    def check(self, x, block=None, what="element"):
        x = np.asarray(x, dtype=float)
        if x.shape != self.shape:
            raise SpaceMismatchError(
                f"{what} has shape {x.shape}, expected {self.shape} in space {self.name}",
                block)
        if not np.all(np.isfinite(x)):
            raise SpaceMismatchError(f"{what} has non-finite entries", block)
        return x

    def inner(self, a, b):
        return float(np.sum(self.weights * a * b))

    def norm(self, a):
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def zeros(self):
        return np.zeros(self.shape)

    def random(self, rng):
        return rng.standard_normal(self.shape)


class OperatorBlock:
    """One equation ``F_i : X -> Y_i`` of a system.

    Subclasses provide :meth:`apply`, :meth:`deriv_apply` and
    :meth:`adjoint_deriv_apply`.  `eta` is the tangential cone constant
    (0 for linear maps) and `norm_bound` an estimate of ``sup ||F_i'(x)||``;
    it may be left as ``None`` and filled in with :func:`estimate_norm`.
    """

    linear = False

    def __init__(self, domain: Space, codomain: Space, norm_bound=None, eta=0.0):
        if not 0.0 <= eta < 0.5:
            raise ValueError(f"eta must lie in [0, 1/2), got {eta}")
        self.domain = domain
        self.codomain = codomain
        self.norm_bound = norm_bound
        self.eta = float(eta)

    def apply(self, x):
        raise NotImplementedError

    def deriv_apply(self, x, h):
        raise NotImplementedError

    def adjoint_deriv_apply(self, x, w):
        raise NotImplementedError


class LinearBlock(OperatorBlock):
    """Linear block given by a forward map and its adjoint (w.r.t. the space weights)."""

    linear = True

    def __init__(self, forward: Callable, adjoint: Callable, domain, codomain,
                 norm_bound=None):
        super().__init__(domain, codomain, norm_bound=norm_bound, eta=0.0)
        self._forward = forward
        self._adjoint = adjoint

    def apply(self, x):
        return self._forward(x)

    def deriv_apply(self, x, h):
        return self._forward(h)

    def adjoint_deriv_apply(self, x, w):
        return self._adjoint(w)


class MatrixBlock(LinearBlock):
    """Block ``x -> A @ x`` for a dense or sparse matrix.

    The adjoint is taken with respect to the weighted inner products of the
    two spaces, ``A* = W_X^{-1} A^T W_Y``; with the default unit weights this
    is just the transpose.
    """

    def __init__(self, matrix, domain=None, codomain=None, norm_bound=None):
        self.matrix = matrix
        m, k = matrix.shape
        domain = domain if domain is not None else Space((k,), name="X")
        codomain = codomain if codomain is not None else Space((m,), name="Y")
        if domain.size != k or codomain.size != m:
            raise SpaceMismatchError("matrix shape does not match the spaces")
        wx = np.broadcast_to(domain.weights, domain.shape).ravel()
        wy = np.broadcast_to(codomain.weights, codomain.shape).ravel()
        if np.any(wx == 0):
            raise ValueError("domain weights must be positive to define an adjoint")

        def forward(x):
            return np.asarray(matrix @ x.ravel()).reshape(codomain.shape)

        def adjoint(w):
            return (np.asarray(matrix.T @ (wy * w.ravel())) / wx).reshape(domain.shape)

        super().__init__(forward, adjoint, domain, codomain, norm_bound=norm_bound)


class NonlinearBlock(OperatorBlock):
    """Block defined by user callables ``apply(x)``, ``deriv(x, h)`` and ``adjoint(x, w)``."""

    def __init__(self, apply, deriv, adjoint, domain, codomain, norm_bound=None, eta=0.0):
        super().__init__(domain, codomain, norm_bound=norm_bound, eta=eta)
        self._apply, self._deriv, self._adjoint = apply, deriv, adjoint

    def apply(self, x):
        return self._apply(x)

    def deriv_apply(self, x, h):
        return self._deriv(x, h)

    def adjoint_deriv_apply(self, x, w):
        return self._adjoint(x, w)


class ScaledBlock(OperatorBlock):
    """``c * F`` for a wrapped block ``F``."""

    def __init__(self, block: OperatorBlock, factor: float):
        nb = None if block.norm_bound is None else abs(factor) * block.norm_bound
        super().__init__(block.domain, block.codomain, norm_bound=nb, eta=block.eta)
        self.block = block
        self.factor = float(factor)
        self.linear = block.linear

    def apply(self, x):
        return self.factor * self.block.apply(x)

    def deriv_apply(self, x, h):
        return self.factor * self.block.deriv_apply(x, h)

    def adjoint_deriv_apply(self, x, w):
        return self.factor * self.block.adjoint_deriv_apply(x, w)


@dataclass
class BlockSystem:
    """Ordered equations with (possibly noisy) data ``y_i`` and noise levels ``delta_i``."""

    blocks: Sequence[OperatorBlock]
    data: Sequence[np.ndarray]
    noise_levels: Sequence[float] = field(default=None)

    def __post_init__(self):
        self.blocks = list(self.blocks)
        n = len(self.blocks)
        if n < 1:
            raise ValueError("a system needs at least one block")
        if self.noise_levels is None:
            self.noise_levels = [0.0] * n
        if len(self.data) != n or len(self.noise_levels) != n:
            raise ValueError(
                f"blocks ({n}), data ({len(self.data)}) and noise levels "
                f"({len(self.noise_levels)}) must have the same length")
        self.data = [b.codomain.check(y, block=i, what="data")
                     for i, (b, y) in enumerate(zip(self.blocks, self.data))]
        self.noise_levels = [float(d) for d in self.noise_levels]
        if any(d < 0 for d in self.noise_levels):
            raise ValueError("noise levels must be nonnegative")
        domain = self.blocks[0].domain
        for i, b in enumerate(self.blocks):
            if b.domain.shape != domain.shape:
                raise SpaceMismatchError("blocks disagree on the image space", i)

    @property
    def n(self):
        return len(self.blocks)

    @property
    def domain(self) -> Space:
        return self.blocks[0].domain

    @property
    def noisy(self):
        return any(d > 0 for d in self.noise_levels)

    def residual_norms(self, x):
        return np.array([self.blocks[i].codomain.norm(residual(self, i, x))
                         for i in range(self.n)])

    def total_residual(self, x):
        return float(np.sqrt(np.sum(self.residual_norms(x) ** 2)))


def _check_index(sys, i):
    if not 0 <= i < sys.n:
        raise IndexError(f"block index {i} out of range for a system of {sys.n} blocks")


def residual(sys: BlockSystem, i: int, x) -> np.ndarray:
    """``F_i(x) - y_i`` (0-based block index)."""
    _check_index(sys, i)
    block = sys.blocks[i]
    x = block.domain.check(x, block=i, what="iterate")
    fx = block.codomain.check(block.apply(x), block=i, what="F_i(x)")
    return fx - sys.data[i]


def gradient_step_direction(sys: BlockSystem, i: int, x) -> np.ndarray:
    """``F_i'(x)^* (F_i(x) - y_i)``, the gradient of ``||F_i(x) - y_i||^2 / 2``."""
    r = residual(sys, i, x)
    return sys.blocks[i].domain.check(
        sys.blocks[i].adjoint_deriv_apply(x, r), block=i, what="adjoint output")


def estimate_norm(block: OperatorBlock, iters=50, seed=0, x=None):
    """Power iteration on ``F'(x)^* F'(x)``; returns the estimated operator norm.

    The estimate ``||F' v_k|| / ||v_k||`` is nondecreasing in `iters` for a
    fixed `seed` and never exceeds the true norm (for an exact adjoint).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    dom = block.domain
    x = dom.zeros() if x is None else x
    rng = np.random.default_rng(seed)
    v = dom.random(rng)
    v /= dom.norm(v)
    est = 0.0
    for _ in range(iters):
        w = block.deriv_apply(x, v)
        est = block.codomain.norm(w)
        if est == 0.0:
            return 0.0
        v = block.adjoint_deriv_apply(x, w)
        nv = dom.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
    return float(block.codomain.norm(block.deriv_apply(x, v)))


def rescale_system(sys: BlockSystem, target=1.0, iters=50, seed=0) -> BlockSystem:
    """Scale every block (and its data and noise level) to operator norm `target`.

    Blocks without a `norm_bound` get one from :func:`estimate_norm`.  The
    solution set is unchanged since each equation is multiplied by a positive
    constant.
    """
    if target <= 0:
        raise ValueError("target norm must be positive")
    blocks, data, deltas = [], [], []
    for i, (b, y, d) in enumerate(zip(sys.blocks, sys.data, sys.noise_levels)):
        nb = b.norm_bound if b.norm_bound is not None else estimate_norm(b, iters, seed)
        if nb <= 0:
            raise DegenerateBlockError(f"block {i} has zero norm and cannot be rescaled")
        c = target / nb
        scaled = ScaledBlock(b, c)
        scaled.norm_bound = target
        blocks.append(scaled)
        data.append(c * y)
        deltas.append(c * d)
    return BlockSystem(blocks, data, deltas)


def adjoint_mismatch(block: OperatorBlock, rng, probes=100, x=None):
    """Largest ``|<F'h, w> - <h, F'^* w>| / (||F'h|| ||w||)`` over random probe pairs.

    Normalizing by ``||F'h|| ||w||`` rather than ``||h|| ||w||`` keeps the
    measure scale-free for operators whose norm is far from one.
    """
    dom, cod = block.domain, block.codomain
    x = dom.zeros() if x is None else x
    worst = 0.0
    for _ in range(probes):
        h, w = dom.random(rng), cod.random(rng)
        fh = block.deriv_apply(x, h)
        lhs = cod.inner(fh, w)
        rhs = dom.inner(h, block.adjoint_deriv_apply(x, w))
        scale = cod.norm(fh) * cod.norm(w)
        if scale > 0:
            worst = max(worst, abs(lhs - rhs) / scale)
    return worst
