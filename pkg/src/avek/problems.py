"""Small dense test systems with known solutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .opsys import BlockSystem, MatrixBlock, Space

__all__ = ["LinearProblem", "random_linear_problem", "standard_problem"]

# Seed of the standard 10-unknown, 5-block system.  Its condition number is
# moderate, so 500 AVEK cycles reach the 1e-6 error level.
STANDARD_SEED = 1


@dataclass
class LinearProblem:
    """A block system ``A_i x = y_i`` together with a solution and the stacked matrix."""

    system: BlockSystem
    matrix: np.ndarray
    solution: np.ndarray
    clean_data: list

    def solve(self):
        """Least-squares solution of the stacked system (the direct oracle)."""
        y = np.concatenate(self.clean_data)
        return np.linalg.lstsq(self.matrix, y, rcond=None)[0]


def random_linear_problem(dim=10, n_blocks=5, rows=4, seed=STANDARD_SEED, noise=0.0,
                          noise_seed=None, unit_blocks=True):
    """Consistent random system with `n_blocks` blocks of `rows` equations each.

    With `unit_blocks` every block matrix is scaled to spectral norm 1, so any
    step ``s <= 1`` obeys ``s ||A_i||^2 <= 1``.  `noise` is the relative size
    of Gaussian data noise per block; ``delta_i`` are set to the exact noise
    norms.
    """
    rng = np.random.default_rng(seed)
    blocks, data, mats = [], [], []
    x_true = rng.standard_normal(dim)
    for _ in range(n_blocks):
        a = rng.standard_normal((rows, dim))
        if unit_blocks:
            a /= np.linalg.norm(a, 2)
        mats.append(a)
    clean = [a @ x_true for a in mats]
    deltas = [0.0] * n_blocks
    if noise > 0:
        nrng = np.random.default_rng(seed + 1 if noise_seed is None else noise_seed)
        noisy = []
        for y in clean:
            e = nrng.standard_normal(y.shape)
            e *= noise * np.linalg.norm(y) / np.linalg.norm(e)
            noisy.append(y + e)
        deltas = [float(np.linalg.norm(yn - y)) for yn, y in zip(noisy, clean)]
        data = noisy
    else:
        data = [y.copy() for y in clean]
    X = Space((dim,), 1.0, "X")
    for i, a in enumerate(mats):
        blocks.append(MatrixBlock(a, X, Space((rows,), 1.0, f"Y{i}"),
                                  norm_bound=float(np.linalg.norm(a, 2))))
    sys = BlockSystem(blocks, data, deltas)
    return LinearProblem(sys, np.vstack(mats), x_true, clean)


def standard_problem(**kw):
    """The 10-unknown, 5-block consistent system used by the invariant checks."""
    return random_linear_problem(dim=10, n_blocks=5, rows=4, seed=STANDARD_SEED, **kw)
