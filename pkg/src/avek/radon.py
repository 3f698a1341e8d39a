"""Discrete circular Radon transform on a square grid, its adjoints, phantoms and noise.

Conventions
-----------
Images are ``(N_x + 1) x (N_x + 1)`` arrays with ``f[j1, j2] ~ f(-R + j1*dx,
-R + j2*dx)``, ``dx = 2R/N_x``.  Detector ``k`` sits at angle
``phi_offset + 2*pi*k/N_phi`` on the circle of radius ``R``; data of one block
are ``|K_i| x (N_r + 1)`` arrays over (detector, radius ``l * 2R/N_r``).

The image space carries the inner product ``dx^2 * sum(f*h)`` and the data
space the weights ``4*pi * r_l * h_l * ds`` (trapezoid in ``r``, rectangle
rule in arc length), which discretize ``L^2(D(R))`` and
``L^2(Gamma_i x [0, 2R]; 4 pi r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .opsys import BlockSystem, LinearBlock, Space, estimate_norm

__all__ = [
    "DetectorGeometry",
    "Ellipse",
    "HEAD_PHANTOM",
    "HEAD_SMOOTHING",
    "SHEPP_LOGAN",
    "PHANTOMS",
    "default_geometry",
    "partition_boundary",
    "forward",
    "backproject",
    "exact_adjoint",
    "forward_matrix",
    "backprojection_matrix",
    "data_weights",
    "image_space",
    "data_space",
    "make_phantom",
    "add_noise",
    "RadonBlock",
    "radon_system",
    "smooth_probe_pair",
    "backprojection_mismatch",
]


@dataclass(frozen=True)
class DetectorGeometry:
    """Grid, detector placement and the partition ``K_1..K_n`` of the observed detectors.

    `partition` holds tuples of detector indices (into ``0..N_phi-1``).
    `n_beta_min` is the minimal number of trapezoid nodes per circle; the
    actual count at radius ``r`` is ``max(n_beta_min, ceil(2*pi*r/dx))``.
    """

    radius: float = 1.0
    n_x: int = 200
    n_r: int = 200
    n_phi: int = 200
    phi_offset: float = math.pi / 200
    partition: tuple = ()
    n_beta_min: int = 64

    def __post_init__(self):
        if self.n_x < 2 or self.n_r < 1 or self.n_phi < 1:
            raise ValueError("need n_x >= 2, n_r >= 1, n_phi >= 1")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        seen = set()
        for part in self.partition:
            for k in part:
                if not 0 <= k < self.n_phi:
                    raise ValueError(f"detector index {k} out of range")
                if k in seen:
                    raise ValueError(f"detector {k} appears in two blocks")
                seen.add(k)

    @property
    def dx(self):
        return 2 * self.radius / self.n_x

    @property
    def dr(self):
        return 2 * self.radius / self.n_r

    @property
    def ds(self):
        """Arc length per detector."""
        return 2 * math.pi * self.radius / self.n_phi

    @property
    def n_blocks(self):
        return len(self.partition)

    @property
    def radii(self):
        return np.arange(self.n_r + 1) * self.dr

    def angles(self, indices=None):
        k = np.arange(self.n_phi) if indices is None else np.asarray(indices)
        return self.phi_offset + 2 * math.pi * k / self.n_phi

    def positions(self, indices):
        a = self.angles(indices)
        return self.radius * np.stack([np.cos(a), np.sin(a)], axis=-1)

    def detectors(self):
        """All observed detector indices, in block order."""
        return [k for part in self.partition for k in part]

    def grid(self):
        t = -self.radius + np.arange(self.n_x + 1) * self.dx
        return np.meshgrid(t, t, indexing="ij")

    def n_beta(self, r):
        return max(self.n_beta_min, math.ceil(2 * math.pi * r / self.dx))


def _angle_in(a, lo, hi):
    a = np.mod(a - lo, 2 * math.pi)
    return a <= (hi - lo) + 1e-12


def partition_boundary(geom: DetectorGeometry, arc=(0.0, math.pi), n=1) -> DetectorGeometry:
    """Split the detectors whose angle lies in `arc` into `n` contiguous blocks.

    Blocks differ in size by at most one detector when `n` does not divide
    the detector count.
    """
    lo, hi = arc
    if hi - lo >= 2 * math.pi - 1e-12:
        idx = np.arange(geom.n_phi)
    else:
        idx = np.nonzero(_angle_in(geom.angles(), lo, hi))[0]
        # order along the arc, starting at `lo`
        idx = idx[np.argsort(np.mod(geom.angles(idx) - lo, 2 * math.pi), kind="stable")]
    if n < 1 or n > len(idx):
        raise ValueError(f"cannot split {len(idx)} detectors into {n} blocks")
    parts = tuple(tuple(int(k) for k in p) for p in np.array_split(idx, n))
    return replace(geom, partition=parts)


def default_geometry(n_x=200, n_r=200, n_detectors=100, n_blocks=100, radius=1.0):
    """`n_detectors` equispaced detectors on the upper half circle, split into `n_blocks`.

    Detectors sit at the midpoints of `n_detectors` equal arcs of the half
    circle, i.e. at angles ``pi*(k + 1/2)/n_detectors``.
    """
    n_phi = 2 * n_detectors
    geom = DetectorGeometry(radius=radius, n_x=n_x, n_r=n_r, n_phi=n_phi,
                            phi_offset=math.pi / n_phi)
    return partition_boundary(geom, (0.0, math.pi), n_blocks)


def image_space(geom):
    return Space((geom.n_x + 1, geom.n_x + 1), geom.dx ** 2, name="X")


def data_weights(geom, n_det=1):
    """Quadrature weights ``4*pi*r*h_r*ds`` for a block of `n_det` detectors."""
    r = geom.radii
    h = np.full(r.shape, geom.dr)
    h[0] = h[-1] = geom.dr / 2
    w = 4 * math.pi * r * h * geom.ds
    return np.broadcast_to(w, (n_det, r.size)).copy()


def data_space(geom, i):
    m = len(geom.partition[i])
    return Space((m, geom.n_r + 1), data_weights(geom, m), name=f"Y{i}")


def _bilinear(geom, px, py):
    """Stencil (flat pixel indices, weights) of bilinear interpolation at points.

    Points outside ``[-R, R]^2`` get zero weights.
    """
    n = geom.n_x
    u = (px + geom.radius) / geom.dx
    v = (py + geom.radius) / geom.dx
    inside = (u >= 0) & (u <= n) & (v >= 0) & (v <= n)
    u = np.where(inside, u, 0.0)
    v = np.where(inside, v, 0.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 1)
    j0 = np.minimum(np.floor(v).astype(np.int64), n - 1)
    a = u - i0
    b = v - j0
    m = inside.astype(float)
    idx = np.stack([i0 * (n + 1) + j0, (i0 + 1) * (n + 1) + j0,
                    i0 * (n + 1) + j0 + 1, (i0 + 1) * (n + 1) + j0 + 1])
    wts = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b]) * m
    return idx, wts


def _disc_mask(geom):
    """Flat boolean mask of the grid points inside ``D(R)``."""
    X, Y = geom.grid()
    return (X ** 2 + Y ** 2 < geom.radius ** 2).ravel()


def _detector_rows(geom, z, inside):
    """COO triplets of the forward map for the detector at position `z`.

    Grid values outside ``D(R)`` are never read, so the discrete operator acts
    on ``L^2(D(R))`` like its continuous counterpart.
    """
    rows, cols, vals = [], [], []
    for l, r in enumerate(geom.radii):
        nb = 1 if r == 0 else geom.n_beta(r)
        beta = 2 * math.pi * np.arange(nb) / nb
        idx, wts = _bilinear(geom, z[0] + r * np.cos(beta), z[1] + r * np.sin(beta))
        keep = (wts > 0) & inside[idx]
        cols.append(idx[keep])
        vals.append(wts[keep] / nb)
        rows.append(np.full(int(keep.sum()), l, dtype=np.int64))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


@lru_cache(maxsize=8)
def _forward_matrices(geom):
    npix = (geom.n_x + 1) ** 2
    nr = geom.n_r + 1
    inside = _disc_mask(geom)
    mats = []
    for part in geom.partition:
        pos = geom.positions(part)
        rr, cc, vv = [], [], []
        for j, z in enumerate(pos):
            r, c, v = _detector_rows(geom, z, inside)
            rr.append(r + j * nr)
            cc.append(c)
            vv.append(v)
        m = sp.coo_matrix((np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))),
                          shape=(len(part) * nr, npix)).tocsr()
        m.sum_duplicates()
        mats.append(m)
    return tuple(mats)


def forward_matrix(geom, i) -> sp.csr_matrix:
    """Sparse matrix of the discrete circular mean operator of block `i`."""
    return _forward_matrices(geom)[i]


@lru_cache(maxsize=8)
def _backprojection_matrices(geom):
    X, Y = geom.grid()
    px, py = X.ravel(), Y.ravel()
    inside = _disc_mask(geom)
    npix = px.size
    nr = geom.n_r + 1
    mats = []
    for part in geom.partition:
        pos = geom.positions(part)
        rr, cc, vv = [], [], []
        for j, z in enumerate(pos):
            rho = np.hypot(px - z[0], py - z[1]) / geom.dr
            ok = (rho <= geom.n_r) & inside
            pix = np.nonzero(ok)[0]
            rho = rho[ok]
            l0 = np.minimum(np.floor(rho).astype(np.int64), geom.n_r - 1)
            a = rho - l0
            rr += [pix, pix]
            cc += [j * nr + l0, j * nr + l0 + 1]
            vv += [2 * geom.ds * (1 - a), 2 * geom.ds * a]
        m = sp.coo_matrix((np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))),
                          shape=(npix, len(part) * nr)).tocsr()
        m.sum_duplicates()
        mats.append(m)
    return tuple(mats)


def backprojection_matrix(geom, i) -> sp.csr_matrix:
    return _backprojection_matrices(geom)[i]


def forward(f, geom: DetectorGeometry, i) -> np.ndarray:
    """Circular means of image `f` for the detectors of block `i` (trapezoid + bilinear)."""
    f = np.asarray(f, dtype=float)
    m = forward_matrix(geom, i)
    return (m @ f.ravel()).reshape(len(geom.partition[i]), geom.n_r + 1)


def backproject(g, geom: DetectorGeometry, i) -> np.ndarray:
    """Quadrature of ``2 * int_{Gamma_i} g(z, |z - x|) ds(z)`` on the grid.

    Linear interpolation in the radius; pixels farther than ``2R`` from a
    detector receive nothing from it.  This discretizes the continuous adjoint
    and is not the transpose of :func:`forward`.
    """
    g = np.asarray(g, dtype=float)
    m = backprojection_matrix(geom, i)
    n = geom.n_x + 1
    return (m @ g.ravel()).reshape(n, n)


def exact_adjoint(g, geom: DetectorGeometry, i) -> np.ndarray:
    """Transpose of :func:`forward` under the weighted image and data inner products."""
    g = np.asarray(g, dtype=float)
    m = forward_matrix(geom, i)
    w = data_weights(geom, len(geom.partition[i]))
    n = geom.n_x + 1
    return (m.T @ (w * g).ravel()).reshape(n, n) / geom.dx ** 2


class RadonBlock(LinearBlock):
    """Block ``M_i`` with either the exact discrete adjoint or the backprojection."""

    def __init__(self, geom, i, adjoint="exact", norm_bound=None):
        if adjoint not in ("exact", "backprojection"):
            raise ValueError("adjoint must be 'exact' or 'backprojection'")
        self.geom, self.index, self.adjoint_mode = geom, i, adjoint
        adj = exact_adjoint if adjoint == "exact" else backproject
        super().__init__(lambda f: forward(f, geom, i), lambda g: adj(g, geom, i),
                         image_space(geom), data_space(geom, i), norm_bound=norm_bound)


def radon_system(geom, data, noise_levels=None, adjoint="exact", norm_iters=50, seed=0):
    """A :class:`BlockSystem` for the partial circular Radon transforms of `geom`.

    Norm bounds are estimated by power iteration with the exact adjoint
    regardless of `adjoint`, since ``||M_i||`` is a property of the forward map.
    """
    blocks = []
    for i in range(geom.n_blocks):
        exact = RadonBlock(geom, i, "exact")
        nb = estimate_norm(exact, norm_iters, seed)
        blocks.append(RadonBlock(geom, i, adjoint, norm_bound=nb))
    return BlockSystem(blocks, data, noise_levels)


@dataclass(frozen=True)
class Ellipse:
    """Ellipse with `center`, semi-axes `axes`, rotation `angle` (degrees) and additive `value`."""

    center: tuple
    axes: tuple
    angle: float
    value: float


# Toft's modified Shepp-Logan head
SHEPP_LOGAN = (
    Ellipse((0.0, 0.0), (0.69, 0.92), 0.0, 1.0),
    Ellipse((0.0, -0.0184), (0.6624, 0.874), 0.0, -0.8),
    Ellipse((0.22, 0.0), (0.11, 0.31), -18.0, -0.2),
    Ellipse((-0.22, 0.0), (0.16, 0.41), 18.0, -0.2),
    Ellipse((0.0, 0.35), (0.21, 0.25), 0.0, 0.1),
    Ellipse((0.0, 0.1), (0.046, 0.046), 0.0, 0.1),
    Ellipse((0.0, -0.1), (0.046, 0.046), 0.0, 0.1),
    Ellipse((-0.08, -0.605), (0.046, 0.023), 0.0, 0.1),
    Ellipse((0.0, -0.605), (0.023, 0.023), 0.0, 0.1),
    Ellipse((0.06, -0.605), (0.023, 0.046), 0.0, 0.1),
)

# Soft-edged head: skull disc, two ventricles, a frontal and an occipital blob.
# Meant to be used with smoothing=HEAD_SMOOTHING.
HEAD_PHANTOM = (
    Ellipse((0.0, 0.05), (0.65, 0.8), 0.0, 1.0),
    Ellipse((0.22, 0.1), (0.11, 0.28), -18.0, -0.3),
    Ellipse((-0.22, 0.1), (0.14, 0.33), 18.0, -0.3),
    Ellipse((0.0, 0.45), (0.18, 0.14), 0.0, 0.3),
    Ellipse((0.0, -0.4), (0.1, 0.06), 0.0, 0.4),
)
HEAD_SMOOTHING = 0.4

PHANTOMS = {"head": (HEAD_PHANTOM, HEAD_SMOOTHING), "shepp-logan": (SHEPP_LOGAN, 0.0)}


def _ellipse_level(X, Y, e):
    t = math.radians(e.angle)
    dx, dy = X - e.center[0], Y - e.center[1]
    u = (dx * math.cos(t) + dy * math.sin(t)) / e.axes[0]
    v = (-dx * math.sin(t) + dy * math.cos(t)) / e.axes[1]
    return np.sqrt(u * u + v * v)


def make_phantom(ellipses: Sequence[Ellipse] = HEAD_PHANTOM, n_x=200, radius=1.0,
                 smoothing=0.0):
    """Sum of ellipse indicators sampled on the grid, zero outside ``D(R)``.

    With ``smoothing > 0`` each indicator is replaced by a ``C^1`` ramp that
    falls from 1 to 0 over relative radii ``[1 - smoothing, 1]``.
    """
    if n_x < 2:
        raise ValueError("n_x must be at least 2")
    t = -radius + np.arange(n_x + 1) * (2 * radius / n_x)
    X, Y = np.meshgrid(t, t, indexing="ij")
    f = np.zeros_like(X)
    for e in ellipses:
        rho = _ellipse_level(X, Y, e)
        if smoothing > 0:
            s = np.clip((1.0 - rho) / smoothing, 0.0, 1.0)
            ind = s * s * (3 - 2 * s)
        else:
            ind = (rho <= 1.0).astype(float)
        f += e.value * ind
    f[X ** 2 + Y ** 2 >= radius ** 2] = 0.0
    return f


def add_noise(blocks, weights, level, seed=0):
    """Add Gaussian noise with global relative size `level` in the weighted data norm.

    Returns the noisy blocks and the per-block noise norms ``delta_i``.
    """
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    blocks = [np.asarray(g, dtype=float) for g in blocks]
    if level == 0:
        return [g.copy() for g in blocks], [0.0] * len(blocks)
    gnorm2 = sum(float(np.sum(w * g * g)) for g, w in zip(blocks, weights))
    if gnorm2 == 0:
        raise ValueError("relative noise is undefined for zero data")
    rng = np.random.default_rng(seed)
    noise = [rng.standard_normal(g.shape) for g in blocks]
    nnorm2 = sum(float(np.sum(w * e * e)) for e, w in zip(noise, weights))
    c = level * math.sqrt(gnorm2 / nnorm2)
    noise = [c * e for e in noise]
    deltas = [math.sqrt(float(np.sum(w * e * e))) for e, w in zip(noise, weights)]
    return [g + e for g, e in zip(blocks, noise)], deltas


def smooth_probe_pair(geom, i, rng):
    """Random smooth image (three Gaussian bumps inside ``D(R)``) and smooth data for block `i`.

    White-noise probes have no continuum limit, so the backprojection is
    tested against the forward map on pairs like these instead.
    """
    X, Y = geom.grid()
    R = geom.radius
    f = np.zeros_like(X)
    for _ in range(3):
        c = rng.uniform(-0.5 * R, 0.5 * R, 2)
        w = rng.uniform(0.15, 0.35) * R
        f += rng.uniform(0.5, 1.5) * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2) / w ** 2)
    f[X ** 2 + Y ** 2 >= R ** 2] = 0.0
    t = geom.radii / (2 * R)
    m = len(geom.partition[i])
    coef = rng.standard_normal((m, 4))
    g = coef @ np.cos(math.pi * np.arange(4)[:, None] * t[None, :])
    return f, g


def backprojection_mismatch(geom, i, f, g):
    """``|<M_i f, g> - <f, B_i g>| / (||M_i f|| ||g||)`` for the backprojection ``B_i``."""
    X, Yi = image_space(geom), data_space(geom, i)
    mf = forward(f, geom, i)
    lhs = Yi.inner(mf, g)
    rhs = X.inner(f, backproject(g, geom, i))
    scale = Yi.norm(mf) * Yi.norm(g)
    return abs(lhs - rhs) / scale if scale > 0 else 0.0
