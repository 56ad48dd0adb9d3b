"""Thin-plate-spline warps over normalized image coordinates.

All geometry in this module lives in normalized coordinates: a frame of any
resolution maps to the square [-1, 1] x [-1, 1], with pixel centers at
``x = 2*(j + 0.5)/width - 1`` and ``y = 2*(i + 0.5)/height - 1``. A warp is
parameterized by a source control grid ``C1`` (fixed per layer) and a target
control state ``C2`` (one per layer per frame); the interpolant is

    p12 = T @ p + U @ phi(p, C1)

with ``p`` homogeneous, ``T`` a 3x3 affine block, ``U`` 3xL radial
coefficients and ``phi`` the r^2 log r kernel. The coefficients come from a
single linear solve against the grid, whose inverse is precomputed once per
grid so that per-frame solves are one matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateGrid, SizeMismatch

RCOND_LIMIT = 1e-12
INVERSE_CHECK_TOL = 1e-6
DEFAULT_RIDGE = 0.0
RECOMMENDED_RIDGE = 1e-8


def kernel(points_a, points_b):
    """Thin-plate kernel matrix k(p, q) = |p - q|^2 * log|p - q| .

    Parameters
    ----------
    points_a : (M, 2) array_like
    points_b : (L, 2) array_like

    Returns
    -------
    (M, L) float64 ndarray, with k = 0 exactly where p == q.
    """
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    diff = a[:, None, :] - b[None, :, :]
    r2 = np.einsum("mlk,mlk->ml", diff, diff)
    out = np.zeros_like(r2)
    nz = r2 > 0.0
    # r^2 log r written as 0.5 * r^2 * log(r^2) to avoid the sqrt
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


def _homogeneous(points):
    """Stack (M, 2) points into (M, 3) rows (x, y, 1)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Source control points of one layer, fixed for the whole clip.

    ``points`` is (rows*cols, 2) in normalized coordinates, raster order
    (row-major). Arbitrary point sets are accepted so degenerate layouts can
    be fed to :func:`build_solver` for its error path; the :meth:`regular`
    factory enforces rows >= 2 and cols >= 2.
    """

    rows: int
    cols: int
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise SizeMismatch(f"grid points must be (L, 2), got {pts.shape}")
        if pts.shape[0] != self.rows * self.cols:
            raise SizeMismatch(
                f"{self.rows}x{self.cols} grid needs {self.rows * self.cols} "
                f"points, got {pts.shape[0]}"
            )
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @classmethod
    def regular(cls, rows, cols, x_range=(-1.0, 1.0), y_range=(-1.0, 1.0)):
        """Axis-aligned regular grid covering the given normalized ranges."""
        if rows < 2 or cols < 2:
            raise SizeMismatch("regular grid needs rows >= 2 and cols >= 2")
        xs = np.linspace(x_range[0], x_range[1], cols)
        ys = np.linspace(y_range[0], y_range[1], rows)
        gx, gy = np.meshgrid(xs, ys)
        return cls(rows=rows, cols=cols, points=np.stack([gx.ravel(), gy.ravel()], axis=1))


@dataclass
class ControlState:
    """Target control points (and depth score) of one layer at one time."""

    points: np.ndarray
    depth: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise SizeMismatch(f"control state points must be (L, 2), got {pts.shape}")
        self.points = pts
        self.depth = float(self.depth)


@dataclass(frozen=True, eq=False)
class TpsSolver:
    """Precomputed interpolation system for one source grid.

    ``delta`` is the (L+3, L+3) block system and ``delta_inv`` its inverse;
    both are read-only after construction and safe to share across threads.
    """

    grid: ControlGrid
    ridge: float
    delta: np.ndarray
    delta_inv: np.ndarray


@dataclass(frozen=True, eq=False)
class TpsTransform:
    """Solved warp: affine part ``T`` (3x3), radial part ``U`` (3xL)."""

    solver: TpsSolver
    affine: np.ndarray
    warp_coeff: np.ndarray
    targets: np.ndarray


def build_solver(grid: ControlGrid, ridge: float = DEFAULT_RIDGE) -> TpsSolver:
    """Assemble and invert the interpolation system of a source grid.

    The system couples the kernel matrix of the grid with the polynomial
    side conditions that force the radial coefficients to carry no affine
    component. ``ridge`` (default 0) is added to the kernel diagonal;
    ``RECOMMENDED_RIDGE`` is a sensible value for near-degenerate layouts.

    Raises
    ------
    DegenerateGrid
        If the system is rank deficient, its reciprocal condition number
        falls below ``RCOND_LIMIT``, or the inverse fails its residual check.
    """
    pts = grid.points
    L = pts.shape[0]
    c1 = _homogeneous(pts)  # (L, 3)
    phi = kernel(pts, pts)
    if ridge:
        phi = phi + ridge * np.eye(L)
    delta = np.zeros((L + 3, L + 3))
    delta[:L, :3] = c1
    delta[:L, 3:] = phi
    delta[L:, 3:] = c1.T
    sv = np.linalg.svd(delta, compute_uv=False)
    if not np.all(np.isfinite(sv)) or sv[0] == 0.0 or sv[-1] / sv[0] < RCOND_LIMIT:
        raise DegenerateGrid(
            f"control grid is numerically degenerate (rcond ~ "
            f"{sv[-1] / sv[0] if sv[0] > 0 else 0.0:.3e})"
        )
    delta_inv = np.linalg.inv(delta)
    residual = np.max(np.abs(delta @ delta_inv - np.eye(L + 3)))
    if not residual < INVERSE_CHECK_TOL:
        raise DegenerateGrid(f"inverse residual {residual:.3e} exceeds {INVERSE_CHECK_TOL}")
    return TpsSolver(grid=grid, ridge=float(ridge), delta=delta, delta_inv=delta_inv)


def solve_params(solver: TpsSolver, targets) -> TpsTransform:
    """Solve for the warp taking the source grid onto ``targets``.

    ``targets`` is a ControlState or an (L, 2) array of normalized target
    positions. The returned transform interpolates every control pair
    exactly and satisfies the zero-affine-content side condition on ``U``.
    """
    pts = targets.points if isinstance(targets, ControlState) else targets
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    L = solver.grid.count
    if pts.shape != (L, 2):
        raise SizeMismatch(f"expected {L} target points, got shape {pts.shape}")
    rhs = np.zeros((L + 3, 3))
    rhs[:L, :2] = pts
    rhs[:L, 2] = 1.0
    coeff = solver.delta_inv @ rhs  # rows: [T^T (3); U^T (L)]
    return TpsTransform(
        solver=solver,
        affine=coeff[:3].T.copy(),
        warp_coeff=coeff[3:].T.copy(),
        targets=pts.copy(),
    )


def apply_points(xf: TpsTransform, points):
    """Map normalized points through the warp.

    Accepts a single (2,) point or an (M, 2) batch and returns the same
    shape. The homogeneous result is renormalized to w == 1.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts2 = np.atleast_2d(pts)
    p_hom = _homogeneous(pts2)
    phi = kernel(pts2, xf.solver.grid.points)
    out = p_hom @ xf.affine.T + phi @ xf.warp_coeff.T
    out = out[:, :2] / out[:, 2:3]
    return out[0] if single else out


def pixel_center_coords(height: int, width: int):
    """Normalized coordinates of pixel centers: (y (H,), x (W,))."""
    x = 2.0 * (np.arange(width) + 0.5) / width - 1.0
    y = 2.0 * (np.arange(height) + 0.5) / height - 1.0
    return y, x


@lru_cache(maxsize=8)
def _dense_design(solver: TpsSolver, height: int, width: int):
    """Design matrix A = [p_hom | phi] over all pixel centers, (H*W, 3+L)."""
    y, x = pixel_center_coords(height, width)
    gx, gy = np.meshgrid(x, y)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return np.concatenate([_homogeneous(pts), kernel(pts, solver.grid.points)], axis=1)


@lru_cache(maxsize=8)
def dense_basis(solver: TpsSolver, height: int, width: int):
    """Per-pixel barycentric weights of the target points, (H*W, L).

    The warped position of any pixel is a fixed linear combination of the
    target control points: ``out = B @ C2``. The weights depend only on the
    source grid and the sampling resolution, sum to 1 per pixel, and are the
    exact Jacobian of the dense warp with respect to the targets.
    """
    A = _dense_design(solver, height, width)
    L = solver.grid.count
    return np.ascontiguousarray((A @ solver.delta_inv)[:, :L])


def point_basis(solver: TpsSolver, points):
    """Target-point weights of arbitrary normalized points, (M, L).

    Same linear-in-targets weights as :func:`dense_basis` but evaluated at
    caller-supplied positions instead of a pixel grid. Useful for fitting
    control targets to scattered correspondences by least squares.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    A = np.concatenate([_homogeneous(pts), kernel(pts, solver.grid.points)], axis=1)
    L = solver.grid.count
    return (A @ solver.delta_inv)[:, :L]


def sample_dense_warp(xf: TpsTransform, height: int, width: int):
    """Evaluate the warp at every pixel center as a pixel-unit flow field.

    Returns a FlowField whose (u, v) hold the displacement from each pixel
    to its warped position, converted from normalized units to pixels of
    the given resolution. All cells are valid.
    """
    from .warpfield import FlowField

    A = _dense_design(xf.solver, height, width)
    coeff = np.concatenate([xf.affine.T, xf.warp_coeff.T], axis=0)
    out = A @ coeff
    out = out[:, :2] / out[:, 2:3]
    y, x = pixel_center_coords(height, width)
    gx, gy = np.meshgrid(x, y)
    u = (out[:, 0].reshape(height, width) - gx) * (width / 2.0)
    v = (out[:, 1].reshape(height, width) - gy) * (height / 2.0)
    return FlowField(u=u, v=v, valid=np.ones((height, width), dtype=bool))


def grad_points(solver: TpsSolver, targets, upstream):
    """Gradient of a scalar loss through :func:`sample_dense_warp`.

    ``upstream`` is the cotangent of the loss with respect to the sampled
    flow, as a FlowField (its ``u``/``v`` hold dLoss/du, dLoss/dv; ``valid``
    is ignored since the dense sample is valid everywhere). Returns the
    (L, 2) gradient with respect to the target control points in normalized
    units. The dense warp is linear in the targets, so this contraction of
    the precomputed basis weights is exact, not an approximation.
    """
    pts = targets.points if isinstance(targets, ControlState) else targets
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    L = solver.grid.count
    if pts.shape != (L, 2):
        raise SizeMismatch(f"expected {L} target points, got shape {pts.shape}")
    height, width = upstream.u.shape
    B = dense_basis(solver, height, width)
    gx = B.T @ upstream.u.ravel() * (width / 2.0)
    gy = B.T @ upstream.v.ravel() * (height / 2.0)
    return np.stack([gx, gy], axis=1)
