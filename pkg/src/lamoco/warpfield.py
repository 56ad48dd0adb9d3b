"""Dense flow fields and warp algebra: inversion, composition, resampling.

A FlowField stores per-pixel displacements in pixel units together with a
validity mask. Flow follows the backward convention used throughout the
package: the vector at a pixel of the current frame points to the matching
location of the reference frame, so images are pulled by sampling at
``position + displacement``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tps
from .errors import SizeMismatch

DEFAULT_REACH_RADIUS = 4
FILL_CONVERGENCE_TOL = 1e-3


@dataclass
class FlowField:
    """Dense displacement field in pixels with a per-cell validity mask."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.u.shape != self.v.shape or self.u.shape != self.valid.shape:
            raise SizeMismatch(
                f"flow channels disagree: {self.u.shape} / {self.v.shape} / {self.valid.shape}"
            )
        if self.u.ndim != 2:
            raise SizeMismatch(f"flow must be 2-D, got {self.u.ndim}-D")

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zero(cls, height, width):
        return cls(
            u=np.zeros((height, width)),
            v=np.zeros((height, width)),
            valid=np.ones((height, width), dtype=bool),
        )


def bilinear_sample(field, qx, qy):
    """Sample ``field`` (H, W) or (H, W, C) at fractional pixel positions.

    Values are held at pixel nodes 0..W-1 / 0..H-1; queries outside that
    box are reported in the returned ``inside`` mask and produce zeros.
    Returns (values, inside).
    """
    f = np.asarray(field, dtype=np.float64)
    squeeze = f.ndim == 2
    if squeeze:
        f = f[..., None]
    h, w = f.shape[:2]
    qx = np.asarray(qx, dtype=np.float64)
    qy = np.asarray(qy, dtype=np.float64)
    # epsilon absorbs float noise at the exact border
    eps = 1e-9
    inside = (qx >= -eps) & (qx <= w - 1.0 + eps) & (qy >= -eps) & (qy <= h - 1.0 + eps)
    x = np.clip(qx, 0.0, w - 1.0)
    y = np.clip(qy, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    top = (1.0 - wx) * f[y0, x0] + wx * f[y0, x1]
    bot = (1.0 - wx) * f[y1, x0] + wx * f[y1, x1]
    out = (1.0 - wy) * top + wy * bot
    out[~inside] = 0.0
    if squeeze:
        out = out[..., 0]
    return out, inside


def _cardinal_sums(values_u, values_v, mask):
    """Sums and counts of 4-neighbor values restricted to ``mask`` cells."""
    h, w = mask.shape
    su = np.zeros((h, w))
    sv = np.zeros((h, w))
    cnt = np.zeros((h, w))
    mu = np.where(mask, values_u, 0.0)
    mv = np.where(mask, values_v, 0.0)
    mf = mask.astype(np.float64)
    # down, up, right, left
    su[1:, :] += mu[:-1, :]; sv[1:, :] += mv[:-1, :]; cnt[1:, :] += mf[:-1, :]
    su[:-1, :] += mu[1:, :]; sv[:-1, :] += mv[1:, :]; cnt[:-1, :] += mf[1:, :]
    su[:, 1:] += mu[:, :-1]; sv[:, 1:] += mv[:, :-1]; cnt[:, 1:] += mf[:, :-1]
    su[:, :-1] += mu[:, 1:]; sv[:, :-1] += mv[:, 1:]; cnt[:, :-1] += mf[:, 1:]
    return su, sv, cnt


def invert_warp(w: FlowField, reach_radius: int = DEFAULT_REACH_RADIUS) -> FlowField:
    """Pixel-accurate inverse of a dense forward warp.

    Every valid source pixel ``s`` lands in the cell nearest to
    ``s + (u, v)``; that cell receives the displacement back to the exact
    preimage ``s``. When several sources collide in one cell the one with
    the smallest forward displacement magnitude wins, ties broken by raster
    order. Unhit cells within ``reach_radius`` cardinal steps of a hit are
    filled by breadth-first neighbor averaging followed by Jacobi relaxation
    until convergence; everything further out is invalid and carries the
    out-of-frame sentinel displacement (2*width, 2*height).
    """
    h, w_ = w.u.shape
    jj, ii = np.meshgrid(np.arange(w_), np.arange(h))
    src = w.valid.ravel()
    tx = (jj + w.u).ravel()[src]
    ty = (ii + w.v).ravel()[src]
    sx = jj.ravel()[src].astype(np.float64)
    sy = ii.ravel()[src].astype(np.float64)
    cx = np.rint(tx).astype(np.intp)
    cy = np.rint(ty).astype(np.intp)
    in_frame = (cx >= 0) & (cx < w_) & (cy >= 0) & (cy < h)
    cx, cy, sx, sy = cx[in_frame], cy[in_frame], sx[in_frame], sy[in_frame]
    mag2 = (w.u.ravel()[src][in_frame]) ** 2 + (w.v.ravel()[src][in_frame]) ** 2
    raster = np.flatnonzero(src)[in_frame]

    inv_u = np.zeros((h, w_))
    inv_v = np.zeros((h, w_))
    hit = np.zeros((h, w_), dtype=bool)
    # sort so the winner (smallest magnitude, then raster order) writes last
    order = np.lexsort((raster, mag2))[::-1]
    flat = cy * w_ + cx
    inv_u.ravel()[flat[order]] = (sx - cx)[order]
    inv_v.ravel()[flat[order]] = (sy - cy)[order]
    hit.ravel()[flat[order]] = True

    filled = hit.copy()
    for _ in range(max(0, int(reach_radius))):
        su, sv, cnt = _cardinal_sums(inv_u, inv_v, filled)
        frontier = ~filled & (cnt > 0)
        if not frontier.any():
            break
        inv_u[frontier] = su[frontier] / cnt[frontier]
        inv_v[frontier] = sv[frontier] / cnt[frontier]
        filled |= frontier

    fill_cells = filled & ~hit
    if fill_cells.any():
        for _ in range(h + w_):
            su, sv, cnt = _cardinal_sums(inv_u, inv_v, filled)
            new_u = np.where(cnt > 0, su / np.maximum(cnt, 1.0), inv_u)
            new_v = np.where(cnt > 0, sv / np.maximum(cnt, 1.0), inv_v)
            delta = np.maximum(
                np.abs(new_u - inv_u)[fill_cells].max(),
                np.abs(new_v - inv_v)[fill_cells].max(),
            )
            inv_u[fill_cells] = new_u[fill_cells]
            inv_v[fill_cells] = new_v[fill_cells]
            if delta < FILL_CONVERGENCE_TOL:
                break

    inv_u[~filled] = 2.0 * w_
    inv_v[~filled] = 2.0 * h
    return FlowField(u=inv_u, v=inv_v, valid=filled)


def _forward_px(xf, qx, qy, height, width):
    """Evaluate a transform at fractional pixel positions, in pixel units."""
    qn = np.stack(
        [(qx + 0.5) * 2.0 / width - 1.0, (qy + 0.5) * 2.0 / height - 1.0], axis=-1
    )
    out = tps.apply_points(xf, qn.reshape(-1, 2)).reshape(qn.shape)
    fx = (out[..., 0] + 1.0) * width / 2.0 - 0.5
    fy = (out[..., 1] + 1.0) * height / 2.0 - 0.5
    return fx, fy


def refined_inverse_coords(
    xf: tps.TpsTransform,
    height: int,
    width: int,
    reach_radius: int = DEFAULT_REACH_RADIUS,
):
    """Per-pixel preimage coordinates under a transform, sub-pixel accurate.

    Inverts the dense sample of ``xf`` with :func:`invert_warp`, then
    polishes the pixel-quantized result by fixed-point iteration against
    the analytic forward map; a candidate is kept per cell only when it
    shrinks the residual |F(q) - x|. Returns (qx, qy, valid) in pixel
    units of the sampling grid.
    """
    w = tps.sample_dense_warp(xf, height, width)
    inv = invert_warp(w, reach_radius)
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    qx = jj + inv.u
    qy = ii + inv.v
    fx, fy = _forward_px(xf, qx, qy, height, width)
    best = np.where(
        inv.valid, np.maximum(np.abs(fx - jj), np.abs(fy - ii)), np.inf
    )
    for _ in range(4):
        cand_x = qx + (jj - fx)
        cand_y = qy + (ii - fy)
        cfx, cfy = _forward_px(xf, cand_x, cand_y, height, width)
        res = np.maximum(np.abs(cfx - jj), np.abs(cfy - ii))
        improve = res < best
        qx = np.where(improve, cand_x, qx)
        qy = np.where(improve, cand_y, qy)
        fx = np.where(improve, cfx, fx)
        fy = np.where(improve, cfy, fy)
        best = np.where(improve, res, best)
    return qx, qy, inv.valid


def compose_pair(
    xf_a: tps.TpsTransform,
    xf_b: tps.TpsTransform,
    height: int,
    width: int,
    reach_radius: int = DEFAULT_REACH_RADIUS,
) -> FlowField:
    """Relative flow between two frames of one layer, on frame a's grid.

    Both transforms must share a source grid. For a pixel x of frame a the
    result points to the frame-b position of the same layer particle:
    conceptually ``F_b(F_a^{-1}(x)) - x``, computed by inverting the dense
    sample of ``xf_a`` and bilinearly looking up the dense sample of
    ``xf_b``. Cells where the inversion is invalid or the lookup leaves the
    sampling grid are invalid. Warping frame b by the result pulls its
    content into frame a's geometry.
    """
    ga, gb = xf_a.solver.grid, xf_b.solver.grid
    if ga is not gb and not (
        ga.rows == gb.rows and ga.cols == gb.cols and np.array_equal(ga.points, gb.points)
    ):
        raise SizeMismatch("composed transforms must share the same source grid")
    qx, qy, inv_valid = refined_inverse_coords(xf_a, height, width, reach_radius)
    wb = tps.sample_dense_warp(xf_b, height, width)
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    abs_b = np.stack([jj + wb.u, ii + wb.v], axis=-1)
    looked, inside = bilinear_sample(abs_b, qx, qy)
    valid = inv_valid & inside
    u = np.where(valid, looked[..., 0] - jj, 0.0)
    v = np.where(valid, looked[..., 1] - ii, 0.0)
    return FlowField(u=u, v=v, valid=valid)


def warp_image(img, w: FlowField):
    """Pull an image through a backward flow.

    Every output pixel x samples the input bilinearly at ``x + (u, v)``.
    Returns (warped, valid); samples outside the image or on invalid flow
    cells come out zero with valid False. Zero flow reproduces the input
    bit-exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w_ = w.u.shape
    if img.shape[:2] != (h, w_):
        raise SizeMismatch(f"image {img.shape[:2]} vs flow {(h, w_)}")
    jj, ii = np.meshgrid(np.arange(w_), np.arange(h))
    out, inside = bilinear_sample(img, jj + w.u, ii + w.v)
    valid = inside & w.valid
    out[~valid] = 0.0
    return out, valid


def _hsv_to_rgb(hue, sat, val):
    """Vectorized HSV to RGB, all channels in [0, 1]."""
    k = np.floor(hue * 6.0).astype(int) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = val * (1.0 - sat)
    q = val * (1.0 - f * sat)
    t = val * (1.0 - (1.0 - f) * sat)
    r = np.choose(k, [val, q, p, p, t, val])
    g = np.choose(k, [t, val, val, q, p, p])
    b = np.choose(k, [p, p, t, val, val, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_color(w: FlowField, max_magnitude: float | None = None):
    """Direction-as-hue, magnitude-as-saturation flow visualization.

    Zero flow renders white, invalid cells render black. ``max_magnitude``
    fixes the saturation scale; by default the largest valid magnitude is
    used. Returns an (H, W, 3) float image in [0, 1].
    """
    mag = np.hypot(w.u, w.v)
    if max_magnitude is None:
        max_magnitude = mag[w.valid].max() if w.valid.any() else 0.0
    scale = max_magnitude if max_magnitude > 0 else 1.0
    hue = (np.arctan2(w.v, w.u) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / scale, 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(hue))
    rgb[~w.valid] = 0.0
    return rgb
