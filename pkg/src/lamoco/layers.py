"""Layer-mask lifecycle: intrinsic masks warped into frame space, semantic
refinement against segmentation maps, depth-ordered occlusion and flow
compositing.

Every layer carries an intrinsic mask on its own canvas covering the
normalized square. The canvas edge of an object layer is 16x its control
grid edge (a 4x4 grid gets a 64x64 canvas); the background layer's canvas
is the frame itself and its intrinsic mask is all ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tps
from .errors import SizeMismatch
from .warpfield import DEFAULT_REACH_RADIUS, FlowField, bilinear_sample, refined_inverse_coords

CANVAS_GRID_RATIO = 16
DEFAULT_KC = 0.1


@dataclass
class SegMap:
    """Soft per-pixel class distribution for one frame.

    ``probs`` is (C, H, W) and sums to 1 over classes at every pixel;
    ``stuff`` flags which classes are static scenery rather than movable
    things; ``names`` is optional bookkeeping for IO.
    """

    probs: np.ndarray
    stuff: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.stuff = np.asarray(self.stuff, dtype=bool)
        if self.probs.ndim != 3:
            raise SizeMismatch(f"seg probs must be (C, H, W), got {self.probs.shape}")
        if self.stuff.shape != (self.probs.shape[0],):
            raise SizeMismatch("stuff flags must have one entry per class")
        sums = self.probs.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > 1e-6:
            raise SizeMismatch("per-pixel class distribution must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def from_labels(cls, labels, num_classes, stuff, names=None):
        """One-hot map from an (H, W) integer label image."""
        labels = np.asarray(labels)
        probs = np.zeros((num_classes,) + labels.shape)
        for c in range(num_classes):
            probs[c] = labels == c
        return cls(probs=probs, stuff=stuff, names=names or [])


@dataclass
class LayerStack:
    """All per-layer state of one decomposed clip.

    ``intrinsic`` holds N+1 canvas masks (index 0 is the all-ones
    background), ``warped`` the frame-space masks with shape (N+1, T, H, W)
    and ``classes`` the (N+1, C) soft class assignment, rows summing to 1.
    """

    intrinsic: list
    warped: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.warped = np.asarray(self.warped, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.float64)
        if self.warped.ndim != 4:
            raise SizeMismatch(f"warped masks must be (N+1, T, H, W), got {self.warped.shape}")
        if len(self.intrinsic) != self.warped.shape[0]:
            raise SizeMismatch("one intrinsic canvas per layer required")
        if self.classes.shape[0] != self.warped.shape[0]:
            raise SizeMismatch("one class row per layer required")
        if not np.allclose(self.classes.sum(axis=1), 1.0, atol=1e-6):
            raise SizeMismatch("layer class assignments must sum to 1")

    @property
    def count(self) -> int:
        return self.warped.shape[0]


def object_canvas_size(grid: tps.ControlGrid) -> tuple:
    """Canvas resolution of an object layer: 16x the grid edge."""
    return (CANVAS_GRID_RATIO * grid.rows, CANVAS_GRID_RATIO * grid.cols)


def warp_mask(
    a,
    xf: tps.TpsTransform,
    height: int,
    width: int,
    reach_radius: int = DEFAULT_REACH_RADIUS,
):
    """Warp an intrinsic canvas mask into frame space.

    Each frame pixel is traced back through the inverse of the transform's
    dense warp and the canvas is sampled bilinearly there. Pixels whose
    preimage leaves the canvas, or that the inversion cannot reach, get 0.
    """
    a = np.asarray(a, dtype=np.float64)
    ch, cw = a.shape
    qx, qy, valid = refined_inverse_coords(xf, height, width, reach_radius)
    # sample-grid pixels -> normalized intrinsic coords -> canvas pixels
    xn = (qx + 0.5) * 2.0 / width - 1.0
    yn = (qy + 0.5) * 2.0 / height - 1.0
    cx = (xn + 1.0) * cw / 2.0 - 0.5
    cy = (yn + 1.0) * ch / 2.0 - 0.5
    vals, inside = bilinear_sample(a, cx, cy)
    out = np.where(valid & inside, vals, 0.0)
    return out


def semantic_refine(masks, class_probs, segs, k_c: float = DEFAULT_KC):
    """Suppress mask support lying on the wrong semantic class.

    ``masks`` is the (T, H, W) frame-space mask tube of one layer,
    ``class_probs`` its (C,) soft class assignment and ``segs`` the per-frame
    SegMaps (or a (T, C, H, W) array). Every segmentation channel is
    reweighted by (c + k_c)/(1 + k_c), the mask-weighted mean over the tube
    gives a reference class vector, and each pixel keeps the fraction
    clamp(1 - |s - mean|_1, 0, 1) of its mask.

    Returns (refined, empty): with an all-zero tube the mean is undefined,
    so the mask comes back unchanged with ``empty`` set.
    """
    m = np.asarray(masks, dtype=np.float64)
    if isinstance(segs, np.ndarray):
        s = np.asarray(segs, dtype=np.float64)
    else:
        s = np.stack([seg.probs for seg in segs], axis=0)
    if s.shape[0] != m.shape[0] or s.shape[2:] != m.shape[1:]:
        raise SizeMismatch(f"segs {s.shape} do not match mask tube {m.shape}")
    c = np.asarray(class_probs, dtype=np.float64)
    if c.shape != (s.shape[1],):
        raise SizeMismatch("class assignment length must match seg channels")
    total = m.sum()
    if total == 0.0:
        return m.copy(), True
    weights = (c + k_c) / (1.0 + k_c)
    filtered = s * weights[None, :, None, None]
    mean_class = (m[:, None] * filtered).sum(axis=(0, 2, 3)) / total
    deviation = np.abs(s - mean_class[None, :, None, None]).sum(axis=1)
    factor = np.clip(1.0 - deviation, 0.0, 1.0)
    return m * factor, False


def occlusion_filter(masks, depths):
    """Resolve inter-layer occlusion by relative depth scores.

    ``masks`` is (N+1, H, W), ``depths`` the per-layer scores (background
    0). Each layer keeps, at every pixel, the product over other layers of
    (1 - o_j/(o_i + o_j) * m_j): heavier layers eat lighter ones where they
    overlap. A pair whose scores are both zero is treated at the equal-depth
    limit (factor 1 - m_j/2); the returned flag reports whether such a pair
    actually overlapped anywhere.

    Returns (filtered, degenerate).
    """
    m = np.asarray(masks, dtype=np.float64)
    o = np.asarray(depths, dtype=np.float64)
    if m.ndim != 3 or o.shape != (m.shape[0],):
        raise SizeMismatch("need (N+1, H, W) masks and one depth per layer")
    if np.any(o < 0):
        raise ValueError("depth scores must be nonnegative")
    n = m.shape[0]
    out = m.copy()
    degenerate = False
    for i in range(n):
        factor = np.ones(m.shape[1:])
        for j in range(n):
            if j == i:
                continue
            s = o[i] + o[j]
            if s > 0.0:
                ratio = o[j] / s
            else:
                ratio = 0.5
                if np.any((m[i] > 0) & (m[j] > 0)):
                    degenerate = True
            factor *= 1.0 - ratio * m[j]
        out[i] = m[i] * factor
    return out, degenerate


def composite_flow(layer_flows, masks) -> FlowField:
    """Blend per-layer flows by their visible masks.

    The output at a pixel is the mask-weighted sum of layer flows. It is
    valid only where the masks carry any weight and every contributing
    layer's flow is valid there.
    """
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim != 3 or len(layer_flows) != m.shape[0]:
        raise SizeMismatch("need one (H, W) mask per layer flow")
    shape = m.shape[1:]
    u = np.zeros(shape)
    v = np.zeros(shape)
    bad = np.zeros(shape, dtype=bool)
    for w, mi in zip(layer_flows, m):
        if w.shape != shape:
            raise SizeMismatch(f"flow {w.shape} vs masks {shape}")
        u += mi * w.u
        v += mi * w.v
        bad |= (mi > 0) & ~w.valid
    cover = m.sum(axis=0)
    valid = (cover > 0) & ~bad
    return FlowField(u=np.where(valid, u, 0.0), v=np.where(valid, v, 0.0), valid=valid)
