"""Pseudo ground truth and losses for the layered scene decomposition.

Given precomputed flow and segmentation, this module builds the binary
guidance masks (stuff regions and moving foreground), evaluates the three
decomposition losses on numpy state, and exposes the gradient-descent fit
entry point. The differentiable twin of the loss pipeline used inside the
fit lives in fitting.py; the functions here are the reporting reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tps
from .errors import SizeMismatch
from .layers import LayerStack, SegMap, composite_flow, occlusion_filter
from .warpfield import FlowField, compose_pair

DEFAULT_TAU_M = 0.005
DEFAULT_EMPTY_THRESH = 0.5
BG_FIT_GRID = (8, 16)
ENTROPY_EPS = 1e-12


@dataclass
class PseudoLabels:
    """Binary guidance for one frame: stuff region and moving foreground.

    ``bg_fit`` carries the background flow extrapolated to the full frame;
    ``affine_fallback`` is set when no stuff pixels were available and the
    fit degraded to a global affine model.
    """

    stuff: np.ndarray
    moving_fg: np.ndarray
    bg_fit: FlowField
    affine_fallback: bool = False

    def __post_init__(self):
        self.stuff = np.asarray(self.stuff, dtype=bool)
        self.moving_fg = np.asarray(self.moving_fg, dtype=bool)
        if self.stuff.shape != self.moving_fg.shape:
            raise SizeMismatch("stuff and moving_fg resolutions differ")
        if np.any(self.stuff & self.moving_fg):
            raise SizeMismatch("moving foreground must exclude stuff pixels")


@dataclass
class LossWeights:
    """Loss weights and schedule knobs of the decomposition objective."""

    lambda_o: float = 1.0
    lambda_f: float = 100.0
    lambda_r: float = 1.0
    k_s: float = 0.25
    k_m: float = 1.0
    tau_m: float = DEFAULT_TAU_M
    warmup_frac: float = 0.2
    ramp_frac: float = 0.3

    def __post_init__(self):
        for name in ("lambda_o", "lambda_f", "lambda_r", "k_s", "k_m",
                     "tau_m", "warmup_frac", "ramp_frac"):
            if getattr(self, name) < 0:
                raise SizeMismatch(f"{name} must be non-negative")
        if self.warmup_frac + self.ramp_frac > 1.0:
            raise SizeMismatch("warmup_frac + ramp_frac must not exceed 1")

    def flow_weight_at(self, iteration: int, total: int) -> float:
        """lambda_f under the warmup schedule: zero, then a linear ramp."""
        if total <= 0:
            return self.lambda_f
        frac = iteration / total
        if frac < self.warmup_frac:
            return 0.0
        if self.ramp_frac <= 0 or frac >= self.warmup_frac + self.ramp_frac:
            return self.lambda_f
        return self.lambda_f * (frac - self.warmup_frac) / self.ramp_frac


@dataclass
class SceneDecomposition:
    """A fitted layered scene: grids, trajectories, masks and classes.

    Layer 0 is the background. ``trajectories[i][t]`` is the ControlState
    of layer i at frame t; ``stack.warped[i, t]`` the matching refined
    mask. ``loss_history`` records the accepted optimizer steps.
    """

    grids: list
    trajectories: list
    stack: LayerStack
    height: int
    width: int
    frame_count: int
    class_names: list
    loss_history: list = field(default_factory=list)
    aborted_non_finite: bool = False

    def __post_init__(self):
        if len(self.trajectories) != len(self.grids):
            raise SizeMismatch("one trajectory per layer required")
        for grid, states in zip(self.grids, self.trajectories):
            if len(states) != self.frame_count:
                raise SizeMismatch("every layer needs a state per frame")
            for st in states:
                if st.points.shape != grid.points.shape:
                    raise SizeMismatch("control state does not match its grid")

    @property
    def n_objects(self) -> int:
        return len(self.grids) - 1

    def depths_at(self, t: int) -> np.ndarray:
        return np.array([states[t].depth for states in self.trajectories])


def stuff_mask(seg: SegMap) -> np.ndarray:
    """Pixels whose most likely class is marked stuff."""
    return seg.stuff[np.argmax(seg.probs, axis=0)]


def _lstsq_flow_fit(basis, gx, gy, flow, sel):
    """Least-squares targets reproducing the observed warped positions."""
    out_x = gx + flow.u * (2.0 / flow.shape[1])
    out_y = gy + flow.v * (2.0 / flow.shape[0])
    rhs = np.stack([out_x[sel], out_y[sel]], axis=1)
    sol, *_ = np.linalg.lstsq(basis[sel.ravel()], rhs, rcond=None)
    return sol


def moving_foreground_mask(seg: SegMap, flow: FlowField,
                           tau_m: float = DEFAULT_TAU_M,
                           grid: tps.ControlGrid | None = None) -> PseudoLabels:
    """Split a frame into stuff, still foreground and moving foreground.

    Fits the background warp to the flow observed on stuff pixels (least
    squares on an 8x16 control grid by default) and extrapolates it to the
    whole frame. Foreground pixels whose L1 flow deviation from that
    extrapolation exceeds ``tau_m`` (normalized units) become the moving
    foreground. Without any usable stuff pixel the background model falls
    back to a global affine fit over all valid pixels, and the result is
    flagged.
    """
    h, w = flow.shape
    if seg.probs.shape[1:] != (h, w):
        raise SizeMismatch("segmentation and flow resolutions differ")
    stuff = stuff_mask(seg)
    y, x = tps.pixel_center_coords(h, w)
    gx, gy = np.meshgrid(x, y)
    sel = stuff & flow.valid
    fallback = not sel.any()
    if fallback:
        sel = flow.valid.copy()
    if not sel.any():
        bg_fit = FlowField.zero(h, w)
        return PseudoLabels(stuff=stuff, moving_fg=np.zeros((h, w), dtype=bool),
                            bg_fit=bg_fit, affine_fallback=True)
    if fallback:
        design = np.stack([gx.ravel(), gy.ravel(), np.ones(h * w)], axis=1)
    else:
        if grid is None:
            grid = tps.ControlGrid.regular(*BG_FIT_GRID)
        solver = tps.build_solver(grid)
        design = tps.dense_basis(solver, h, w)
    sol = _lstsq_flow_fit(design, gx, gy, flow, sel)
    fit = design @ sol
    u_fit = (fit[:, 0].reshape(h, w) - gx) * (w / 2.0)
    v_fit = (fit[:, 1].reshape(h, w) - gy) * (h / 2.0)
    bg_fit = FlowField(u=u_fit, v=v_fit, valid=np.ones((h, w), dtype=bool))
    dev = (np.abs(flow.u - u_fit) * (2.0 / w)
           + np.abs(flow.v - v_fit) * (2.0 / h))
    moving = (~stuff) & flow.valid & (dev > tau_m)
    return PseudoLabels(stuff=stuff, moving_fg=moving, bg_fit=bg_fit,
                        affine_fallback=fallback)


def loss_object(masks_seq, labels_seq, k_s: float = 0.25, k_m: float = 1.0) -> float:
    """Mask placement loss: reward moving-foreground coverage, punish stuff.

    ``masks_seq`` holds per-frame object masks (N, H, W); ``labels_seq`` the
    matching PseudoLabels. Each frame contributes the pixel mean of
    (k_s * S - k_m * M) weighted by the pointwise max over object masks;
    frames are summed.
    """
    if len(masks_seq) != len(labels_seq):
        raise SizeMismatch("one PseudoLabels per mask frame required")
    total = 0.0
    for masks, labels in zip(masks_seq, labels_seq):
        masks = np.asarray(masks, dtype=np.float64)
        if masks.ndim != 3:
            raise SizeMismatch("per-frame object masks must be (N, H, W)")
        if masks.shape[0] == 0:
            continue
        field_map = k_s * labels.stuff - k_m * labels.moving_fg
        total += float(np.mean(field_map * masks.max(axis=0)))
    return total


def _layer_transforms(decomp: SceneDecomposition, solvers, t: int):
    return [tps.solve_params(solvers[i], decomp.trajectories[i][t])
            for i in range(len(solvers))]


def reconstruct_flow(decomp: SceneDecomposition, t: int, solvers=None) -> FlowField:
    """Backward flow of frame t implied by the decomposition.

    Composes each layer's frame-to-frame warp, occlusion-filters the warped
    masks at t with the layer depth scores, and mask-weights the layer
    flows into a single field. ``t`` is a zero-based frame index >= 1.
    """
    if t < 1 or t >= decomp.frame_count:
        raise SizeMismatch(f"frame index {t} has no predecessor")
    if solvers is None:
        solvers = [tps.build_solver(g) for g in decomp.grids]
    prev = _layer_transforms(decomp, solvers, t - 1)
    cur = _layer_transforms(decomp, solvers, t)
    h, w = decomp.height, decomp.width
    flows = [compose_pair(cur[i], prev[i], h, w) for i in range(len(solvers))]
    visible, _ = occlusion_filter(decomp.stack.warped[:, t], decomp.depths_at(t))
    return composite_flow(flows, visible)


def loss_flow(targets_seq, decomp: SceneDecomposition) -> float:
    """Flow reconstruction loss in pixels, summed over frame pairs.

    ``targets_seq`` holds the observed backward flows of frames 2..T. Each
    frame contributes the mean per-pixel L1 error between the observed and
    the reconstructed flow over mutually valid pixels.
    """
    if len(targets_seq) != decomp.frame_count - 1:
        raise SizeMismatch("need one target flow per consecutive frame pair")
    solvers = [tps.build_solver(g) for g in decomp.grids]
    total = 0.0
    for k, target in enumerate(targets_seq):
        est = reconstruct_flow(decomp, k + 1, solvers)
        both = est.valid & target.valid
        if not both.any():
            continue
        err = np.abs(est.u - target.u) + np.abs(est.v - target.v)
        total += float(err[both].mean())
    return total


def loss_reg(decomp: SceneDecomposition, labels_seq,
             empty_thresh: float = DEFAULT_EMPTY_THRESH, frames=None) -> float:
    """Mask entropy plus a pull toward uncovered moving-foreground regions.

    For each selected frame: (a) the mean per-pixel Shannon entropy of the
    warped masks normalized to a distribution over layers, and (b) the mean
    distance (normalized units) from moving-foreground pixels that no
    object mask reaches (max below ``empty_thresh``) to the nearest object
    control point. ``frames`` defaults to the last len(labels_seq) frames.
    """
    if frames is None:
        frames = range(decomp.frame_count - len(labels_seq), decomp.frame_count)
    frames = list(frames)
    if len(frames) != len(labels_seq):
        raise SizeMismatch("one PseudoLabels per selected frame required")
    if any(t < 0 or t >= decomp.frame_count for t in frames):
        raise SizeMismatch("selected frames fall outside the clip")
    h, w = decomp.height, decomp.width
    y, x = tps.pixel_center_coords(h, w)
    gx, gy = np.meshgrid(x, y)
    total = 0.0
    for t, labels in zip(frames, labels_seq):
        masks = np.asarray(decomp.stack.warped[:, t], dtype=np.float64)
        mass = masks.sum(axis=0)
        safe = np.maximum(mass, ENTROPY_EPS)
        p = masks / safe
        ent = -np.sum(np.where(p > 0, p * np.log(np.maximum(p, ENTROPY_EPS)), 0.0),
                      axis=0)
        ent[mass <= ENTROPY_EPS] = 0.0
        total += float(ent.mean())
        if decomp.n_objects == 0:
            continue
        uncovered = labels.moving_fg & (masks[1:].max(axis=0) < empty_thresh)
        if not uncovered.any():
            continue
        points = np.concatenate(
            [decomp.trajectories[i][t].points for i in range(1, decomp.n_objects + 1)]
        )
        px = np.stack([gx[uncovered], gy[uncovered]], axis=1)
        d = np.sqrt(((px[:, None, :] - points[None, :, :]) ** 2).sum(-1))
        total += float(d.min(axis=1).mean())
    return total


def fit_decomposition(flows, segs, weights: LossWeights | None = None,
                      settings=None) -> SceneDecomposition:
    """Fit a layered decomposition to observed flows and segmentations.

    ``flows`` holds the backward flows of frames 2..T, ``segs`` one SegMap
    per frame 1..T. Optimizes control trajectories, depth scores, intrinsic
    mask logits and class logits jointly by momentum gradient descent with
    a backtracking line search; see fitting.FitSettings for the knobs.
    Deterministic for a fixed seed.
    """
    from . import fitting

    if weights is None:
        weights = LossWeights()
    if settings is None:
        settings = fitting.FitSettings()
    return fitting.run_fit(list(flows), list(segs), weights, settings)
