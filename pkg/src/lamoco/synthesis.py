"""Future-frame synthesis from a decomposition and predicted trajectories.

Each past frame is warped to each future step through the per-layer warps,
giving a stack of candidate views per step. The candidates are fused by
confidence-weighted averaging, leftover holes are filled by pull-push
diffusion, and filled content can be propagated to later steps so the same
disocclusion is painted consistently over time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tps
from .errors import SizeMismatch
from .layers import composite_flow, occlusion_filter
from .warpfield import FlowField, bilinear_sample, compose_pair, warp_image

# confidence assigned to propagated candidates; genuine views always rank
# higher and propagated content is only admitted where none of them is valid
PROPAGATED_CONFIDENCE = 1e-3
FILL_RELAX_ITERS = 80
# a candidate pixel counts as seen when the layers owning it at the future
# step were at least this visible at the sampled source position; ghosts
# score near zero while soft ownership edges score near one half, so the
# threshold sits below the edge regime
SEEN_THRESH = 0.25


@dataclass
class ViewStack:
    """Candidate views of one future step with validity and confidence."""

    images: list
    valids: list
    confidences: list

    def __post_init__(self):
        if not (len(self.images) == len(self.valids) == len(self.confidences)):
            raise SizeMismatch("images, valids and confidences must align")
        for img, val, conf in zip(self.images, self.valids, self.confidences):
            if img.shape[:2] != val.shape or val.shape != conf.shape:
                raise SizeMismatch("candidate resolutions disagree")
            if img.shape[:2] != self.images[0].shape[:2]:
                raise SizeMismatch("candidate resolutions disagree")
            if conf.min() < -1e-12 or conf.max() > 1.0 + 1e-12:
                raise SizeMismatch("confidences must lie in [0, 1]")

    @property
    def count(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple:
        return self.images[0].shape[:2]

    def append(self, image, valid, confidence):
        image = np.asarray(image, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        confidence = np.asarray(confidence, dtype=np.float64)
        ref = image.shape[:2] if self.count == 0 else self.shape
        if image.shape[:2] != ref or valid.shape != ref \
                or confidence.shape != ref:
            raise SizeMismatch("appended candidate resolution disagrees")
        if confidence.min() < -1e-12 or confidence.max() > 1.0 + 1e-12:
            raise SizeMismatch("confidences must lie in [0, 1]")
        self.images.append(image)
        self.valids.append(valid)
        self.confidences.append(confidence)


def _step_transforms(future, solvers, step):
    return [tps.solve_params(solvers[i], future.states[i][step].points)
            for i in range(len(solvers))]


def _future_depths(future, step):
    return np.array([future.states[i][step].depth
                     for i in range(future.num_layers)])


def _masks_at_step(decomp, flows, t_from):
    """Frame masks transported through per-layer flows from frame t_from."""
    masks = []
    for i, fl in enumerate(flows):
        m, _ = warp_image(decomp.stack.warped[i][t_from], fl)
        masks.append(m)
    return masks


def render_views(frames, decomp, future) -> list:
    """One ViewStack per predicted step, with a candidate per past frame.

    For every (past, future) frame pair the per-layer warps are composed,
    the past layer masks are carried to the future step and occlusion
    filtered, the layer flows are composited, and the past frame is warped
    through the result. A pixel stays valid only if the layers owning it
    were actually visible at the sampled position in the past frame, so a
    view never vouches for content that was occluded when it was taken.
    Confidence is mask coverage times that source visibility times warp
    validity times a linear recency weight favoring later past frames.
    """
    t_obs = decomp.frame_count
    if future.num_layers != len(decomp.grids):
        raise SizeMismatch("trajectory set and decomposition layer counts differ")
    if future.observed_count != t_obs:
        raise SizeMismatch("observed prefix must match the decomposition")
    for i, grid in enumerate(decomp.grids):
        if future.states[i][0].points.shape != grid.points.shape:
            raise SizeMismatch("trajectory points do not match the layer grid")
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if len(frames) != t_obs:
        raise SizeMismatch("need one past frame per observed step")
    h, w = decomp.height, decomp.width
    for f in frames:
        if f.shape[:2] != (h, w):
            raise SizeMismatch("frame resolution does not match the fit")

    solvers = [tps.build_solver(g) for g in decomp.grids]
    xf = [_step_transforms(future, solvers, s)
          for s in range(future.total_steps)]
    vis_obs = []
    for t1 in range(t_obs):
        vo, _ = occlusion_filter(
            [decomp.stack.warped[i][t1] for i in range(len(solvers))],
            decomp.depths_at(t1))
        vis_obs.append(vo)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    stacks = []
    for step in range(t_obs, future.total_steps):
        depths = _future_depths(future, step)
        stack = ViewStack(images=[], valids=[], confidences=[])
        for t1 in range(t_obs):
            flows = [compose_pair(xf[step][i], xf[t1][i], h, w)
                     for i in range(len(solvers))]
            masks = _masks_at_step(decomp, flows, t1)
            vis, _ = occlusion_filter(masks, depths)
            cflow = composite_flow(flows, vis)
            cand, valid = warp_image(frames[t1], cflow)
            cover = np.sum(vis, axis=0)
            seen = np.zeros((h, w))
            for vi, vsrc in zip(vis, vis_obs[t1]):
                s, _ = bilinear_sample(vsrc, jj + cflow.u, ii + cflow.v)
                seen += vi * s
            seen = np.where(cover > 0, seen / np.maximum(cover, 1e-12), 0.0)
            valid = valid & (seen > SEEN_THRESH)
            recency = (t1 + 1) / t_obs
            conf = np.clip(cover, 0.0, 1.0) * seen * valid * recency
            stack.append(cand, valid, conf)
        stacks.append(stack)
    return stacks


def fuse_views(stack: ViewStack):
    """Confidence-weighted fusion of one stack; returns (image, holes).

    Pixels without any valid candidate become holes. Valid candidates whose
    confidences all vanish fall back to a plain average so validity alone
    never produces a hole.
    """
    if stack.count == 0:
        raise SizeMismatch("cannot fuse an empty view stack")
    h, w = stack.shape
    chans = stack.images[0].shape[2:] or ()
    num = np.zeros((h, w, *chans))
    den = np.zeros((h, w))
    vnum = np.zeros((h, w, *chans))
    vden = np.zeros((h, w))
    any_valid = np.zeros((h, w), dtype=bool)
    for img, val, conf in zip(stack.images, stack.valids, stack.confidences):
        wgt = conf * val
        num += img * wgt[..., None] if chans else img * wgt
        den += wgt
        vnum += img * val[..., None] if chans else img * val
        vden += val
        any_valid |= val
    out = np.zeros((h, w, *chans))
    weighted = den > 1e-12
    plain = any_valid & ~weighted
    if chans:
        out[weighted] = num[weighted] / den[weighted][:, None]
        out[plain] = vnum[plain] / vden[plain][:, None]
    else:
        out[weighted] = num[weighted] / den[weighted]
        out[plain] = vnum[plain] / vden[plain]
    return out, ~any_valid


def _pyramid_fill(values, weight):
    """Coarse-to-fine average of known pixels pushed into unknown ones."""
    h, w = weight.shape
    if weight.all() or min(h, w) <= 1:
        if not weight.any():
            return np.zeros_like(values)
        if not weight.all():
            fallback = values[weight].mean(axis=0)
            values = values.copy()
            values[~weight] = fallback
        return values
    ph, pw = h + (h % 2), w + (w % 2)
    v = np.zeros((ph, pw, *values.shape[2:]))
    wt = np.zeros((ph, pw))
    v[:h, :w] = values * (weight[..., None] if values.ndim == 3 else weight)
    wt[:h, :w] = weight
    vs = v.reshape(ph // 2, 2, pw // 2, 2, -1).sum(axis=(1, 3))
    ws = wt.reshape(ph // 2, 2, pw // 2, 2).sum(axis=(1, 3))
    coarse = vs / np.maximum(ws, 1e-12)[..., None]
    coarse = coarse.reshape(ph // 2, pw // 2, *values.shape[2:])
    filled = _pyramid_fill(coarse, ws > 0)
    up = np.repeat(np.repeat(filled, 2, axis=0), 2, axis=1)[:h, :w]
    out = values.copy()
    out[~weight] = up[~weight]
    return out


def fill_holes(img, holes, relax_iters: int = FILL_RELAX_ITERS):
    """Diffuse surrounding content into hole pixels.

    A pull-push pyramid provides the initial estimate and Jacobi sweeps
    relax hole pixels toward the harmonic interpolant of their boundary.
    Non-hole pixels are returned bit-exactly unchanged.
    """
    img = np.asarray(img, dtype=np.float64)
    holes = np.asarray(holes, dtype=bool)
    if holes.shape != img.shape[:2]:
        raise SizeMismatch("hole mask must match the image resolution")
    out = img.copy()
    if not holes.any():
        return out
    flat = img if img.ndim == 3 else img[..., None]
    work = _pyramid_fill(flat, ~holes)
    for _ in range(relax_iters):
        p = np.pad(work, ((1, 1), (1, 1), (0, 0)), mode="edge")
        avg = 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
        work[holes] = avg[holes]
    out[holes] = work[holes] if img.ndim == 3 else work[holes][:, 0]
    return out


def propagate_fill(filled, flow_next: FlowField, next_stack: ViewStack) -> ViewStack:
    """Carry a filled frame into the next step's candidate stack.

    The filled frame is warped by the inter-future-step flow and appended
    as a low-confidence candidate that is only valid where no genuine view
    is, so fills stay temporally consistent without overriding real
    content.
    """
    filled = np.asarray(filled, dtype=np.float64)
    if filled.shape[:2] != flow_next.shape:
        raise SizeMismatch("filled frame and flow resolutions differ")
    if flow_next.shape != next_stack.shape:
        raise SizeMismatch("flow and stack resolutions differ")
    cand, valid = warp_image(filled, flow_next)
    genuine = np.zeros(next_stack.shape, dtype=bool)
    for v in next_stack.valids:
        genuine |= v
    synth_valid = valid & ~genuine
    conf = np.where(synth_valid, PROPAGATED_CONFIDENCE, 0.0)
    next_stack.append(cand, synth_valid, conf)
    return next_stack


def future_step_flow(decomp, future, step, solvers=None) -> FlowField:
    """Composite backward flow of future step ``step`` toward ``step - 1``.

    Validity additionally requires the layers owning a pixel at ``step``
    to have been visible at the referenced position one step earlier, so
    freshly disoccluded pixels come out invalid instead of pointing at
    whatever covered them before.
    """
    if step < future.observed_count or step >= future.total_steps:
        raise SizeMismatch("step must lie inside the predicted range")
    if solvers is None:
        solvers = [tps.build_solver(g) for g in decomp.grids]
    h, w = decomp.height, decomp.width
    t_last = future.observed_count - 1
    cur = _step_transforms(future, solvers, step)
    prev = _step_transforms(future, solvers, step - 1)
    last_obs = _step_transforms(future, solvers, t_last)
    obs_flows = [compose_pair(cur[i], last_obs[i], h, w)
                 for i in range(len(solvers))]
    masks = _masks_at_step(decomp, obs_flows, t_last)
    vis, _ = occlusion_filter(masks, _future_depths(future, step))
    prev_obs_flows = [compose_pair(prev[i], last_obs[i], h, w)
                      for i in range(len(solvers))]
    masks_prev = _masks_at_step(decomp, prev_obs_flows, t_last)
    vis_prev, _ = occlusion_filter(masks_prev, _future_depths(future, step - 1))
    flows = [compose_pair(cur[i], prev[i], h, w) for i in range(len(solvers))]
    out = composite_flow(flows, vis)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    cover = np.sum(vis, axis=0)
    seen = np.zeros((h, w))
    for vi, vsrc in zip(vis, vis_prev):
        s, _ = bilinear_sample(vsrc, jj + out.u, ii + out.v)
        seen += vi * s
    seen = np.where(cover > 0, seen / np.maximum(cover, 1e-12), 0.0)
    valid = out.valid & (seen > SEEN_THRESH)
    return FlowField(u=np.where(valid, out.u, 0.0),
                     v=np.where(valid, out.v, 0.0), valid=valid)


def synthesize_future(frames, decomp, future, propagate: bool = True,
                      fill: bool = True) -> list:
    """Full pipeline: render, fuse, fill and propagate over future steps.

    Returns one (image, holes) pair per predicted step; ``holes`` is the
    mask before filling, after any propagated candidates were admitted.
    """
    stacks = render_views(frames, decomp, future)
    solvers = [tps.build_solver(g) for g in decomp.grids]
    outs = []
    prev = None
    for idx, stack in enumerate(stacks):
        step = future.observed_count + idx
        if propagate and prev is not None:
            flow = future_step_flow(decomp, future, step, solvers)
            propagate_fill(prev, flow, stack)
        img, holes = fuse_views(stack)
        result = fill_holes(img, holes) if fill else img
        outs.append((result, holes))
        prev = result
    return outs


def pixel_l1(pred, ref) -> float:
    """Mean absolute difference over all pixels and channels."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise SizeMismatch(f"image shapes differ: {pred.shape} vs {ref.shape}")
    return float(np.abs(pred - ref).mean())
