"""Gradient-descent engine behind fit_decomposition.

Everything here is an internal, differentiable twin of the numpy pipeline:
dense warps as linear maps of the control targets, fixed-point warp
inversion, canvas sampling with grid_sample, semantic reweighting, the
depth occlusion product, and the three losses. Contract-level reporting
always goes through the numpy modules; this file only drives descent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from scipy.cluster.vq import kmeans2

from . import decompose, tps
from .errors import SizeMismatch
from .layers import LayerStack, object_canvas_size, semantic_refine, warp_mask
from .warpfield import FlowField

INIT_LOGIT_SCALE = 4.0
EMPTY_LOGIT = -4.0


@dataclass
class FitSettings:
    """Optimizer and problem-size knobs for the decomposition fit."""

    iterations: int = 240
    learning_rate: float = 1.0
    momentum: float = 0.9
    num_layers: int = 2
    grid_obj: tuple = (4, 4)
    grid_bg: tuple = (8, 16)
    seed: int = 0
    fixed_point_iters: int = 3
    pixel_stride: int = 2
    empty_thresh: float = decompose.DEFAULT_EMPTY_THRESH
    k_c: float = 0.1
    line_search_max: int = 10
    lr_recover: float = 1.3
    dtype: str = "float32"
    bbox_pad: float = 0.15
    min_extent: float = 0.06
    # per-group step sizes in parameter units; gradients are RMS-normalized
    # per group so these stay meaningful across resolutions and loss weights
    point_step: float = 0.002
    logit_step: float = 0.25
    class_step: float = 0.1
    depth_step: float = 0.05

    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


class _TorchTps:
    """Analytic warp evaluation with autograd through the targets.

    All entry points are batched over a leading frame axis so one fit
    iteration dispatches a handful of large kernels instead of hundreds
    of small ones.
    """

    def __init__(self, solver: tps.TpsSolver, dtype):
        L = solver.grid.count
        self.count = L
        self.ctrl = torch.tensor(solver.grid.points, dtype=dtype)
        self.dinv_left = torch.tensor(solver.delta_inv[:, :L], dtype=dtype)

    def coeff(self, targets):
        """(B, L, 2) targets -> (B, L+3, 3) stacked [affine^T; radial^T]."""
        ones = torch.ones(*targets.shape[:-1], 1, dtype=targets.dtype)
        return self.dinv_left @ torch.cat([targets, ones], dim=-1)

    def forward(self, coeff, pts):
        """Warp (B, M, 2) points through (B, L+3, 3) coefficient stacks."""
        d = pts[:, :, None, :] - self.ctrl[None, None, :, :]
        r2 = (d * d).sum(-1)
        k = torch.where(r2 > 0, 0.5 * r2 * torch.log(r2.clamp_min(1e-30)),
                        torch.zeros_like(r2))
        ones = torch.ones(*pts.shape[:-1], 1, dtype=pts.dtype)
        out = torch.cat([pts, ones], dim=-1) @ coeff[:, :3] + k @ coeff[:, 3:]
        return out[..., :2]

    def invert(self, coeff, pts, iters):
        """Fixed-point preimages of ``pts`` under each coefficient stack."""
        q = pts
        for _ in range(iters):
            q = pts - self.forward(coeff, q) + q
        return q


def _sample_canvas(canvas, q):
    """Bilinear canvas lookup at (B, M, 2) normalized points, zero outside."""
    b = q.shape[0]
    grid = q.reshape(b, 1, -1, 2)
    out = torch.nn.functional.grid_sample(
        canvas[None, None].expand(b, 1, -1, -1), grid, mode="bilinear",
        padding_mode="zeros", align_corners=False,
    )
    return out.reshape(b, -1)


class _Problem:
    """Precomputed constants and the differentiable loss of one fit."""

    def __init__(self, flows, segs, labels, weights, settings,
                 bg_solver, obj_solvers):
        dt = settings.torch_dtype()
        self.dt = dt
        self.weights = weights
        self.settings = settings
        self.h, self.w = flows[0].shape
        self.t_count = len(flows) + 1
        self.bg = _TorchTps(bg_solver, dt)
        self.objs = [_TorchTps(s, dt) for s in obj_solvers]
        self.n = len(obj_solvers)

        s = settings.pixel_stride
        y, x = tps.pixel_center_coords(self.h, self.w)
        gx, gy = np.meshgrid(x[::s], y[::s])
        self.px = torch.tensor(np.stack([gx.ravel(), gy.ravel()], axis=1), dtype=dt)
        self.npx = self.px.shape[0]
        self.px_b = self.px[None].expand(self.t_count - 1, -1, -1)
        self.ones_canvas = torch.ones(self.h, self.w, dtype=dt)

        def tt(arrs):
            return torch.tensor(
                np.stack([np.ascontiguousarray(a[::s, ::s]).reshape(-1) for a in arrs]),
                dtype=dt)

        # everything below is aligned with frames 1..T-1 (the k-th row is
        # frame k+1, whose backward flow is flows[k])
        self.flow_u = tt([f.u for f in flows])
        self.flow_v = tt([f.v for f in flows])
        self.flow_valid = tt([f.valid.astype(np.float64) for f in flows]) > 0.5
        self.valid_counts = self.flow_valid.sum(dim=1).clamp_min(1)
        self.stuff = tt([lab.stuff.astype(np.float64) for lab in labels])
        self.moving = tt([lab.moving_fg.astype(np.float64) for lab in labels])
        self.seg = torch.tensor(
            np.stack([np.ascontiguousarray(seg.probs[:, ::s, ::s])
                      .reshape(seg.num_classes, -1) for seg in segs[1:]]),
            dtype=dt)

    def loss(self, bg_t, obj_t, mask_logits, class_logits, depth_log, lam_f):
        """Total loss and unweighted components at the given parameters."""
        st = self.settings
        kc = st.k_c
        tm1 = self.t_count - 1
        bg_coeff = self.bg.coeff(bg_t)
        obj_coeff = [self.objs[i].coeff(obj_t[i]) for i in range(self.n)]
        cls_probs = [torch.softmax(class_logits[i], dim=0) for i in range(self.n)]
        depths = torch.exp(depth_log) if self.n else None

        # inverse coordinates and masks for frames 1..T-1, batched
        q_bg = self.bg.invert(bg_coeff[1:], self.px_b, st.fixed_point_iters)
        m0 = _sample_canvas(self.ones_canvas, q_bg)
        prev_bg = self.bg.forward(bg_coeff[:-1], q_bg)
        masks_ref = []
        prev_obj = []
        for i in range(self.n):
            qi = self.objs[i].invert(obj_coeff[i][1:], self.px_b,
                                     st.fixed_point_iters)
            raw = _sample_canvas(torch.sigmoid(mask_logits[i]), qi)
            prev_obj.append(self.objs[i].forward(obj_coeff[i][:-1], qi))
            # semantic refinement against the mask-weighted tube mean class
            w_c = (cls_probs[i] + kc) / (1.0 + kc)
            num = (raw[:, None, :] * self.seg * w_c[None, :, None]).sum(dim=(0, 2))
            mean_c = num / raw.sum().clamp_min(1e-8)
            dev = (self.seg - mean_c[None, :, None]).abs().sum(dim=1)
            masks_ref.append(raw * (1.0 - dev).clamp(0.0, 1.0))

        zero = torch.zeros((), dtype=self.dt)
        l_o = zero.clone()
        l_r = zero.clone()
        layers = [m0] + masks_ref
        if self.n:
            obj_max = torch.stack(masks_ref).max(dim=0).values
            guide = (self.weights.k_s * self.stuff
                     - self.weights.k_m * self.moving)
            l_o = (guide * obj_max).mean(dim=1).sum()

        stack = torch.stack(layers)
        mass = stack.sum(dim=0).clamp_min(1e-12)
        p = stack / mass
        ent = -(torch.where(p > 1e-12, p * torch.log(p.clamp_min(1e-12)),
                            torch.zeros_like(p))).sum(dim=0)
        l_r = l_r + ent.mean(dim=1).sum()
        if self.n:
            uncovered = ((self.moving > 0.5) & (obj_max < st.empty_thresh)).detach()
            for k in range(tm1):
                sel = uncovered[k]
                if sel.any():
                    pts = torch.cat([obj_t[i][k + 1] for i in range(self.n)])
                    d = torch.cdist(self.px[sel], pts)
                    l_r = l_r + d.min(dim=1).values.mean()

        # occlusion-filtered composite flow against the observed pairs
        o_scores = [zero] + ([depths[i] for i in range(self.n)] if self.n else [])
        occ = []
        for i, mi in enumerate(layers):
            factor = 1.0
            for j, mj in enumerate(layers):
                if i == j:
                    continue
                denom = (o_scores[i] + o_scores[j]).clamp_min(1e-20)
                ratio = torch.where(denom > 1e-19, o_scores[j] / denom,
                                    torch.full_like(denom, 0.5))
                factor = factor * (1.0 - ratio * mj)
            occ.append(mi * factor)
        fu = zero
        fv = zero
        for i, mo in enumerate(occ):
            prev_pos = prev_bg if i == 0 else prev_obj[i - 1]
            fu = fu + mo * (prev_pos[..., 0] - self.px_b[..., 0]) * (self.w / 2.0)
            fv = fv + mo * (prev_pos[..., 1] - self.px_b[..., 1]) * (self.h / 2.0)
        err = (fu - self.flow_u).abs() + (fv - self.flow_v).abs()
        l_f = ((err * self.flow_valid).sum(dim=1) / self.valid_counts).sum()

        total = (self.weights.lambda_o * l_o + lam_f * l_f
                 + self.weights.lambda_r * l_r)
        return total, {"object": l_o.detach().item(), "flow": l_f.detach().item(),
                       "reg": l_r.detach().item()}


# ------------------------------------------------------------ initializers

def _invert_np(xf, pts, iters=50, tol=1e-11):
    q = np.array(pts, dtype=np.float64, copy=True)
    for _ in range(iters):
        res = pts - tps.apply_points(xf, q)
        q += res
        if np.max(np.abs(res)) < tol:
            break
    return q


def _init_background(flows, labels, solver, h, w, max_rows=6000):
    """Chain per-pair least-squares fits into a background trajectory."""
    y, x = tps.pixel_center_coords(h, w)
    gx, gy = np.meshgrid(x, y)
    coords = np.stack([gx.ravel(), gy.ravel()], axis=1)
    targets = [solver.grid.points.copy()]
    for k, f in enumerate(flows):
        sel = labels[k].stuff & f.valid
        if not sel.any():
            sel = f.valid
        idx = np.flatnonzero(sel.ravel())
        if idx.size > max_rows:
            idx = idx[:: int(np.ceil(idx.size / max_rows))]
        px = coords[idx]
        matched = px + np.stack([f.u.ravel()[idx] * 2.0 / w,
                                 f.v.ravel()[idx] * 2.0 / h], axis=1)
        xf_prev = tps.solve_params(solver, targets[-1])
        ref = _invert_np(xf_prev, matched)
        basis = tps.point_basis(solver, ref)
        sol, *_ = np.linalg.lstsq(basis, px, rcond=None)
        targets.append(sol)
    return np.stack(targets)


def _component_groups(moving, n, seed):
    """Largest connected components of M, k-means split when too few."""
    lab, count = ndimage.label(moving, structure=np.ones((3, 3)))
    groups = []
    if count >= n > 0:
        sizes = ndimage.sum(moving, lab, index=np.arange(1, count + 1))
        for ci in np.argsort(sizes)[::-1][:n]:
            groups.append(lab == ci + 1)
    elif moving.any() and n > 0:
        ys, xs = np.nonzero(moving)
        pts = np.stack([xs, ys], axis=1).astype(np.float64)
        if len(pts) <= n:
            for k in range(len(pts)):
                g = np.zeros_like(moving)
                g[ys[k], xs[k]] = True
                groups.append(g)
        else:
            _, assign = kmeans2(pts, n, minit="++", seed=seed)
            for c in range(n):
                sel = assign == c
                if sel.any():
                    g = np.zeros_like(moving)
                    g[ys[sel], xs[sel]] = True
                    groups.append(g)
    while len(groups) < n:
        groups.append(None)
    return groups


def _group_centroid(group, h, w):
    ys, xs = np.nonzero(group)
    return np.array([2.0 * (xs.mean() + 0.5) / w - 1.0,
                     2.0 * (ys.mean() + 0.5) / h - 1.0])


def _track_centroids(group, flows, labels, h, w):
    """Per-frame object centroids; the group is defined on frame 1."""
    t_count = len(flows) + 1
    c1 = _group_centroid(group, h, w)
    f0 = flows[0]
    d = np.array([f0.u[group].mean() * 2.0 / w, f0.v[group].mean() * 2.0 / h])
    cents = [c1 + d, c1]
    for k in range(1, len(flows)):
        pred = cents[-1] + (cents[-1] - cents[-2])
        m = labels[k].moving_fg
        lab, count = ndimage.label(m, structure=np.ones((3, 3)))
        best = None
        for ci in range(1, count + 1):
            c = _group_centroid(lab == ci, h, w)
            if best is None or np.linalg.norm(c - pred) < np.linalg.norm(best - pred):
                best = c
        cents.append(pred if best is None else best)
    assert len(cents) == t_count
    return np.stack(cents)


def _rasterize_canvas(group, ch, cw, h, w):
    """Mean group coverage per canvas cell, turned into logits."""
    iy, ix = np.mgrid[0:h, 0:w]
    cy = np.minimum((iy * ch) // h, ch - 1)
    cx = np.minimum((ix * cw) // w, cw - 1)
    flat = (cy * cw + cx).ravel()
    hits = np.bincount(flat, weights=group.ravel().astype(np.float64),
                       minlength=ch * cw)
    area = np.bincount(flat, minlength=ch * cw)
    cover = hits / np.maximum(area, 1)
    return INIT_LOGIT_SCALE * (2.0 * cover.reshape(ch, cw) - 1.0)


def _default_grid(index, settings):
    rows, cols = settings.grid_obj
    off = 0.12 * index
    return tps.ControlGrid.regular(rows, cols,
                                   x_range=(-0.2 + off, 0.2 + off),
                                   y_range=(-0.2, 0.2))


def _init_objects(flows, segs, labels, settings, h, w):
    """Grids, per-frame targets, canvas logits and class logits per object."""
    n = settings.num_layers
    rows, cols = settings.grid_obj
    groups = _component_groups(labels[0].moving_fg, n, settings.seed)
    num_classes = segs[0].num_classes
    t_count = len(flows) + 1
    out = []
    for i, group in enumerate(groups):
        if group is None or not group.any():
            grid = _default_grid(i, settings)
            targets = np.repeat(grid.points[None], t_count, axis=0)
            ch, cw = object_canvas_size(grid)
            out.append((grid, targets, np.full((ch, cw), EMPTY_LOGIT),
                        np.zeros(num_classes)))
            continue
        ys, xs = np.nonzero(group)
        x0 = 2.0 * (xs.min() + 0.5) / w - 1.0
        x1 = 2.0 * (xs.max() + 0.5) / w - 1.0
        y0 = 2.0 * (ys.min() + 0.5) / h - 1.0
        y1 = 2.0 * (ys.max() + 0.5) / h - 1.0
        pad_x = max(settings.bbox_pad * (x1 - x0), settings.min_extent / 2)
        pad_y = max(settings.bbox_pad * (y1 - y0), settings.min_extent / 2)
        grid = tps.ControlGrid.regular(rows, cols,
                                       x_range=(x0 - pad_x, x1 + pad_x),
                                       y_range=(y0 - pad_y, y1 + pad_y))
        cents = _track_centroids(group, flows, labels, h, w)
        targets = grid.points[None] + (cents - cents[1])[:, None, :]
        ch, cw = object_canvas_size(grid)
        logits = _rasterize_canvas(group, ch, cw, h, w)
        seg_hard = np.argmax(segs[1].probs, axis=0)
        majority = np.bincount(seg_hard[group], minlength=num_classes).argmax()
        cls = np.zeros(num_classes)
        cls[majority] = 3.0
        out.append((grid, targets, logits, cls))
    return out


# -------------------------------------------------------------- fit driver

def run_fit(flows, segs, weights, settings: FitSettings) -> decompose.SceneDecomposition:
    if len(flows) < 1:
        raise SizeMismatch("need at least one frame pair (T >= 2)")
    if len(segs) != len(flows) + 1:
        raise SizeMismatch("need one segmentation per frame")
    h, w = flows[0].shape
    for f in flows:
        if f.shape != (h, w):
            raise SizeMismatch("all flows must share one resolution")
    for seg in segs:
        if seg.probs.shape[1:] != (h, w):
            raise SizeMismatch("segmentations must match the flow resolution")
    # non-finite flow entries are treated as invalid pixels so the init and
    # the loss stay finite
    cleaned = []
    for f in flows:
        finite = np.isfinite(f.u) & np.isfinite(f.v)
        if finite.all():
            cleaned.append(f)
        else:
            cleaned.append(FlowField(u=np.where(finite, f.u, 0.0),
                                     v=np.where(finite, f.v, 0.0),
                                     valid=f.valid & finite))
    flows = cleaned

    labels = [decompose.moving_foreground_mask(segs[k + 1], flows[k], weights.tau_m)
              for k in range(len(flows))]
    bg_grid = tps.ControlGrid.regular(*settings.grid_bg)
    bg_solver = tps.build_solver(bg_grid)
    bg_init = _init_background(flows, labels, bg_solver, h, w)
    obj_init = _init_objects(flows, segs, labels, settings, h, w)
    obj_grids = [grid for grid, *_ in obj_init]
    obj_solvers = [tps.build_solver(g) for g in obj_grids]

    dt = settings.torch_dtype()
    problem = _Problem(flows, segs, labels, weights, settings,
                       bg_solver, obj_solvers)
    n = settings.num_layers
    bg_t = torch.tensor(bg_init, dtype=dt, requires_grad=True)
    obj_t = [torch.tensor(tr, dtype=dt, requires_grad=True)
             for _, tr, _, _ in obj_init]
    mask_logits = [torch.tensor(lg, dtype=dt, requires_grad=True)
                   for _, _, lg, _ in obj_init]
    class_logits = [torch.tensor(cl, dtype=dt, requires_grad=True)
                    for _, _, _, cl in obj_init]
    depth_log = torch.zeros(n, dtype=dt, requires_grad=True)

    params = [bg_t] + obj_t + mask_logits + class_logits + ([depth_log] if n else [])
    scales = ([settings.point_step] * (1 + n)
              + [settings.logit_step] * n
              + [settings.class_step] * n
              + ([settings.depth_step] if n else []))
    velocity = [torch.zeros_like(p) for p in params]
    # running-max gradient RMS per parameter group; dividing by it equalizes
    # the wildly different gradient scales across groups while still letting
    # steps shrink as a group converges
    ref_rms = [0.0] * len(params)
    lr = settings.learning_rate
    history = []
    aborted = False

    def eval_loss(values, lam):
        return problem.loss(values[0], values[1:1 + n],
                            values[1 + n:1 + 2 * n],
                            values[1 + 2 * n:1 + 3 * n],
                            values[1 + 3 * n] if n else torch.zeros(0, dtype=dt),
                            lam)

    stalled = 0
    prev_lam = None
    for it in range(settings.iterations):
        lam_f = weights.flow_weight_at(it, settings.iterations)
        if lam_f != prev_lam:
            stalled = 0
            if lam_f == weights.lambda_f:
                # the ramp is over: retry big steps once against the final
                # objective before settling into convergence detection
                lr = settings.learning_rate
            prev_lam = lam_f
        total, comps = eval_loss(params, lam_f)
        if not torch.isfinite(total):
            aborted = True
            break
        grads = torch.autograd.grad(total, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g
                 for p, g in zip(params, grads)]
        if any(not torch.isfinite(g).all() for g in grads):
            aborted = True
            break
        if lam_f == 0.0 and weights.lambda_f > 0.0:
            # warmup phase: masks and classes bind to the guidance masks,
            # geometry stays put until the flow term anchors it
            for gi in range(1 + n):
                grads[gi] = torch.zeros_like(grads[gi])
        base = float(total.detach())
        for gi, g in enumerate(grads):
            ref_rms[gi] = max(ref_rms[gi], float(g.pow(2).mean().sqrt()))
        direction = [g / max(r, 1e-12) for g, r in zip(grads, ref_rms)]
        accepted = None
        trial = lr
        with_momentum = True
        for _ in range(settings.line_search_max):
            if with_momentum:
                v_new = [settings.momentum * v - trial * s * g
                         for v, s, g in zip(velocity, scales, direction)]
            else:
                v_new = [-trial * s * g for s, g in zip(scales, direction)]
            cand = [(p + v).detach() for p, v in zip(params, v_new)]
            with torch.no_grad():
                t_new, c_new = eval_loss(cand, lam_f)
            if torch.isfinite(t_new) and float(t_new) <= base:
                accepted = (cand, v_new, float(t_new), c_new)
                break
            trial *= 0.5
            with_momentum = False
        if accepted is None:
            velocity = [torch.zeros_like(v) for v in velocity]
            # resume the search below the smallest step just tried instead of
            # re-walking the whole ladder next iteration
            lr = max(trial, 1e-12)
            history.append({"iteration": it, "lambda_f": lam_f, "total": base,
                            "lr": 0.0, **comps})
            stalled += 1
            if stalled >= 4 and lam_f == weights.lambda_f:
                break
            continue
        cand, v_new, t_val, c_new = accepted
        with torch.no_grad():
            for p, c in zip(params, cand):
                p.copy_(c)
        velocity = v_new
        lr = min(trial * settings.lr_recover, settings.learning_rate)
        history.append({"iteration": it, "lambda_f": lam_f, "total": t_val,
                        "lr": trial, **c_new})
        if base - t_val <= 1e-9 * max(1.0, abs(base)):
            stalled += 1
            if stalled >= 4 and lam_f == weights.lambda_f:
                break
        else:
            stalled = 0

    return _emit(flows, segs, weights, settings, bg_grid, obj_grids,
                 bg_t, obj_t, mask_logits, class_logits, depth_log,
                 history, aborted)


def _emit(flows, segs, weights, settings, bg_grid, obj_grids,
          bg_t, obj_t, mask_logits, class_logits, depth_log,
          history, aborted) -> decompose.SceneDecomposition:
    """Freeze the torch state into a numpy SceneDecomposition.

    Frame-space masks are recomputed through the numpy warp/refine path so
    the emitted stack is exactly reproducible from the stored trajectories
    and canvases.
    """
    h, w = flows[0].shape
    t_count = len(flows) + 1
    n = len(obj_grids)
    grids = [bg_grid] + obj_grids
    depths = np.exp(depth_log.detach().numpy()) if n else np.zeros(0)

    trajectories = [[tps.ControlState(points=bg_t[t].detach().numpy().astype(float),
                                      depth=0.0)
                     for t in range(t_count)]]
    for i in range(n):
        trajectories.append([
            tps.ControlState(points=obj_t[i][t].detach().numpy().astype(float),
                             depth=float(depths[i]))
            for t in range(t_count)
        ])

    intrinsic = [np.ones((h, w))]
    for i in range(n):
        intrinsic.append(torch.sigmoid(mask_logits[i]).detach().numpy())

    num_classes = segs[0].num_classes
    classes = np.zeros((n + 1, num_classes))
    stuff = segs[0].stuff
    if stuff.any():
        classes[0, stuff] = 1.0 / stuff.sum()
    else:
        classes[0] = 1.0 / num_classes
    for i in range(n):
        classes[i + 1] = torch.softmax(class_logits[i], dim=0).detach().numpy()

    solvers = [tps.build_solver(g) for g in grids]
    warped = np.zeros((n + 1, t_count, h, w))
    for i in range(n + 1):
        for t in range(t_count):
            xf = tps.solve_params(solvers[i], trajectories[i][t].points)
            warped[i, t] = warp_mask(intrinsic[i], xf, h, w)
    for i in range(1, n + 1):
        refined, _ = semantic_refine(warped[i], classes[i], segs, settings.k_c)
        warped[i] = refined

    stack = LayerStack(intrinsic=intrinsic, warped=warped, classes=classes)
    return decompose.SceneDecomposition(
        grids=grids,
        trajectories=trajectories,
        stack=stack,
        height=h,
        width=w,
        frame_count=t_count,
        class_names=list(segs[0].names),
        loss_history=history,
        aborted_non_finite=aborted,
    )
