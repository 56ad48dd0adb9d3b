"""Deterministic synthetic scenes with exact ground truth.

A scene is a translating/warping background plus textured rigid objects,
each with its own analytic motion program. Because layer textures are sums
of random sinusoids (band-limited by construction) and motions are
analytically invertible, frames, backward flows, per-layer masks and
control-point trajectories can all be evaluated exactly at any continuous
position. Painter's algorithm over unique depth ranks resolves occlusion.

Scene specs are plain dicts (JSON-friendly); see SceneSpec.from_dict for
the schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tps
from .errors import InvalidSpec
from .layers import LayerStack, SegMap, object_canvas_size
from .warpfield import FlowField, bilinear_sample

# Eq.-8-style soft occlusion needs large score ratios to look binary; the
# generator assigns score BASE**rank so one rank step occludes to ~1e-3.
DEPTH_SCORE_BASE = 1000.0
TEXTURE_WAVES = 10
TEXTURE_AMPLITUDE = 0.45


# --------------------------------------------------------------- motions

class _Motion:
    """Analytic motion program: reference coords -> frame-t coords."""

    def forward(self, pts, steps):
        raise NotImplementedError

    def inverse(self, pts, steps):
        raise NotImplementedError


class _Static(_Motion):
    def forward(self, pts, steps):
        return np.array(pts, dtype=np.float64, copy=True)

    inverse = forward


class _Translation(_Motion):
    def __init__(self, velocity):
        self.velocity = np.asarray(velocity, dtype=np.float64)
        if self.velocity.shape != (2,):
            raise InvalidSpec("translation velocity must be [vx, vy]")

    def forward(self, pts, steps):
        return np.asarray(pts, dtype=np.float64) + steps * self.velocity

    def inverse(self, pts, steps):
        return np.asarray(pts, dtype=np.float64) - steps * self.velocity


class _Affine(_Motion):
    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.allclose(m[2], [0, 0, 1]):
            raise InvalidSpec("affine step must be a 3x3 matrix with last row [0,0,1]")
        self.step = m

    def _power(self, steps):
        return np.linalg.matrix_power(self.step, int(steps))

    def forward(self, pts, steps):
        p = np.asarray(pts, dtype=np.float64)
        hom = np.concatenate([p, np.ones((*p.shape[:-1], 1))], axis=-1)
        return (hom @ self._power(steps).T)[..., :2]

    def inverse(self, pts, steps):
        p = np.asarray(pts, dtype=np.float64)
        hom = np.concatenate([p, np.ones((*p.shape[:-1], 1))], axis=-1)
        return (hom @ np.linalg.inv(self._power(steps)).T)[..., :2]


class _TpsMotion(_Motion):
    """Grid-based warp whose targets drift linearly per step."""

    def __init__(self, rows, cols, offsets, region=None):
        x_range, y_range = ((-1.0, 1.0), (-1.0, 1.0)) if region is None else region
        grid = tps.ControlGrid.regular(rows, cols, x_range=x_range, y_range=y_range)
        self.grid = grid
        self.solver = tps.build_solver(grid)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        if self.offsets.shape != grid.points.shape:
            raise InvalidSpec("tps offsets must match the grid point count")
        self._cache = {}

    def _xf(self, steps):
        if steps not in self._cache:
            self._cache[steps] = tps.solve_params(
                self.solver, self.grid.points + steps * self.offsets
            )
        return self._cache[steps]

    def forward(self, pts, steps):
        p = np.asarray(pts, dtype=np.float64)
        if steps == 0:
            return p.copy()
        out = tps.apply_points(self._xf(steps), p.reshape(-1, 2))
        return out.reshape(p.shape)

    def inverse(self, pts, steps):
        p = np.asarray(pts, dtype=np.float64)
        if steps == 0:
            return p.copy()
        xf = self._xf(steps)
        x = p.reshape(-1, 2)
        q = x.copy()
        for _ in range(60):
            res = x - tps.apply_points(xf, q)
            q += res
            if np.max(np.abs(res)) < 1e-11:
                break
        return q.reshape(p.shape)


def _compile_motion(cfg) -> _Motion:
    cfg = cfg or {"kind": "static"}
    kind = cfg.get("kind")
    if kind == "static":
        return _Static()
    if kind == "translation":
        return _Translation(cfg.get("velocity"))
    if kind == "affine":
        return _Affine(cfg.get("matrix"))
    if kind == "tps":
        return _TpsMotion(
            int(cfg.get("rows", 3)),
            int(cfg.get("cols", 3)),
            cfg.get("offsets"),
            cfg.get("region"),
        )
    raise InvalidSpec(f"unknown motion kind: {kind!r}")


# ---------------------------------------------------------------- shapes

def _as_pair(value, what):
    arr = np.asarray(value, dtype=np.float64) if value is not None else None
    if arr is None or arr.shape != (2,) or not np.all(np.isfinite(arr)):
        raise InvalidSpec(f"{what} must be a finite [x, y] pair, got {value!r}")
    return arr


class _Shape:
    def contains(self, pts):
        raise NotImplementedError

    def bbox(self):
        raise NotImplementedError


class _Disk(_Shape):
    def __init__(self, center, radius):
        self.center = _as_pair(center, "disk center")
        if radius is None or not np.isfinite(float(radius)):
            raise InvalidSpec(f"disk radius must be a finite number, got {radius!r}")
        self.radius = float(radius)
        if self.radius <= 0:
            raise InvalidSpec("disk radius must be positive")

    def contains(self, pts):
        d = np.asarray(pts, dtype=np.float64) - self.center
        return np.einsum("...k,...k->...", d, d) <= self.radius ** 2

    def bbox(self):
        return (self.center[0] - self.radius, self.center[0] + self.radius,
                self.center[1] - self.radius, self.center[1] + self.radius)


class _Rect(_Shape):
    def __init__(self, center, half):
        self.center = _as_pair(center, "rect center")
        self.half = _as_pair(half, "rect half")
        if np.any(self.half <= 0):
            raise InvalidSpec("rect half-extents must be positive")

    def contains(self, pts):
        d = np.abs(np.asarray(pts, dtype=np.float64) - self.center)
        return (d[..., 0] <= self.half[0]) & (d[..., 1] <= self.half[1])

    def bbox(self):
        return (self.center[0] - self.half[0], self.center[0] + self.half[0],
                self.center[1] - self.half[1], self.center[1] + self.half[1])


def _compile_shape(cfg) -> _Shape:
    kind = (cfg or {}).get("kind")
    if kind == "disk":
        return _Disk(cfg.get("center"), cfg.get("radius"))
    if kind == "rect":
        return _Rect(cfg.get("center"), cfg.get("half"))
    raise InvalidSpec(f"unknown shape kind: {kind!r}")


# -------------------------------------------------------------- textures

class _NoiseTexture:
    """Band-limited RGB noise: a seeded sum of random sinusoids.

    Evaluable exactly at any continuous coordinate, which is what makes the
    generated flow/frame pairs exact rather than resampled.
    """

    def __init__(self, rng, scale, waves=TEXTURE_WAVES):
        self.amp = np.zeros((3, waves))
        self.freq = np.zeros((3, waves, 2))
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, waves))
        for c in range(3):
            self.amp[c] = rng.uniform(0.3, 1.0, size=waves)
            angles = rng.uniform(0, 2 * np.pi, size=waves)
            radii = rng.uniform(0.3, 1.0, size=waves) * scale
            self.freq[c] = np.stack([np.cos(angles), np.sin(angles)], axis=1) * radii[:, None]

    def eval(self, pts):
        p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        out = np.zeros((p.shape[0], 3))
        for c in range(3):
            arg = 2 * np.pi * (p @ self.freq[c].T) + self.phase[c]
            out[:, c] = (np.cos(arg) * self.amp[c]).sum(axis=1) / self.amp[c].sum()
        return 0.5 + TEXTURE_AMPLITUDE * out


# ----------------------------------------------------------------- specs

@dataclass
class SceneSpec:
    """Declarative scene description; see from_dict for the dict schema."""

    height: int
    width: int
    frames: int
    seed: int
    background: dict
    objects: list

    @classmethod
    def from_dict(cls, cfg: dict) -> "SceneSpec":
        """Build a spec from the config schema:

        {
          "resolution": [height, width],
          "frames": T,
          "seed": int,
          "background": {"texture_scale": f, "motion": {...}},
          "objects": [
            {"shape": {"kind": "disk"|"rect", ...},
             "depth": unique positive int,
             "texture_scale": f,
             "class_name": str (optional),
             "grid": [rows, cols] (optional, default [4, 4]),
             "motion": {...}},
            ...
          ]
        }

        Motion schema: {"kind": "static"} |
        {"kind": "translation", "velocity": [vx, vy]} |
        {"kind": "affine", "matrix": 3x3 per-step} |
        {"kind": "tps", "rows": r, "cols": c, "offsets": [[dx,dy],...],
         "region": [[x0,x1],[y0,y1]] (optional)}
        All coordinates are normalized ([-1,1] spans the frame); velocities
        and offsets are per frame step.
        """
        try:
            height, width = cfg["resolution"]
        except (KeyError, TypeError, ValueError):
            raise InvalidSpec("spec needs \"resolution\": [height, width]")
        frames = cfg.get("frames")
        if not isinstance(frames, int) or frames < 1:
            raise InvalidSpec("spec needs a positive integer \"frames\"")
        spec = cls(
            height=int(height),
            width=int(width),
            frames=frames,
            seed=int(cfg.get("seed", 0)),
            background=dict(cfg.get("background", {})),
            objects=[dict(o) for o in cfg.get("objects", [])],
        )
        ranks = [o.get("depth") for o in spec.objects]
        if any(not isinstance(r, int) or r < 1 for r in ranks):
            raise InvalidSpec("every object needs a positive integer \"depth\" rank")
        if len(set(ranks)) != len(ranks):
            raise InvalidSpec("object depth ranks must be unique")
        # compile eagerly so malformed programs fail here
        _compile_motion(spec.background.get("motion"))
        for o in spec.objects:
            _compile_shape(o.get("shape"))
            _compile_motion(o.get("motion"))
        return spec

    def to_dict(self) -> dict:
        return {
            "resolution": [self.height, self.width],
            "frames": self.frames,
            "seed": self.seed,
            "background": self.background,
            "objects": self.objects,
        }


@dataclass
class SceneTruth:
    """Everything the generator knows exactly about a scene."""

    spec: SceneSpec
    frames: np.ndarray          # (T, H, W, 3)
    flows: list                 # T-1 backward FlowFields (index t-2 holds f_t)
    vis_masks: np.ndarray       # (T, N+1, H, W) visibility after occlusion
    full_masks: np.ndarray      # (T, N+1, H, W) presence ignoring occlusion
    trajectories: list          # per layer: list of ControlState, length T
    grids: list                 # per layer: ControlGrid
    segs: list                  # per frame SegMap
    covis: np.ndarray           # (T-1, H, W) co-visible pixels for f_t checks
    class_names: list = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return self.vis_masks.shape[1]


def _pixel_points(height, width):
    y, x = tps.pixel_center_coords(height, width)
    gx, gy = np.meshgrid(x, y)
    return np.stack([gx, gy], axis=-1)


def generate(spec: SceneSpec) -> SceneTruth:
    """Rasterize a spec into frames plus exact ground truth.

    Layers are drawn back to front by depth rank; each pixel's flow is the
    analytic motion of the layer that owns it. Raises InvalidSpec when a
    motion program pushes more than half of an object out of frame.
    """
    h, w = spec.height, spec.width
    t_count = spec.frames
    order = sorted(range(len(spec.objects)), key=lambda i: spec.objects[i]["depth"])
    n_layers = len(spec.objects) + 1

    bg_motion = _compile_motion(spec.background.get("motion"))
    motions = [bg_motion] + [_compile_motion(o.get("motion")) for o in spec.objects]
    shapes = [_compile_shape(o.get("shape")) for o in spec.objects]
    textures = [
        _NoiseTexture(
            np.random.default_rng([spec.seed, idx]),
            (spec.background if idx == 0 else spec.objects[idx - 1]).get("texture_scale", 4.0),
        )
        for idx in range(n_layers)
    ]

    pix = _pixel_points(h, w)
    frames = np.zeros((t_count, h, w, 3))
    full_masks = np.zeros((t_count, n_layers, h, w), dtype=bool)
    vis_masks = np.zeros_like(full_masks)
    owner = np.zeros((t_count, h, w), dtype=np.intp)
    ref_area = {i: None for i in range(1, n_layers)}

    for t in range(t_count):
        frames[t] = textures[0].eval(motions[0].inverse(pix, t)).reshape(h, w, 3)
        full_masks[t, 0] = True
        for oi in order:
            layer = oi + 1
            inv_pts = motions[layer].inverse(pix, t)
            inside = shapes[oi].contains(inv_pts)
            full_masks[t, layer] = inside
            owner[t][inside] = layer
            if inside.any():
                frames[t][inside] = textures[layer].eval(inv_pts[inside])
            if t == 0:
                ref_area[layer] = int(inside.sum())
            elif ref_area[layer] and inside.sum() < 0.5 * ref_area[layer]:
                raise InvalidSpec(
                    f"object {oi} drops below 50% frame coverage at t={t + 1}"
                )
        for layer in range(n_layers):
            vis_masks[t, layer] = owner[t] == layer

    # backward flows and co-visibility
    flows = []
    covis = np.zeros((t_count - 1, h, w), dtype=bool)
    for t in range(1, t_count):
        u = np.zeros((h, w))
        v = np.zeros((h, w))
        prev_f = np.zeros((h, w, 2))
        for layer in range(n_layers):
            sel = owner[t] == layer
            if not sel.any():
                continue
            ref_pts = motions[layer].inverse(pix[sel], t)
            prev_pts = motions[layer].forward(ref_pts, t - 1)
            d = prev_pts - pix[sel]
            u[sel] = d[:, 0] * (w / 2.0)
            v[sel] = d[:, 1] * (h / 2.0)
            prev_f[sel] = prev_pts
        flows.append(FlowField(u=u, v=v, valid=np.ones((h, w), dtype=bool)))
        # a pixel is co-visible when its matched position at t-1 is owned by
        # the same layer with a full bilinear footprint, eroded for safety
        px_x = (prev_f[..., 0] + 1.0) * w / 2.0 - 0.5
        px_y = (prev_f[..., 1] + 1.0) * h / 2.0 - 0.5
        same = np.zeros((h, w), dtype=bool)
        for layer in range(n_layers):
            sel = owner[t] == layer
            if not sel.any():
                continue
            vals, inside = bilinear_sample(vis_masks[t - 1, layer].astype(float), px_x, px_y)
            same |= sel & inside & (vals > 1.0 - 1e-9)
        covis[t - 1] = ndimage.binary_erosion(same, structure=np.ones((3, 3)))

    # exact control trajectories; object grids cover each shape's bbox
    grids = []
    trajectories = []
    for layer in range(n_layers):
        if layer == 0:
            bg = spec.background
            grid = tps.ControlGrid.regular(int(bg.get("grid", [8, 16])[0]),
                                           int(bg.get("grid", [8, 16])[1]))
            score = 0.0
        else:
            o = spec.objects[layer - 1]
            rows, cols = o.get("grid", [4, 4])
            x0, x1, y0, y1 = shapes[layer - 1].bbox()
            grid = tps.ControlGrid.regular(int(rows), int(cols),
                                           x_range=(x0, x1), y_range=(y0, y1))
            score = DEPTH_SCORE_BASE ** o["depth"]
        grids.append(grid)
        trajectories.append(
            [tps.ControlState(points=motions[layer].forward(grid.points, t), depth=score)
             for t in range(t_count)]
        )

    class_names = ["background"]
    class_of_layer = [0]
    for i, o in enumerate(spec.objects):
        name = o.get("class_name", f"object{i + 1}")
        if name not in class_names:
            class_names.append(name)
        class_of_layer.append(class_names.index(name))
    stuff = np.array([name == "background" for name in class_names])
    segs = []
    for t in range(t_count):
        labels = np.take(np.asarray(class_of_layer), owner[t])
        segs.append(SegMap.from_labels(labels, len(class_names), stuff, names=list(class_names)))

    return SceneTruth(
        spec=spec,
        frames=frames,
        flows=flows,
        vis_masks=vis_masks,
        full_masks=full_masks,
        trajectories=trajectories,
        grids=grids,
        segs=segs,
        covis=covis,
        class_names=class_names,
    )


def truth_decomposition(truth: SceneTruth, frames: int | None = None):
    """Assemble the exact layered decomposition a perfect fit would find.

    Uses the generator's grids, trajectories, presence masks and class
    table directly; ``frames`` restricts the decomposition to a prefix of
    the clip. Useful as an oracle for downstream stages.
    """
    from .decompose import SceneDecomposition

    t_use = truth.frames.shape[0] if frames is None else int(frames)
    if t_use < 1 or t_use > truth.frames.shape[0]:
        raise InvalidSpec(f"cannot keep {frames} of {truth.frames.shape[0]} frames")
    h, w = truth.frames.shape[1:3]
    n = truth.num_layers - 1
    canvases = [np.ones((h, w))]
    for i, obj in enumerate(truth.spec.objects):
        shape = _compile_shape(obj.get("shape"))
        ch, cw = object_canvas_size(truth.grids[i + 1])
        pts = _pixel_points(ch, cw)
        canvases.append(shape.contains(pts).astype(np.float64))
    classes = np.zeros((n + 1, n + 1))
    for i in range(n + 1):
        classes[i, i] = 1.0
    stack = LayerStack(
        intrinsic=canvases,
        warped=np.transpose(truth.full_masks[:t_use], (1, 0, 2, 3)).astype(np.float64),
        classes=classes,
    )
    trajectories = [list(states[:t_use]) for states in truth.trajectories]
    return SceneDecomposition(
        grids=list(truth.grids),
        trajectories=trajectories,
        stack=stack,
        height=h,
        width=w,
        frame_count=t_use,
        class_names=list(truth.class_names),
    )


def two_object_benchmark_spec(seed: int = 7, frames: int = 6) -> SceneSpec:
    """The canonical benchmark: translating background, two rigid movers.

    128x256, with enough frames for four observed steps plus future ones.
    """
    return SceneSpec.from_dict({
        "resolution": [128, 256],
        "frames": frames,
        "seed": seed,
        "background": {
            "texture_scale": 3.0,
            "motion": {"kind": "translation", "velocity": [0.010, 0.006]},
        },
        "objects": [
            {
                "shape": {"kind": "rect", "center": [-0.45, -0.15], "half": [0.14, 0.30]},
                "depth": 1,
                "texture_scale": 5.0,
                "class_name": "box",
                "motion": {"kind": "translation", "velocity": [0.036, 0.012]},
            },
            {
                "shape": {"kind": "disk", "center": [0.40, 0.25], "radius": 0.22},
                "depth": 2,
                "texture_scale": 6.0,
                "class_name": "puck",
                "motion": {"kind": "translation", "velocity": [-0.028, -0.018]},
            },
        ],
    })
