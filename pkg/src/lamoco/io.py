"""File formats: flow files, image and mask PNGs, and the clip manifest.

Flow travels as Middlebury .flo, frames as 8-bit RGB PNG, segmentation as
8-bit indexed PNG with a JSON class table, intrinsic masks as 16-bit
grayscale PNG, and the fitted scene as a versioned JSON manifest whose
control points live in normalized coordinates, so one manifest serves any
output resolution. Every writer is deterministic and every round trip is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tps
from .decompose import SceneDecomposition
from .errors import InvalidSpec, SizeMismatch
from .forecast import TrajectorySet
from .layers import LayerStack, SegMap, occlusion_filter, composite_flow, \
    semantic_refine, warp_mask
from .warpfield import FlowField, compose_pair

MANIFEST_VERSION = "lamoco/1"
# float32 202021.25 stored little-endian reads as the bytes "PIEH"
FLO_MAGIC = 202021.25
# Middlebury convention: unknown flow is flagged by huge magnitudes
FLO_SENTINEL = 1e10
FLO_UNKNOWN_THRESH = 1e9


# ------------------------------------------------------------------ .flo

def write_flo(path, flow: FlowField) -> None:
    """Write a flow field as a Middlebury .flo file.

    Invalid cells are stored with the conventional huge sentinel value so
    other tools skip them.
    """
    h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = np.where(flow.valid, flow.u, FLO_SENTINEL)
    data[..., 1] = np.where(flow.valid, flow.v, FLO_SENTINEL)
    with open(path, "wb") as fp:
        fp.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        fp.write(np.array([w, h], dtype="<i4").tobytes())
        fp.write(data.tobytes())


def read_flo(path) -> FlowField:
    """Read a Middlebury .flo file; huge values become invalid cells."""
    with open(path, "rb") as fp:
        raw = fp.read()
    if len(raw) < 12:
        raise InvalidSpec(f"{path}: too short for a .flo header")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise InvalidSpec(f"{path}: bad .flo magic {magic!r}")
    w, h = (int(x) for x in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise InvalidSpec(f"{path}: nonsensical .flo size {w}x{h}")
    expect = 12 + 8 * h * w
    if len(raw) != expect:
        raise InvalidSpec(f"{path}: expected {expect} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    u = data[..., 0].astype(np.float64)
    v = data[..., 1].astype(np.float64)
    valid = (np.abs(u) < FLO_UNKNOWN_THRESH) & (np.abs(v) < FLO_UNKNOWN_THRESH)
    valid &= np.isfinite(u) & np.isfinite(v)
    return FlowField(u=np.where(valid, u, 0.0),
                     v=np.where(valid, v, 0.0), valid=valid)


# ------------------------------------------------------------------- PNGs

def write_frame_png(path, img) -> None:
    """Save a float image in [0, 1] as an 8-bit RGB PNG."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise SizeMismatch(f"expected an (H, W, 3) image, got {arr.shape}")
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def read_frame_png(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_mask_png(path, mask) -> None:
    """Save a float mask in [0, 1] as a 16-bit grayscale PNG."""
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise SizeMismatch(f"expected an (H, W) mask, got {arr.shape}")
    q = np.clip(np.round(arr * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 65535.0


def _palette(num_classes: int) -> list:
    # deterministic, reasonably distinct colors for label inspection
    colors = []
    for i in range(256):
        colors += [(i * 67) % 256, (i * 129) % 256, (i * 211) % 256]
    colors[:3] = [0, 0, 0]
    return colors


def write_seg_png(path, labels) -> None:
    """Save an (H, W) integer label image as an 8-bit indexed PNG."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise SizeMismatch(f"expected (H, W) labels, got {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise InvalidSpec("labels must fit in one byte")
    img = Image.fromarray(arr.astype(np.uint8), mode="P")
    img.putpalette(_palette(int(arr.max()) + 1))
    img.save(path, format="PNG")


def read_seg_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "P":
        img = img.convert("P")
    return np.asarray(img, dtype=np.intp)


def write_class_table(path, names, stuff) -> None:
    """Sidecar naming each label index and flagging static scenery."""
    names = list(names)
    stuff = [bool(s) for s in stuff]
    if len(names) != len(stuff):
        raise SizeMismatch("need one stuff flag per class name")
    with open(path, "w") as fp:
        json.dump({"names": names, "stuff": stuff}, fp, indent=2)
        fp.write("\n")


def read_class_table(path):
    with open(path) as fp:
        table = json.load(fp)
    try:
        names = list(table["names"])
        stuff = [bool(s) for s in table["stuff"]]
    except (KeyError, TypeError) as exc:
        raise InvalidSpec(f"{path}: malformed class table") from exc
    if len(names) != len(stuff):
        raise InvalidSpec(f"{path}: names and stuff flags disagree")
    return names, stuff


def seg_from_files(png_path, table_path) -> SegMap:
    """Assemble a SegMap from a label PNG and its class table."""
    names, stuff = read_class_table(table_path)
    labels = read_seg_png(png_path)
    if labels.max() >= len(names):
        raise InvalidSpec(f"{png_path}: label exceeds class table size")
    return SegMap.from_labels(labels, len(names), np.asarray(stuff, dtype=bool),
                              names=names)


# --------------------------------------------------------------- manifest

@dataclass
class Manifest:
    """Serialized scene decomposition, optionally extended into the future.

    Control points and canvases live in normalized coordinates, so the
    manifest is resolution-free; ``height``/``width`` only record the clip
    the fit ran on. ``trajectories[i]`` holds ``observed_count`` fitted
    states followed by ``predicted_count`` forecast states.
    """

    height: int
    width: int
    observed_count: int
    predicted_count: int
    grids: list
    trajectories: list
    intrinsic: list
    classes: np.ndarray
    class_names: list
    loss_history: list
    hyperparameters: dict = field(default_factory=dict)
    aborted_non_finite: bool = False
    version: str = MANIFEST_VERSION

    def __post_init__(self):
        if len(self.grids) != len(self.trajectories):
            raise SizeMismatch("one trajectory per grid required")
        if len(self.grids) != len(self.intrinsic):
            raise SizeMismatch("one intrinsic canvas per grid required")
        total = self.observed_count + self.predicted_count
        for grid, states in zip(self.grids, self.trajectories):
            if len(states) != total:
                raise SizeMismatch("trajectory length must be T + K")
            for st in states:
                if st.points.shape != grid.points.shape:
                    raise SizeMismatch("state does not match its grid")
        self.classes = np.asarray(self.classes, dtype=np.float64)

    @property
    def num_layers(self) -> int:
        return len(self.grids)

    @classmethod
    def from_decomposition(cls, decomp: SceneDecomposition,
                           hyperparameters=None) -> "Manifest":
        return cls(
            height=decomp.height,
            width=decomp.width,
            observed_count=decomp.frame_count,
            predicted_count=0,
            grids=list(decomp.grids),
            trajectories=[list(s) for s in decomp.trajectories],
            intrinsic=list(decomp.stack.intrinsic),
            classes=decomp.stack.classes,
            class_names=list(decomp.class_names),
            loss_history=list(decomp.loss_history),
            hyperparameters=dict(hyperparameters or {}),
            aborted_non_finite=decomp.aborted_non_finite,
        )

    def trajectory_set(self) -> TrajectorySet:
        observed = np.array([True] * self.observed_count
                            + [False] * self.predicted_count)
        return TrajectorySet(states=[list(s) for s in self.trajectories],
                             observed=observed)

    def with_forecast(self, future: TrajectorySet) -> "Manifest":
        """Copy of this manifest carrying the predicted states."""
        if future.num_layers != self.num_layers:
            raise SizeMismatch("forecast layer count differs from manifest")
        if future.observed_count != self.observed_count:
            raise SizeMismatch("forecast observed prefix differs from manifest")
        return Manifest(
            height=self.height, width=self.width,
            observed_count=self.observed_count,
            predicted_count=future.predicted_count,
            grids=list(self.grids),
            trajectories=[list(s) for s in future.states],
            intrinsic=list(self.intrinsic),
            classes=self.classes,
            class_names=list(self.class_names),
            loss_history=list(self.loss_history),
            hyperparameters=dict(self.hyperparameters),
            aborted_non_finite=self.aborted_non_finite,
        )

    def decomposition(self, segs=None) -> SceneDecomposition:
        """Rebuild the fitted decomposition from stored state.

        Frame masks are re-rendered from the intrinsic canvases. When the
        original segmentation maps are supplied the semantic reweighting of
        object masks is reapplied, reproducing the fitted stack.
        """
        h, w = self.height, self.width
        t_count = self.observed_count
        solvers = [tps.build_solver(g) for g in self.grids]
        n_total = self.num_layers
        warped = np.zeros((n_total, t_count, h, w))
        for i in range(n_total):
            for t in range(t_count):
                xf = tps.solve_params(solvers[i], self.trajectories[i][t].points)
                warped[i, t] = warp_mask(self.intrinsic[i], xf, h, w)
        if segs is not None:
            if len(segs) != t_count:
                raise SizeMismatch("need one segmentation per observed frame")
            k_c = float(self.hyperparameters.get("k_c", 0.1))
            for i in range(1, n_total):
                refined, _ = semantic_refine(warped[i], self.classes[i],
                                             segs, k_c)
                warped[i] = refined
        stack = LayerStack(intrinsic=list(self.intrinsic), warped=warped,
                           classes=self.classes)
        return SceneDecomposition(
            grids=list(self.grids),
            trajectories=[list(s[:t_count]) for s in self.trajectories],
            stack=stack,
            height=h, width=w,
            frame_count=t_count,
            class_names=list(self.class_names),
            loss_history=list(self.loss_history),
            aborted_non_finite=self.aborted_non_finite,
        )


def manifest_flow(manifest: Manifest, t1: int, t2: int,
                  height: int | None = None,
                  width: int | None = None) -> FlowField:
    """Composited backward flow of frame t2 toward frame t1.

    Sampled at any requested resolution; the stored representation is
    resolution-free. Both steps may also index forecast states.
    """
    total = manifest.observed_count + manifest.predicted_count
    for t in (t1, t2):
        if t < 0 or t >= total:
            raise SizeMismatch(f"step {t} outside the manifest range 0..{total - 1}")
    h = manifest.height if height is None else int(height)
    w = manifest.width if width is None else int(width)
    if h < 2 or w < 2:
        raise SizeMismatch("requested resolution is too small")
    flows = []
    masks = []
    depths = []
    for i in range(manifest.num_layers):
        solver = tps.build_solver(manifest.grids[i])
        xf2 = tps.solve_params(solver, manifest.trajectories[i][t2].points)
        xf1 = tps.solve_params(solver, manifest.trajectories[i][t1].points)
        flows.append(compose_pair(xf2, xf1, h, w))
        masks.append(warp_mask(manifest.intrinsic[i], xf2, h, w))
        depths.append(manifest.trajectories[i][t2].depth)
    vis, _ = occlusion_filter(masks, np.array(depths))
    return composite_flow(flows, vis)


def _float(x) -> float:
    return float(x)


def _points_list(points) -> list:
    return [[_float(p[0]), _float(p[1])] for p in np.asarray(points)]


def _loss_entry(entry) -> dict:
    # accepted-step records mix the iteration counter with float readouts
    return {k: (int(v) if k == "iteration" else _float(v))
            for k, v in entry.items()}


def manifest_to_dict(manifest: Manifest, mask_names) -> dict:
    """JSON-ready view of a manifest, masks referenced by file name."""
    return {
        "version": manifest.version,
        "resolution": [int(manifest.height), int(manifest.width)],
        "observed": int(manifest.observed_count),
        "predicted": int(manifest.predicted_count),
        "aborted_non_finite": bool(manifest.aborted_non_finite),
        "hyperparameters": manifest.hyperparameters,
        "class_names": list(manifest.class_names),
        "classes": [[_float(c) for c in row] for row in manifest.classes],
        "grids": [
            {"rows": int(g.rows), "cols": int(g.cols),
             "points": _points_list(g.points)}
            for g in manifest.grids
        ],
        "trajectories": [
            [{"depth": _float(st.depth), "points": _points_list(st.points)}
             for st in states]
            for states in manifest.trajectories
        ],
        "masks": list(mask_names),
        "loss_history": [_loss_entry(v) for v in manifest.loss_history],
    }


def save_manifest(manifest: Manifest, path) -> None:
    """Write the manifest JSON plus one 16-bit PNG per intrinsic canvas."""
    path = Path(path)
    mask_names = [f"{path.stem}.mask{i}.png"
                  for i in range(manifest.num_layers)]
    for name, canvas in zip(mask_names, manifest.intrinsic):
        write_mask_png(path.parent / name, canvas)
    with open(path, "w") as fp:
        json.dump(manifest_to_dict(manifest, mask_names), fp, indent=2)
        fp.write("\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    with open(path) as fp:
        try:
            obj = json.load(fp)
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"{path}: not valid JSON: {exc}") from exc
    version = obj.get("version")
    if version != MANIFEST_VERSION:
        raise InvalidSpec(
            f"{path}: unsupported manifest version {version!r}, "
            f"expected {MANIFEST_VERSION!r}")
    try:
        grids = [tps.ControlGrid(rows=g["rows"], cols=g["cols"],
                                 points=np.array(g["points"], dtype=np.float64))
                 for g in obj["grids"]]
        trajectories = [
            [tps.ControlState(points=np.array(st["points"], dtype=np.float64),
                              depth=st["depth"])
             for st in states]
            for states in obj["trajectories"]
        ]
        intrinsic = [read_mask_png(path.parent / name)
                     for name in obj["masks"]]
        manifest = Manifest(
            height=obj["resolution"][0],
            width=obj["resolution"][1],
            observed_count=obj["observed"],
            predicted_count=obj["predicted"],
            grids=grids,
            trajectories=trajectories,
            intrinsic=intrinsic,
            classes=np.array(obj["classes"], dtype=np.float64),
            class_names=list(obj["class_names"]),
            loss_history=list(obj["loss_history"]),
            hyperparameters=dict(obj["hyperparameters"]),
            aborted_non_finite=bool(obj["aborted_non_finite"]),
            version=version,
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise InvalidSpec(f"{path}: malformed manifest: {exc}") from exc
    except FileNotFoundError as exc:
        raise InvalidSpec(f"{path}: missing mask file: {exc}") from exc
    return manifest
