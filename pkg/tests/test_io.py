"""Flow files, image PNGs, class tables and the scene manifest."""

import json

import numpy as np
import pytest

from lamoco import io, scenegen
from lamoco.errors import InvalidSpec, SizeMismatch
from lamoco.forecast import predict
from lamoco.layers import SegMap
from lamoco.metrics import epe
from lamoco.warpfield import FlowField, bilinear_sample


def random_flow(h, w, seed, invalid_frac=0.2):
    rng = np.random.default_rng(seed)
    valid = rng.uniform(size=(h, w)) > invalid_frac
    return FlowField(u=np.where(valid, rng.normal(size=(h, w)) * 7, 0.0),
                     v=np.where(valid, rng.normal(size=(h, w)) * 7, 0.0),
                     valid=valid)


@pytest.fixture(scope="module")
def truth():
    spec = scenegen.SceneSpec.from_dict({
        "resolution": [48, 64], "frames": 5, "seed": 21,
        "background": {"texture_scale": 3.0, "motion": {"kind": "static"}},
        "objects": [
            {"shape": {"kind": "rect", "center": [-0.4375, 0.0],
                       "half": [0.125, 0.25]},
             "depth": 1, "texture_scale": 5.0, "class_name": "box",
             "motion": {"kind": "translation", "velocity": [0.0625, 0.0]}},
        ],
    })
    return scenegen.generate(spec)


@pytest.fixture(scope="module")
def manifest(truth):
    decomp = scenegen.truth_decomposition(truth)
    return io.Manifest.from_decomposition(decomp, {"k_c": 0.1})


# ------------------------------------------------------------------- .flo

def test_flo_round_trip_preserves_everything(tmp_path):
    flow = random_flow(17, 23, seed=3)
    path = tmp_path / "a.flo"
    io.write_flo(path, flow)
    back = io.read_flo(path)
    assert np.array_equal(back.valid, flow.valid)
    # float64 -> float32 -> float64 loses precision, so compare at float32
    assert np.array_equal(back.u.astype(np.float32),
                          flow.u.astype(np.float32))
    assert np.array_equal(back.v.astype(np.float32),
                          flow.v.astype(np.float32))
    assert np.all(back.u[~back.valid] == 0.0)


def test_flo_write_read_write_is_byte_identical(tmp_path):
    flow = random_flow(11, 9, seed=5)
    a = tmp_path / "a.flo"
    b = tmp_path / "b.flo"
    io.write_flo(a, flow)
    io.write_flo(b, io.read_flo(a))
    assert a.read_bytes() == b.read_bytes()


def test_flo_header_starts_with_pieh(tmp_path):
    path = tmp_path / "a.flo"
    io.write_flo(path, random_flow(4, 6, seed=0))
    raw = path.read_bytes()
    assert raw[:4] == b"PIEH"
    w, h = np.frombuffer(raw, dtype="<i4", count=2, offset=4)
    assert (w, h) == (6, 4)
    assert len(raw) == 12 + 8 * 4 * 6


def test_flo_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.flo"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(InvalidSpec):
        io.read_flo(path)


def test_flo_truncated_rejected(tmp_path):
    good = tmp_path / "good.flo"
    io.write_flo(good, random_flow(5, 5, seed=1))
    bad = tmp_path / "bad.flo"
    bad.write_bytes(good.read_bytes()[:-4])
    with pytest.raises(InvalidSpec):
        io.read_flo(bad)
    tiny = tmp_path / "tiny.flo"
    tiny.write_bytes(b"PIEH")
    with pytest.raises(InvalidSpec):
        io.read_flo(tiny)


def test_flo_huge_values_read_as_invalid(tmp_path):
    flow = FlowField(u=np.zeros((3, 3)), v=np.zeros((3, 3)),
                     valid=np.ones((3, 3), dtype=bool))
    path = tmp_path / "a.flo"
    io.write_flo(path, flow)
    raw = bytearray(path.read_bytes())
    # poison the u component of the first cell with an unknown-flow value
    raw[12:16] = np.array([5e9], dtype="<f4").tobytes()
    path.write_bytes(bytes(raw))
    back = io.read_flo(path)
    assert not back.valid[0, 0]
    assert back.valid.sum() == 8


# ------------------------------------------------------------------- PNGs

def test_frame_png_round_trip_quantization(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(14, 10, 3))
    path = tmp_path / "f.png"
    io.write_frame_png(path, img)
    back = io.read_frame_png(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_frame_png_exact_on_grid_values(tmp_path):
    img = (np.arange(256).reshape(16, 16)[..., None]
           * np.ones(3)) / 255.0
    path = tmp_path / "g.png"
    io.write_frame_png(path, img)
    assert np.array_equal(io.read_frame_png(path), img)


def test_frame_png_rejects_bad_shape(tmp_path):
    with pytest.raises(SizeMismatch):
        io.write_frame_png(tmp_path / "x.png", np.zeros((4, 4)))


def test_mask_png_round_trip_quantization(tmp_path):
    rng = np.random.default_rng(4)
    mask = rng.uniform(size=(9, 13))
    path = tmp_path / "m.png"
    io.write_mask_png(path, mask)
    back = io.read_mask_png(path)
    assert np.max(np.abs(back - mask)) <= 0.5 / 65535 + 1e-12


def test_mask_png_quantized_values_are_fixed_points(tmp_path):
    mask = np.linspace(0, 1, 64).reshape(8, 8)
    a = tmp_path / "a.png"
    b = tmp_path / "b.png"
    io.write_mask_png(a, mask)
    io.write_mask_png(b, io.read_mask_png(a))
    assert a.read_bytes() == b.read_bytes()


def test_mask_png_rejects_bad_shape(tmp_path):
    with pytest.raises(SizeMismatch):
        io.write_mask_png(tmp_path / "x.png", np.zeros((4, 4, 3)))


# ------------------------------------------------- segmentation + classes

def test_seg_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 5, size=(12, 18))
    path = tmp_path / "s.png"
    io.write_seg_png(path, labels)
    assert np.array_equal(io.read_seg_png(path), labels)


def test_seg_rejects_wide_labels(tmp_path):
    with pytest.raises(InvalidSpec):
        io.write_seg_png(tmp_path / "s.png", np.array([[0, 300]]))


def test_class_table_round_trip(tmp_path):
    path = tmp_path / "classes.json"
    io.write_class_table(path, ["sky", "car"], [True, False])
    names, stuff = io.read_class_table(path)
    assert names == ["sky", "car"]
    assert stuff == [True, False]


def test_class_table_validation(tmp_path):
    with pytest.raises(SizeMismatch):
        io.write_class_table(tmp_path / "c.json", ["a", "b"], [True])
    bad = tmp_path / "bad.json"
    bad.write_text('{"names": ["a"]}')
    with pytest.raises(InvalidSpec):
        io.read_class_table(bad)


def test_seg_from_files_builds_segmap(tmp_path):
    labels = np.array([[0, 0, 1], [1, 2, 2]])
    io.write_seg_png(tmp_path / "s.png", labels)
    io.write_class_table(tmp_path / "classes.json",
                         ["bg", "box", "puck"], [True, False, False])
    seg = io.seg_from_files(tmp_path / "s.png", tmp_path / "classes.json")
    assert isinstance(seg, SegMap)
    assert seg.names == ["bg", "box", "puck"]
    assert np.array_equal(np.argmax(seg.probs, axis=0), labels)
    assert np.array_equal(seg.stuff, [True, False, False])


def test_seg_from_files_rejects_label_overflow(tmp_path):
    io.write_seg_png(tmp_path / "s.png", np.array([[0, 3]]))
    io.write_class_table(tmp_path / "classes.json", ["a", "b"], [True, False])
    with pytest.raises(InvalidSpec):
        io.seg_from_files(tmp_path / "s.png", tmp_path / "classes.json")


# --------------------------------------------------------------- manifest

def test_manifest_same_stem_round_trip_byte_identical(tmp_path, manifest):
    r1 = tmp_path / "r1"
    r2 = tmp_path / "r2"
    r1.mkdir()
    r2.mkdir()
    io.save_manifest(manifest, r1 / "clip.json")
    loaded = io.load_manifest(r1 / "clip.json")
    io.save_manifest(loaded, r2 / "clip.json")
    files1 = sorted(p.name for p in r1.iterdir())
    files2 = sorted(p.name for p in r2.iterdir())
    assert files1 == files2
    for name in files1:
        assert (r1 / name).read_bytes() == (r2 / name).read_bytes(), name


def test_manifest_load_restores_fields(tmp_path, manifest):
    path = tmp_path / "clip.json"
    io.save_manifest(manifest, path)
    loaded = io.load_manifest(path)
    assert loaded.version == io.MANIFEST_VERSION
    assert (loaded.height, loaded.width) == (manifest.height, manifest.width)
    assert loaded.observed_count == manifest.observed_count
    assert loaded.predicted_count == 0
    assert loaded.num_layers == manifest.num_layers
    assert loaded.class_names == manifest.class_names
    assert loaded.hyperparameters == {"k_c": 0.1}
    for a, b in zip(loaded.trajectories, manifest.trajectories):
        for sa, sb in zip(a, b):
            # normalized trajectories survive JSON exactly (repr round trip)
            assert np.array_equal(sa.points, sb.points)
            assert sa.depth == sb.depth
    for a, b in zip(loaded.grids, manifest.grids):
        assert (a.rows, a.cols) == (b.rows, b.cols)
        assert np.array_equal(a.points, b.points)


def test_manifest_version_mismatch_rejected(tmp_path, manifest):
    path = tmp_path / "clip.json"
    io.save_manifest(manifest, path)
    obj = json.loads(path.read_text())
    obj["version"] = "lamoco/999"
    path.write_text(json.dumps(obj))
    with pytest.raises(InvalidSpec, match="version"):
        io.load_manifest(path)


def test_manifest_not_json_rejected(tmp_path):
    path = tmp_path / "clip.json"
    path.write_text("this is not json {")
    with pytest.raises(InvalidSpec, match="JSON"):
        io.load_manifest(path)


def test_manifest_missing_keys_rejected(tmp_path, manifest):
    path = tmp_path / "clip.json"
    io.save_manifest(manifest, path)
    obj = json.loads(path.read_text())
    del obj["grids"]
    path.write_text(json.dumps(obj))
    with pytest.raises(InvalidSpec, match="malformed"):
        io.load_manifest(path)


def test_manifest_missing_mask_file_rejected(tmp_path, manifest):
    path = tmp_path / "clip.json"
    io.save_manifest(manifest, path)
    (tmp_path / "clip.mask0.png").unlink()
    with pytest.raises(InvalidSpec, match="mask"):
        io.load_manifest(path)


def test_manifest_validates_trajectory_lengths(manifest):
    with pytest.raises(SizeMismatch):
        io.Manifest(
            height=manifest.height, width=manifest.width,
            observed_count=manifest.observed_count,
            predicted_count=1,  # no predicted states actually present
            grids=list(manifest.grids),
            trajectories=[list(s) for s in manifest.trajectories],
            intrinsic=list(manifest.intrinsic),
            classes=manifest.classes,
            class_names=list(manifest.class_names),
            loss_history=[])


def test_with_forecast_extends_and_round_trips(tmp_path, manifest):
    future = predict(manifest.trajectory_set(), "linear", 3)
    extended = manifest.with_forecast(future)
    assert extended.predicted_count == 3
    assert extended.observed_count == manifest.observed_count
    for states in extended.trajectories:
        assert len(states) == manifest.observed_count + 3
    path = tmp_path / "future.json"
    io.save_manifest(extended, path)
    loaded = io.load_manifest(path)
    assert loaded.predicted_count == 3
    traj = loaded.trajectory_set()
    assert traj.predicted_count == 3
    assert traj.observed_count == manifest.observed_count
    for a, b in zip(traj.states, future.states):
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.points, sb.points)


def test_decomposition_reconstruction_matches_original(truth, manifest,
                                                       tmp_path):
    original = scenegen.truth_decomposition(truth)
    path = tmp_path / "clip.json"
    io.save_manifest(manifest, path)
    rebuilt = io.load_manifest(path).decomposition()
    assert rebuilt.frame_count == original.frame_count
    assert rebuilt.stack.warped.shape == original.stack.warped.shape
    # canvases pass through 16-bit quantization, nothing else drifts
    assert np.max(np.abs(rebuilt.stack.warped
                         - original.stack.warped)) < 1e-4
    assert np.array_equal(rebuilt.stack.classes, original.stack.classes)


def test_decomposition_with_segs_applies_refinement(truth, manifest):
    segs = list(truth.segs[:manifest.observed_count])
    plain = manifest.decomposition()
    refined = manifest.decomposition(segs)
    assert refined.stack.warped.shape == plain.stack.warped.shape
    # background layer is untouched by semantic reweighting
    assert np.array_equal(refined.stack.warped[0], plain.stack.warped[0])
    with pytest.raises(SizeMismatch):
        manifest.decomposition(segs[:-1])


# ---------------------------------------------------------- manifest_flow

def test_manifest_flow_same_step_is_near_zero(manifest):
    flow = io.manifest_flow(manifest, 1, 1)
    assert np.max(np.abs(flow.u)) < 1e-9
    assert np.max(np.abs(flow.v)) < 1e-9


def test_manifest_flow_matches_truth_flows(truth, manifest):
    # truth.flows[k] is the backward flow of frame k+1 toward frame k
    for k in range(truth.frames.shape[0] - 1):
        flow = io.manifest_flow(manifest, k, k + 1)
        err = epe(flow, truth.flows[k])
        assert err < 0.05, (k, err)


def test_manifest_flow_range_checked(manifest):
    with pytest.raises(SizeMismatch):
        io.manifest_flow(manifest, 0, manifest.observed_count)
    with pytest.raises(SizeMismatch):
        io.manifest_flow(manifest, -1, 0)


@pytest.fixture(scope="module")
def warped_bg_manifest():
    """Background-only scene with a gentle spline deformation.

    No object layer, so resolution comparisons probe the flow itself and
    not where the ownership boundary lands on each pixel grid.
    """
    rng = np.random.default_rng(13)
    offsets = rng.normal(scale=0.015, size=(9, 2))
    spec = scenegen.SceneSpec.from_dict({
        "resolution": [48, 64], "frames": 4, "seed": 31,
        "background": {
            "texture_scale": 3.0,
            "motion": {"kind": "tps", "rows": 3, "cols": 3,
                       "offsets": offsets.tolist(),
                       "velocity": [0.02, 0.01]},
        },
        "objects": [],
    })
    truth = scenegen.generate(spec)
    return io.Manifest.from_decomposition(scenegen.truth_decomposition(truth))


def test_manifest_flow_double_resolution_agrees(warped_bg_manifest):
    from scipy.ndimage import (binary_erosion, distance_transform_edt,
                               map_coordinates)

    base = io.manifest_flow(warped_bg_manifest, 0, 2)
    h, w = 48, 64
    double = io.manifest_flow(warped_bg_manifest, 0, 2,
                              height=2 * h, width=2 * w)
    # fine centers sit a quarter pixel off the coarse ones, so upsample the
    # 1x flow to the fine positions (cubic, in normalized coordinates) and
    # compare in 1x pixel units; invalid cells hold zeros that would leak
    # through the global spline prefilter, so extend with the nearest valid
    # value first and keep a margin away from the boundary
    _, near = distance_transform_edt(~base.valid, return_indices=True)
    fu = base.u[near[0], near[1]]
    fv = base.v[near[0], near[1]]
    jj, ii = np.meshgrid(np.arange(2 * w), np.arange(2 * h))
    px = (jj + 0.5) / 2 - 0.5
    py = (ii + 0.5) / 2 - 0.5
    bu = map_coordinates(fu, [py, px], order=3, mode="nearest")
    bv = map_coordinates(fv, [py, px], order=3, mode="nearest")
    bvalid, inside = bilinear_sample(base.valid.astype(float), px, py)
    ok = binary_erosion(inside & double.valid & (bvalid > 0.999),
                        iterations=6)
    assert ok.mean() > 0.65
    px_equiv = np.hypot(double.u / 2 - bu, double.v / 2 - bv)
    assert np.max(px_equiv[ok]) < 1e-3, np.max(px_equiv[ok])


def test_manifest_flow_triple_resolution_coincident_centers(
        warped_bg_manifest):
    # at 3x every third fine center lands exactly on a coarse center, so no
    # interpolation is involved and the difference isolates the (tiny)
    # resolution dependence of the numerical warp inversion
    base = io.manifest_flow(warped_bg_manifest, 0, 2)
    triple = io.manifest_flow(warped_bg_manifest, 0, 2,
                              height=3 * 48, width=3 * 64)
    ok = base.valid & triple.valid[1::3, 1::3]
    assert ok.mean() > 0.9
    du = triple.u[1::3, 1::3] / 3 - base.u
    dv = triple.v[1::3, 1::3] / 3 - base.v
    assert np.max(np.hypot(du, dv)[ok]) < 1e-3


def test_manifest_flow_resolution_guard(manifest):
    with pytest.raises(SizeMismatch):
        io.manifest_flow(manifest, 0, 1, height=1, width=64)
