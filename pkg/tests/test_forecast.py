"""Trajectory extrapolation models, the point loss, and jittered ensembles."""

from types import SimpleNamespace

import numpy as np
import pytest

from lamoco.errors import InsufficientHistory, SizeMismatch
from lamoco.forecast import (
    TrajectorySet,
    jitter_samples,
    loss_points,
    predict,
)
from lamoco.tps import ControlState

MODELS = ("constant", "linear", "quadratic")


def make_traj(point_rows, depth=0.0):
    """Single-layer trajectory from a list of (P, 2) arrays."""
    states = [[ControlState(points=np.asarray(p, dtype=np.float64), depth=depth)
               for p in point_rows]]
    return TrajectorySet(states=states)


def base_points(seed=0, count=5):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.8, 0.8, size=(count, 2))


# --------------------------------------------------------------- predict

@pytest.mark.parametrize("model", MODELS)
def test_constant_points_all_models(model):
    p = base_points()
    traj = make_traj([p, p, p, p])
    out = predict(traj, model, 3)
    assert out.total_steps == 7
    assert out.predicted_count == 3
    for st in out.states[0][4:]:
        assert np.allclose(st.points, p, atol=1e-12)


def test_linear_motion_exact():
    p0 = base_points(1)
    v = np.array([0.03, -0.02])
    traj = make_traj([p0 + t * v for t in range(4)])
    out = predict(traj, "linear", 3)
    for k in range(1, 4):
        expect = p0 + (3 + k) * v
        assert np.allclose(out.states[0][3 + k].points, expect, atol=1e-9)


def test_quadratic_motion_exact():
    p0 = base_points(2)
    a = np.array([0.004, -0.003])
    traj = make_traj([p0 + (t * t) * a for t in range(5)])
    out = predict(traj, "quadratic", 3)
    for k in range(1, 4):
        t = 4 + k
        assert np.allclose(out.states[0][t].points, p0 + (t * t) * a,
                           atol=1e-9)


def test_linear_residual_on_quadratic_truth():
    # truth p_t = p0 + t^2 a; the linear model extrapolates the last step,
    # leaving a residual of exactly a * k * (k + 1) at horizon k
    p0 = base_points(3)
    a = np.array([0.002, 0.005])
    steps = 6
    traj = make_traj([p0 + (t * t) * a for t in range(steps)])
    out = predict(traj, "linear", 4)
    for k in range(1, 5):
        t = steps - 1 + k
        truth = p0 + (t * t) * a
        err = truth - out.states[0][steps - 1 + k].points
        assert np.allclose(err, a * k * (k + 1), atol=1e-9)


@pytest.mark.parametrize("model", MODELS)
def test_zero_steps_returns_prefix(model):
    traj = make_traj([base_points(4) + 0.01 * t for t in range(4)])
    out = predict(traj, model, 0)
    assert out.total_steps == 4
    assert out.predicted_count == 0
    assert np.array_equal(out.states[0][-1].points, traj.states[0][-1].points)


@pytest.mark.parametrize("model", ("constant", "linear"))
def test_history_beyond_model_order_ignored(model):
    # constant and linear look at the trailing states only, so junk early
    # history cannot change the prediction
    v = np.array([0.02, 0.01])
    p0 = base_points(5)
    tail = [p0 + t * v for t in range(3)]
    rng = np.random.default_rng(9)
    junk = [rng.uniform(-1, 1, p0.shape) for _ in range(3)]
    a = predict(make_traj(tail), model, 2)
    b = predict(make_traj(junk + tail), model, 2)
    for k in range(1, 3):
        assert np.allclose(a.states[0][2 + k].points,
                           b.states[0][5 + k].points, atol=1e-12)


@pytest.mark.parametrize("model", MODELS)
def test_spatial_equivariance(model):
    rows = [base_points(6) + 0.02 * t + 0.001 * t * t for t in range(5)]
    shift = np.array([0.13, -0.27])
    a = predict(make_traj(rows), model, 3)
    b = predict(make_traj([r + shift for r in rows]), model, 3)
    for sa, sb in zip(a.states[0], b.states[0]):
        assert np.allclose(sb.points, sa.points + shift, atol=1e-9)


def test_insufficient_history():
    one = make_traj([base_points()])
    two = make_traj([base_points(), base_points() + 0.1])
    with pytest.raises(InsufficientHistory):
        predict(one, "linear", 2)
    with pytest.raises(InsufficientHistory):
        predict(two, "quadratic", 2)
    # constant needs just one step
    assert predict(one, "constant", 2).total_steps == 3


def test_unknown_model_rejected():
    with pytest.raises(ValueError):
        predict(make_traj([base_points()]), "cubic", 1)


def test_depth_carried_forward():
    p = base_points(7)
    states = [[ControlState(points=p, depth=float(t)) for t in range(4)]]
    out = predict(TrajectorySet(states=states), "linear", 2)
    for st in out.states[0][4:]:
        assert st.depth == 3.0


def test_predict_uses_observed_prefix_only():
    rows = [base_points(8) + 0.01 * t for t in range(5)]
    observed = np.array([True, True, True, False, False])
    states = [[ControlState(points=r, depth=0.0) for r in rows]]
    traj = TrajectorySet(states=states, observed=observed)
    out = predict(traj, "linear", 1)
    # the new prediction extends step 2, not the stale predicted steps
    expect = rows[2] + (rows[2] - rows[1])
    assert np.allclose(out.states[0][3].points, expect, atol=1e-12)
    assert out.total_steps == 4


# ----------------------------------------------------------- TrajectorySet

def test_observed_flags_must_be_prefix():
    rows = [base_points() for _ in range(3)]
    states = [[ControlState(points=r, depth=0.0) for r in rows]]
    with pytest.raises(SizeMismatch):
        TrajectorySet(states=states, observed=np.array([True, False, True]))
    with pytest.raises(SizeMismatch):
        TrajectorySet(states=states, observed=np.array([False, True, True]))


def test_ragged_layers_rejected():
    r = base_points()
    good = [ControlState(points=r, depth=0.0)] * 3
    short = [ControlState(points=r, depth=0.0)] * 2
    with pytest.raises(SizeMismatch):
        TrajectorySet(states=[good, short])


def test_from_decomposition_marks_all_observed():
    r = base_points()
    decomp = SimpleNamespace(trajectories=[
        [ControlState(points=r, depth=0.0) for _ in range(3)],
        [ControlState(points=r * 0.5, depth=7.0) for _ in range(3)],
    ])
    traj = TrajectorySet.from_decomposition(decomp)
    assert traj.num_layers == 2
    assert traj.observed.all()
    assert traj.observed_count == 3


# ------------------------------------------------------------ loss_points

def predicted_pair(seed_a, seed_b):
    traj = make_traj([base_points(10) + 0.01 * t for t in range(4)])
    a = predict(traj, "linear", 3)
    b = predict(traj, "linear", 3)
    rng_a = np.random.default_rng(seed_a)
    rng_b = np.random.default_rng(seed_b)
    for st in a.states[0][4:]:
        st.points = st.points + rng_a.normal(0, 0.05, st.points.shape)
    for st in b.states[0][4:]:
        st.points = st.points + rng_b.normal(0, 0.05, st.points.shape)
    return a, b


def test_loss_points_zero_iff_equal():
    a, _ = predicted_pair(0, 1)
    assert loss_points(a, a) == 0.0
    a, b = predicted_pair(0, 1)
    assert loss_points(a, b) > 0.0


def test_loss_points_uniform_x_offset():
    traj = make_traj([base_points(11) for _ in range(3)])
    a = predict(traj, "constant", 2)
    b = predict(traj, "constant", 2)
    for st in b.states[0][3:]:
        st.points = st.points + np.array([0.01, 0.0])
    assert loss_points(a, b) == pytest.approx(0.005, abs=1e-12)


def test_loss_points_matches_double_loop():
    a, b = predicted_pair(3, 4)
    t = a.observed_count
    acc, cnt = 0.0, 0
    for la, lb in zip(a.states, b.states):
        for sa, sb in zip(la[t:], lb[t:]):
            for pa, pb in zip(sa.points, sb.points):
                for ca, cb in zip(pa, pb):
                    acc += abs(ca - cb)
                    cnt += 1
    assert loss_points(a, b) == pytest.approx(acc / cnt, abs=1e-12)


def test_loss_points_metric_axioms():
    rng_seeds = [(5, 6), (7, 8), (9, 10)]
    for sa, sb in rng_seeds:
        a, b = predicted_pair(sa, sb)
        assert loss_points(a, b) == pytest.approx(loss_points(b, a), abs=1e-12)
    a, b = predicted_pair(11, 12)
    _, c = predicted_pair(11, 13)
    assert loss_points(a, c) <= loss_points(a, b) + loss_points(b, c) + 1e-12


def test_loss_points_shape_mismatch():
    a, _ = predicted_pair(0, 1)
    short = predict(make_traj([base_points(10) + 0.01 * t for t in range(4)]),
                    "linear", 2)
    with pytest.raises(SizeMismatch):
        loss_points(a, short)


# --------------------------------------------------------- jitter_samples

def test_jitter_sigma_zero_identical():
    traj = make_traj([base_points(14) + 0.02 * t for t in range(4)])
    base = predict(traj, "linear", 2)
    samples = jitter_samples(traj, "linear", 2, sigma=0.0, count=4, seed=0)
    assert len(samples) == 4
    for s in samples:
        for st_s, st_b in zip(s.states[0], base.states[0]):
            assert np.array_equal(st_s.points, st_b.points)


def test_jitter_seed_deterministic():
    traj = make_traj([base_points(15) + 0.02 * t for t in range(4)])
    a = jitter_samples(traj, "linear", 2, sigma=0.02, count=3, seed=42)
    b = jitter_samples(traj, "linear", 2, sigma=0.02, count=3, seed=42)
    c = jitter_samples(traj, "linear", 2, sigma=0.02, count=3, seed=43)
    for sa, sb in zip(a, b):
        for st_a, st_b in zip(sa.states[0], sb.states[0]):
            assert np.array_equal(st_a.points, st_b.points)
    assert any(
        not np.array_equal(st_a.points, st_c.points)
        for sa, sc in zip(a, c)
        for st_a, st_c in zip(sa.states[0], sc.states[0]))


def test_jitter_preserves_observed_prefix():
    traj = make_traj([base_points(16) + 0.02 * t for t in range(4)])
    samples = jitter_samples(traj, "linear", 2, sigma=0.05, count=2, seed=1)
    for s in samples:
        for st_s, st_o in zip(s.states[0][:4], traj.states[0]):
            assert np.array_equal(st_s.points, st_o.points)


def test_jitter_empirical_std():
    traj = make_traj([base_points(17) + 0.02 * t for t in range(4)])
    sigma = 0.01
    samples = jitter_samples(traj, "linear", 2, sigma=sigma, count=1000, seed=4)
    base = predict(traj, "linear", 2)
    # deviations pooled per predicted coordinate across the ensemble
    devs = np.stack([
        np.stack([s.states[0][4 + j].points - base.states[0][4 + j].points
                  for j in range(2)])
        for s in samples
    ])
    per_coord = devs.std(axis=0)
    assert np.all(np.abs(per_coord - sigma) < 0.05 * sigma)
    assert abs(devs.std() - sigma) < 0.02 * sigma
