"""Closed-form extrapolation of control-point trajectories.

Predictions are parameterized as displacements added to the last observed
state, so every model agrees with the observed endpoint at step zero. The
constant, linear and quadratic predictors need one, two and three observed
steps respectively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientHistory, SizeMismatch
from .tps import ControlState

MODEL_ORDER = {"constant": 0, "linear": 1, "quadratic": 2}


@dataclass
class TrajectorySet:
    """Per-layer control states over time with an observed/predicted flag.

    ``states[i][t]`` is the ControlState of layer i at step t. ``observed``
    marks the contiguous prefix of steps that were measured rather than
    extrapolated.
    """

    states: list
    observed: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.states or not self.states[0]:
            raise SizeMismatch("a trajectory set needs at least one state")
        steps = len(self.states[0])
        for layer in self.states:
            if len(layer) != steps:
                raise SizeMismatch("all layers must cover the same steps")
            count = layer[0].points.shape
            for st in layer:
                if st.points.shape != count:
                    raise SizeMismatch("point count must stay constant in time")
        if self.observed is None:
            self.observed = np.ones(steps, dtype=bool)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.observed.shape != (steps,):
            raise SizeMismatch("need one observed flag per step")
        if not self.observed[0]:
            raise SizeMismatch("the first step must be observed")
        flips = np.nonzero(np.diff(self.observed.astype(int)))[0]
        if len(flips) > 1 or (len(flips) == 1 and self.observed[flips[0] + 1]):
            raise SizeMismatch("observed steps must form a contiguous prefix")

    @property
    def num_layers(self) -> int:
        return len(self.states)

    @property
    def total_steps(self) -> int:
        return len(self.states[0])

    @property
    def observed_count(self) -> int:
        return int(self.observed.sum())

    @property
    def predicted_count(self) -> int:
        return self.total_steps - self.observed_count

    @classmethod
    def from_decomposition(cls, decomp) -> "TrajectorySet":
        """All-observed trajectory set from a fitted decomposition."""
        return cls(states=[list(states) for states in decomp.trajectories])

    def observed_prefix(self) -> "TrajectorySet":
        t = self.observed_count
        return TrajectorySet(states=[layer[:t] for layer in self.states])


def _layer_matrix(layer, t):
    """(t, P, 2) array of the first t states of one layer."""
    return np.stack([np.asarray(layer[k].points, dtype=np.float64)
                     for k in range(t)])


def _displacements(pts, model, k_steps):
    """Per-step displacement relative to the last observed points.

    ``pts`` is (T, P, 2); the return value is (K, P, 2), entry k-1 holding
    the predicted offset of step T+k.
    """
    t = pts.shape[0]
    if len(k_steps) == 0 or model == "constant":
        return np.zeros((len(k_steps), *pts.shape[1:]))
    if model == "linear":
        step = pts[-1] - pts[-2]
        return np.stack([k * step for k in k_steps])
    # quadratic: per-coordinate degree-2 least squares over the window,
    # expressed relative to the fit value at the last observed step
    ts = np.arange(t, dtype=np.float64)
    design = np.stack([np.ones(t), ts, ts * ts], axis=1)
    flat = pts.reshape(t, -1)
    coef, *_ = np.linalg.lstsq(design, flat, rcond=None)

    def at(x):
        row = np.array([1.0, x, x * x])
        return (row @ coef).reshape(pts.shape[1:])

    last = at(t - 1.0)
    return np.stack([at(t - 1.0 + k) - last for k in k_steps])


def predict(traj: TrajectorySet, model: str, k: int) -> TrajectorySet:
    """Extend the observed prefix by ``k`` extrapolated steps.

    Each model produces displacements added to the last observed state;
    depth scores are carried forward unchanged. ``k = 0`` returns the
    observed prefix as is.
    """
    if model not in MODEL_ORDER:
        raise ValueError(f"unknown prediction model: {model!r}")
    if k < 0:
        raise SizeMismatch("prediction steps must be non-negative")
    t = traj.observed_count
    if t < MODEL_ORDER[model] + 1:
        raise InsufficientHistory(
            f"{model} prediction needs {MODEL_ORDER[model] + 1} observed "
            f"steps, got {t}")
    k_steps = np.arange(1, k + 1, dtype=np.float64)
    states = []
    for layer in traj.states:
        pts = _layer_matrix(layer, t)
        disp = _displacements(pts, model, k_steps)
        depth = layer[t - 1].depth
        new = list(layer[:t])
        for j in range(k):
            new.append(ControlState(points=pts[-1] + disp[j], depth=depth))
        states.append(new)
    observed = np.zeros(t + k, dtype=bool)
    observed[:t] = True
    return TrajectorySet(states=states, observed=observed)


def loss_points(pred: TrajectorySet, ref: TrajectorySet) -> float:
    """Mean L1 distance over the predicted steps of two trajectory sets."""
    if pred.num_layers != ref.num_layers:
        raise SizeMismatch("layer counts differ")
    if pred.total_steps != ref.total_steps:
        raise SizeMismatch("step counts differ")
    if pred.observed_count != ref.observed_count:
        raise SizeMismatch("observed prefixes differ in length")
    t = pred.observed_count
    diffs = []
    for la, lb in zip(pred.states, ref.states):
        for sa, sb in zip(la[t:], lb[t:]):
            if sa.points.shape != sb.points.shape:
                raise SizeMismatch("point counts differ")
            diffs.append(np.abs(sa.points - sb.points).ravel())
    if not diffs:
        return 0.0
    return float(np.concatenate(diffs).mean())


def jitter_samples(traj: TrajectorySet, model: str, k: int, sigma: float,
                   count: int, seed: int = 0) -> list:
    """Prediction ensemble with Gaussian noise on the predicted offsets.

    Noise is drawn per sample, per step, per point (std ``sigma`` in
    normalized units); ``sigma = 0`` yields identical copies. Deterministic
    for a fixed seed.
    """
    if sigma < 0:
        raise SizeMismatch("sigma must be non-negative")
    base = predict(traj, model, k)
    t = base.observed_count
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        states = []
        for layer in base.states:
            new = list(layer[:t])
            for st in layer[t:]:
                noise = rng.normal(0.0, sigma, size=st.points.shape)
                new.append(ControlState(points=st.points + noise,
                                        depth=st.depth))
            states.append(new)
        samples.append(TrajectorySet(states=states,
                                     observed=base.observed.copy()))
    return samples
