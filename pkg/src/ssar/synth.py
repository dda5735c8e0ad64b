"""Synthetic multi-day motor-cortex recordings with controllable drift.

Neurons are cosine tuned to reach direction with a speed-dependent gain::

    rate_n(t) = max(0, b_n + m_n * s_ref * (s(t) / s_ref) ** g_n * cos(theta(t) - pd_n))

so at ``g_n = 1`` the modulation depth ``m_n`` is in Hz per cm/s. Day ``k``
applies the drift schedule ``k`` times: preferred directions rotate by
``k * rotation``, exponents scale by ``exp(k * speed_gain_scale * eps_n)``,
baselines scale by ``exp(k * baseline_shift_scale * eta_n)``, and a channel
stays alive only if it survives ``k`` independent dropout draws.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import RawSession, preprocess
from .numerics import make_rng

BIN_WIDTH = 0.05
N_DIRECTIONS = 8
# firing saturates here; also keeps compounded speed exponents from overflowing
MAX_RATE = 200.0
EXPONENT_BOUNDS = (0.2, 3.0)


@dataclass(frozen=True)
class TuningModel:
    baseline: np.ndarray
    depth: np.ndarray
    preferred_direction: np.ndarray
    speed_exponent: np.ndarray
    speed_ref: float = 1.0

    def __post_init__(self):
        if np.any(self.baseline < 0):
            raise ValueError("baseline rates must be non-negative")
        n = len(self.baseline)
        for name in ("depth", "preferred_direction", "speed_exponent"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from baseline")

    @property
    def n_channels(self) -> int:
        return len(self.baseline)

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def random_tuning(
    n_channels: int = 96,
    seed=0,
    baseline_range=(1.0, 5.0),
    depth_range=(0.05, 0.2),
    exponent_range=(0.7, 1.5),
    speed_ref: float = 1.0,
) -> TuningModel:
    rng = make_rng(seed)
    return TuningModel(
        baseline=rng.uniform(*baseline_range, n_channels),
        depth=rng.uniform(*depth_range, n_channels),
        preferred_direction=rng.uniform(-np.pi, np.pi, n_channels),
        speed_exponent=rng.uniform(*exponent_range, n_channels),
        speed_ref=speed_ref,
    )


@dataclass(frozen=True)
class DriftSchedule:
    rotation: float = 0.0
    speed_gain_scale: float = 0.0
    dropout: float = 0.0
    baseline_shift_scale: float = 0.0
    # per-neuron random preferred-direction walk (radians per day, sd)
    direction_jitter: float = 0.0
    # probability per day that a channel starts recording a different neuron
    turnover: float = 0.0
    # fixes the per-neuron perturbation directions, shared by every day
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout probability must lie in [0, 1]")
        if not 0.0 <= self.turnover <= 1.0:
            raise ValueError("turnover probability must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_DRIFT = DriftSchedule(speed_gain_scale=0.8, dropout=0.1, baseline_shift_scale=0.3, turnover=0.5)


def drifted_tuning(tuning: TuningModel, drift: DriftSchedule, day_index: int):
    """Tuning parameters on ``day_index`` and the boolean mask of live channels."""
    if day_index < 0:
        raise ValueError("day_index must be >= 0")
    n = tuning.n_channels
    k = day_index
    # independent streams per knob so enabling one never reshuffles another
    eps = make_rng([drift.seed, 1]).standard_normal(n)
    eta = make_rng([drift.seed, 2]).standard_normal(n)
    walk = make_rng([drift.seed, 3]).standard_normal((max(k, 1), n))[:k].sum(axis=0)
    alive = np.ones(n, dtype=bool)
    if k > 0 and drift.dropout > 0:
        alive = np.all(make_rng([drift.seed, 4]).random((k, n)) >= drift.dropout, axis=0)
    pd = tuning.preferred_direction + k * drift.rotation + drift.direction_jitter * walk
    g = np.clip(tuning.speed_exponent * np.exp(k * drift.speed_gain_scale * eps), *EXPONENT_BOUNDS)
    b = tuning.baseline * np.exp(k * drift.baseline_shift_scale * eta)
    depth = tuning.depth.copy()
    if k > 0 and drift.turnover > 0:
        rng = make_rng([drift.seed, 5])
        swapped = np.any(rng.random((k, n)) < drift.turnover, axis=0)
        fresh_pd = rng.uniform(-np.pi, np.pi, n)
        fresh_g = rng.permutation(tuning.speed_exponent)
        pd = np.where(swapped, fresh_pd, pd)
        g = np.where(swapped, fresh_g, g)
    day = TuningModel(b, depth, pd, g, tuning.speed_ref)
    return day, alive


def firing_rates(tuning: TuningModel, velocity: np.ndarray, alive=None) -> np.ndarray:
    v = np.asarray(velocity, dtype=np.float64)
    speed = np.linalg.norm(v, axis=1)
    theta = np.arctan2(v[:, 1], v[:, 0])
    gain = tuning.speed_ref * (speed[:, None] / tuning.speed_ref) ** tuning.speed_exponent[None, :]
    rates = tuning.baseline[None, :] + tuning.depth[None, :] * gain * np.cos(
        theta[:, None] - tuning.preferred_direction[None, :]
    )
    rates = np.clip(rates, 0.0, MAX_RATE)
    if alive is not None:
        rates[:, ~alive] = 0.0
    return rates


def gen_day(
    tuning: TuningModel,
    drift: DriftSchedule,
    day_index: int,
    velocity: np.ndarray,
    seed,
    bin_width: float = BIN_WIDTH,
) -> RawSession:
    day, alive = drifted_tuning(tuning, drift, day_index)
    if not alive.any():
        raise ValueError(f"all channels dropped on day {day_index}")
    rates = firing_rates(day, velocity, alive)
    counts = make_rng(seed).poisson(rates * bin_width).astype(np.float64)
    return RawSession(f"day{day_index}", bin_width, counts, np.asarray(velocity, dtype=np.float64))


def min_jerk_velocity(distance: float, duration: float, n_bins: int) -> np.ndarray:
    """Speed profile of a minimum-jerk reach sampled at bin centers."""
    tau = (np.arange(n_bins) + 0.5) / n_bins
    return distance / duration * 30.0 * tau**2 * (1.0 - tau) ** 2


def gen_trajectories(
    n_trials: int,
    task: str = "center_out",
    seed=0,
    bin_width: float = BIN_WIDTH,
    distance_range=(4.0, 12.0),
    duration_range=(0.5, 1.2),
    return_trials: bool = False,
):
    """Concatenated 2-D velocity (cm/s) of ``n_trials`` reaches.

    Center-out trials cycle through shuffled blocks of the 8 directions;
    random-target trials draw directions uniformly.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if task not in ("center_out", "random_target"):
        raise ValueError(f"unknown task {task!r}")
    rng = make_rng(seed)
    pieces, trial_ids = [], []
    order = []
    for i in range(n_trials):
        if task == "center_out":
            if not order:
                order = list(rng.permutation(N_DIRECTIONS))
            angle = order.pop() * 2.0 * np.pi / N_DIRECTIONS
        else:
            angle = rng.uniform(-np.pi, np.pi)
        dist = rng.uniform(*distance_range)
        dur = rng.uniform(*duration_range)
        n_bins = max(int(round(dur / bin_width)), 4)
        speed = min_jerk_velocity(dist, n_bins * bin_width, n_bins)
        pieces.append(np.column_stack([speed * np.cos(angle), speed * np.sin(angle)]))
        trial_ids.append(np.full(n_bins, i))
    vel = np.vstack(pieces)
    if return_trials:
        return vel, np.concatenate(trial_ids)
    return vel


def trajectories_for_bins(n_bins: int, task: str = "center_out", seed=0, **kw) -> np.ndarray:
    """Enough trials to fill ``n_bins`` rows, truncated to exactly that length."""
    vel = gen_trajectories(max(1, n_bins // 10), task, seed, **kw)
    extra = 0
    while len(vel) < n_bins:
        extra += 1
        vel = np.vstack([vel, gen_trajectories(max(1, n_bins // 10), task, [*np.atleast_1d(seed), extra], **kw)])
    return vel[:n_bins]


@dataclass(frozen=True)
class Scenario:
    """Everything needed to regenerate a multi-day synthetic experiment.

    Each experiment seed draws its own tuning, drift realization and
    trajectories; ``drift.seed`` is replaced by the experiment seed.
    """

    n_channels: int = 96
    source_bins: int = 2000
    target_bins: int = 400
    task: str = "center_out"
    bin_width: float = BIN_WIDTH
    smoothing_sd: float = 0.1
    baseline_range: tuple = (1.0, 5.0)
    depth_range: tuple = (0.05, 0.2)
    exponent_range: tuple = (0.7, 1.5)
    speed_ref: float = 1.0
    drift: DriftSchedule = DEFAULT_DRIFT

    def __post_init__(self):
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if self.source_bins < 2 or self.target_bins < 2:
            raise ValueError("sessions need at least 2 bins")
        if self.task not in ("center_out", "random_target"):
            raise ValueError(f"unknown task {self.task!r}")

    def tuning(self, seed: int) -> TuningModel:
        return random_tuning(
            self.n_channels, [seed, 1], self.baseline_range, self.depth_range,
            self.exponent_range, self.speed_ref,
        )

    def drift_for(self, seed: int) -> DriftSchedule:
        return DriftSchedule(**{**self.drift.to_dict(), "seed": int(seed)})

    def raw_day(self, seed: int, day_index: int) -> RawSession:
        n = self.source_bins if day_index == 0 else self.target_bins
        vel = trajectories_for_bins(n, self.task, [seed, 2, day_index], bin_width=self.bin_width)
        return gen_day(self.tuning(seed), self.drift_for(seed), day_index, vel, [seed, 3, day_index], self.bin_width)

    def day(self, seed: int, day_index: int):
        return preprocess(self.raw_day(seed, day_index), self.smoothing_sd)

    def pair(self, seed: int, day_index: int):
        """Preprocessed (source day 0, target day ``day_index``) sessions."""
        return self.day(seed, 0), self.day(seed, day_index)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drift"] = self.drift.to_dict()
        d["baseline_range"] = list(self.baseline_range)
        d["depth_range"] = list(self.depth_range)
        d["exponent_range"] = list(self.exponent_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        if "drift" in d:
            d["drift"] = DriftSchedule(**d["drift"])
        for key in ("baseline_range", "depth_range", "exponent_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)
