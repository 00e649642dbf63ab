"""Deterministic DDIM stepping over latent states.

Sampling walks a descending timestep grid from noise to a clean latent;
inversion walks the same grid upward from a clean latent to noise. Both
directions share one update rule parameterized by an injected
noise-prediction function, so inversion followed by sampling is an exact
round trip whenever the predicted noise does not depend on the latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

NoiseFn = Callable[[np.ndarray, int, Any], np.ndarray]


class GridError(ValueError):
    """Timesteps that are not adjacent on the schedule grid, or a malformed grid."""


class NumericError(ValueError):
    """Non-finite latents or noise predictions."""


class PredictorStepError(RuntimeError):
    """Noise predictor failed; carries the step index and timestep it failed at."""

    def __init__(self, step_index: int, timestep: int, cause: BaseException):
        self.step_index = step_index
        self.timestep = timestep
        super().__init__(f"noise predictor failed at step {step_index} (timestep {timestep}): {cause}")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Timestep grid with cumulative signal-retention coefficients.

    ``timesteps`` is the descending sampling grid of positive integers.
    ``alpha_bar`` maps every grid timestep, plus the terminal timestep 0,
    to its cumulative signal-retention coefficient in (0, 1]. Sampling and
    inversion traverse the same grid in opposite orders.
    """

    timesteps: tuple[int, ...]
    alpha_bar: Mapping[int, float]

    def __post_init__(self) -> None:
        if not self.timesteps:
            raise GridError("schedule needs at least one timestep")
        ts = list(self.timesteps)
        if ts != sorted(ts, reverse=True):
            raise GridError("timesteps must be strictly descending")
        if len(set(ts)) != len(ts) or min(ts) <= 0:
            raise GridError("timesteps must be distinct positive integers")
        full = [0] + sorted(ts)
        for t in full:
            if t not in self.alpha_bar:
                raise GridError(f"alpha_bar missing timestep {t}")
            a = self.alpha_bar[t]
            if not (0.0 < a <= 1.0) or not math.isfinite(a):
                raise GridError(f"alpha_bar[{t}]={a} outside (0, 1]")
        values = [self.alpha_bar[t] for t in full]
        # strictly decreasing as timestep increases
        if any(nxt >= cur for cur, nxt in zip(values, values[1:])):
            raise GridError("alpha_bar must be strictly decreasing in timestep")
        object.__setattr__(self, "timesteps", tuple(ts))

    @property
    def num_steps(self) -> int:
        return len(self.timesteps)

    @property
    def max_timestep(self) -> int:
        return self.timesteps[0]

    def grid_with_terminal(self) -> tuple[int, ...]:
        """Ascending grid including the terminal timestep 0."""
        return (0, *sorted(self.timesteps))

    def sampling_transitions(self) -> list[tuple[int, int]]:
        """(current, target) pairs walking the grid down to 0."""
        path = (*self.timesteps, 0)
        return list(zip(path, path[1:]))

    def inversion_transitions(self) -> list[tuple[int, int]]:
        """(current, target) pairs walking the grid up from 0."""
        return [(lo, hi) for hi, lo in reversed(self.sampling_transitions())]

    def adjacent(self, current: int, target: int) -> bool:
        path = self.grid_with_terminal()
        try:
            i, j = path.index(current), path.index(target)
        except ValueError:
            return False
        return abs(i - j) == 1


@dataclass(frozen=True)
class LatentState:
    """A latent tensor pinned to a diffusion timestep (0 = clean)."""

    latent: np.ndarray
    timestep: int

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.latent)):
            raise NumericError("latent contains non-finite entries")
        if self.timestep < 0:
            raise GridError(f"timestep {self.timestep} is negative")


def subsample_timesteps(num_train_timesteps: int, num_steps: int, offset: int = 1) -> tuple[int, ...]:
    """Even subsample of the training grid, descending, shifted off zero.

    With the default offset the final transition lands on the terminal
    timestep 0, whose retention coefficient is pinned to 1.
    """
    if num_steps < 1 or num_steps > num_train_timesteps:
        raise GridError(f"num_steps={num_steps} not in [1, {num_train_timesteps}]")
    ratio = num_train_timesteps // num_steps
    grid = [i * ratio + offset for i in range(num_steps)]
    if grid[-1] >= num_train_timesteps:
        raise GridError("subsampled grid exceeds the training grid")
    return tuple(reversed(grid))


def schedule_from_training(
    alphas_cumprod: Sequence[float], num_steps: int, offset: int = 1
) -> DiffusionSchedule:
    """Build a sampling schedule by subsampling a training retention curve.

    ``alphas_cumprod[t]`` is the cumulative retention after training step t;
    the terminal coefficient at timestep 0 is fixed to 1.0.
    """
    grid = subsample_timesteps(len(alphas_cumprod), num_steps, offset)
    alpha_bar = {t: float(alphas_cumprod[t]) for t in grid}
    alpha_bar[0] = 1.0
    return DiffusionSchedule(timesteps=grid, alpha_bar=alpha_bar)


def synthetic_schedule(
    num_steps: int, alpha_min: float = 0.01, alpha_max: float = 0.999, spacing: int = 10
) -> DiffusionSchedule:
    """Monotone toy schedule for tests; no pretrained configuration needed."""
    grid = tuple(spacing * (i + 1) for i in reversed(range(num_steps)))
    # cosine-shaped decay from alpha_max down to alpha_min over the grid
    alpha_bar: dict[int, float] = {0: 1.0}
    for i, t in enumerate(sorted(grid)):
        frac = (i + 1) / num_steps
        a = alpha_min + (alpha_max - alpha_min) * math.cos(frac * math.pi / 2) ** 2
        alpha_bar[t] = a
    return DiffusionSchedule(timesteps=grid, alpha_bar=alpha_bar)


def _check_epsilon(epsilon: np.ndarray, latent: np.ndarray) -> None:
    if epsilon.shape != latent.shape:
        raise NumericError(f"epsilon shape {epsilon.shape} != latent shape {latent.shape}")
    if not np.all(np.isfinite(epsilon)):
        raise NumericError("epsilon contains non-finite entries")


def _ddim_update(latent: np.ndarray, epsilon: np.ndarray, a_cur: float, a_tgt: float) -> np.ndarray:
    x0 = (latent - math.sqrt(1.0 - a_cur) * epsilon) / math.sqrt(a_cur)
    return math.sqrt(a_tgt) * x0 + math.sqrt(1.0 - a_tgt) * epsilon


def ddim_step(
    state: LatentState, epsilon: np.ndarray, schedule: DiffusionSchedule, target_timestep: int
) -> LatentState:
    """One deterministic denoising step to the adjacent lower grid timestep."""
    if target_timestep >= state.timestep or not schedule.adjacent(state.timestep, target_timestep):
        raise GridError(
            f"step {state.timestep} -> {target_timestep} is not a downward move "
            "between adjacent grid timesteps"
        )
    _check_epsilon(epsilon, state.latent)
    new = _ddim_update(
        state.latent, epsilon, schedule.alpha_bar[state.timestep], schedule.alpha_bar[target_timestep]
    )
    return LatentState(latent=new, timestep=target_timestep)


def ddim_inverse_step(
    state: LatentState, epsilon: np.ndarray, schedule: DiffusionSchedule, target_timestep: int
) -> LatentState:
    """One noising step to the adjacent higher grid timestep.

    Exact algebraic inverse of :func:`ddim_step` when the same epsilon is
    used for both directions.
    """
    if target_timestep <= state.timestep or not schedule.adjacent(state.timestep, target_timestep):
        raise GridError(
            f"inverse step {state.timestep} -> {target_timestep} is not an upward move "
            "between adjacent grid timesteps"
        )
    _check_epsilon(epsilon, state.latent)
    new = _ddim_update(
        state.latent, epsilon, schedule.alpha_bar[state.timestep], schedule.alpha_bar[target_timestep]
    )
    return LatentState(latent=new, timestep=target_timestep)


def run_sampling(
    initial: LatentState, conditioning: Any, predictor: NoiseFn, schedule: DiffusionSchedule
) -> LatentState:
    """Fold ddim_step down the full grid; noise is predicted at the current timestep."""
    if initial.timestep != schedule.max_timestep:
        raise GridError(
            f"sampling must start at the max grid timestep {schedule.max_timestep}, "
            f"got {initial.timestep}"
        )
    state = initial
    for i, (current, target) in enumerate(schedule.sampling_transitions()):
        try:
            eps = predictor(state.latent, current, conditioning)
        except Exception as exc:
            raise PredictorStepError(i, current, exc) from exc
        state = ddim_step(state, np.asarray(eps), schedule, target)
    return state


def run_inversion(
    clean: LatentState, conditioning: Any, predictor: NoiseFn, schedule: DiffusionSchedule
) -> LatentState:
    """Fold ddim_inverse_step up the full grid; noise is predicted at the target timestep.

    Querying the predictor at the target grid timestep mirrors sampling,
    which queries the same timestep for the matching downward transition;
    the two runs therefore see identical timesteps edge for edge.
    """
    if clean.timestep != 0:
        raise GridError(f"inversion must start at timestep 0, got {clean.timestep}")
    state = clean
    for i, (current, target) in enumerate(schedule.inversion_transitions()):
        try:
            eps = predictor(state.latent, target, conditioning)
        except Exception as exc:
            raise PredictorStepError(i, target, exc) from exc
        state = ddim_inverse_step(state, np.asarray(eps), schedule, target)
    return state
