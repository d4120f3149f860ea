"""Training-time kernel that mixes the model's transition with the target.

Per cell, occupancy probability and latent mean are convex combinations of
the model's prediction and the target: the occupancy indicator is 1 on the
nearest-target projection of the current neighborhood, and the latent side
pulls toward the target's code (zero for cells the target does not occupy).
The mixing rate grows linearly per step and saturates at 1, after which the
chain is a deterministic recursion on occupancy that provably reaches the
target; `verify_convergence` executes that argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ChainDiedError, DomainMismatchError, EmptyStateError
from .grid import (
    NeighborhoodSpec,
    SparseState,
    nearest_target_cells,
    neighborhood,
    pack_coords,
)
from .kernel import (
    RngStreams,
    SigmaSchedule,
    TransitionModel,
    TransitionOutput,
    _sample_cells,
)


@dataclass(frozen=True)
class AlphaSchedule:
    """Linear infusion rate alpha(t) = min(a0 + a1 * t, 1)."""

    a0: float = 0.1
    a1: float = 0.005

    def __post_init__(self):
        if self.a1 <= 0:
            raise ValueError("a1 must be positive")
        if not 0.0 <= self.a0 <= 1.0:
            raise ValueError("a0 must lie in [0, 1]")

    def alpha(self, t: int) -> float:
        return min(self.a0 + self.a1 * t, 1.0)

    @property
    def saturation_step(self) -> int:
        """First t with alpha(t) == 1."""
        if self.a0 >= 1.0:
            return 0
        return math.ceil((1.0 - self.a0) / self.a1)


@dataclass
class InfusionOutput:
    """Mixed per-cell parameters; lam is the exact mixture, never clamped."""

    coords: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    step: int
    alpha: float

    def __len__(self):
        return len(self.coords)


def infusion_params(
    out: TransitionOutput,
    state: SparseState,
    target: SparseState,
    alpha: float,
    spec: NeighborhoodSpec,
) -> InfusionOutput:
    """Mixture parameters over the neighborhood of `state`.

    lam_q = (1 - alpha) * lam + alpha * [cell in nearest-target projection]
    mu_q  = (1 - alpha) * mu  + alpha * target code (zero when unoccupied)
    """
    if target.is_empty:
        raise EmptyStateError("target has no occupied cells")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    hood = neighborhood(state, spec)
    if len(hood) != len(out.coords) or not np.array_equal(hood, out.coords):
        raise DomainMismatchError("output domain is not the neighborhood of the state")
    projected = nearest_target_cells(state, target, spec)
    proj_keys = pack_coords(projected)
    want = pack_coords(out.coords)
    pos = np.minimum(np.searchsorted(proj_keys, want), len(proj_keys) - 1)
    indicator = (proj_keys[pos] == want).astype(np.float64)
    target_codes, _ = target.lookup(out.coords)
    lam_q = (1.0 - alpha) * out.lam + alpha * indicator
    mu_q = (1.0 - alpha) * out.mu + alpha * target_codes
    return InfusionOutput(
        coords=out.coords, lam=lam_q, mu=mu_q, step=out.source_step, alpha=alpha
    )


def sample_infusion(
    inf: InfusionOutput,
    sigma: float,
    streams: RngStreams,
    resolution: int | None = None,
    voxel_size: float = 1.0,
) -> SparseState:
    """Same sampler as the transition, driven by the mixed parameters."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return _sample_cells(inf.coords, inf.lam, inf.mu, sigma, streams, resolution, voxel_size)


@dataclass
class SequenceStep:
    state: SparseState
    out: TransitionOutput
    inf: InfusionOutput


def emulate_sequence(
    model: TransitionModel,
    s0: SparseState,
    target: SparseState,
    t_steps: int,
    alpha_sched: AlphaSchedule,
    sigma_sched: SigmaSchedule,
    spec: NeighborhoodSpec,
    streams: RngStreams,
    cond: SparseState | None = None,
    with_tape: bool = False,
) -> tuple[list[SequenceStep], SparseState]:
    """Sample s^{t+1} from the infusion kernel for t = 0..T-1.

    Returns the per-step (state, prediction, mixture) triples and the final
    state; predictions are kept so losses can be computed afterwards.
    """
    if t_steps < 1:
        raise ValueError("need at least one step")
    if s0.is_empty:
        raise EmptyStateError("initial state has no occupied cells")
    state = s0
    steps: list[SequenceStep] = []
    for t in range(t_steps):
        out = model.predict(state, spec, cond=cond, step=t, with_tape=with_tape)
        inf = infusion_params(out, state, target, alpha_sched.alpha(t), spec)
        nxt = sample_infusion(
            inf, sigma_sched.sigma(t), streams, state.resolution, state.voxel_size
        )
        steps.append(SequenceStep(state=state, out=out, inf=inf))
        if nxt.is_empty:
            raise ChainDiedError(t + 1, last_state=state)
        state = nxt
    return steps, state


def verify_convergence(
    s0: SparseState,
    target: SparseState,
    spec: NeighborhoodSpec,
    alpha_sched: AlphaSchedule,
    max_t: int | None = None,
) -> tuple[bool, int]:
    """Check that the saturated recursion reaches the target occupancy.

    From the saturation step onward the chain is deterministic on
    occupancy: the next state is exactly the nearest-target projection of
    the current neighborhood.  Returns (converged, first step with equal
    occupancy); on failure (False, max_t).
    """
    if s0.is_empty or target.is_empty:
        raise EmptyStateError("both states must be non-empty")
    t_sat = alpha_sched.saturation_step
    if max_t is None:
        max_t = t_sat + default_convergence_bound(s0, target, spec)
    state = s0
    t = t_sat
    while t <= max_t:
        if state.occupancy_equal(target):
            return True, t
        projected = nearest_target_cells(state, target, spec)
        state = SparseState.from_arrays(
            projected,
            np.zeros((len(projected), s0.latent_dim)),
            s0.resolution,
            s0.voxel_size,
        )
        t += 1
    return False, max_t


def default_convergence_bound(
    s0: SparseState, target: SparseState, spec: NeighborhoodSpec
) -> int:
    """Generous step bound: 4x the grid diagonal over the growth radius."""
    if s0.resolution is not None:
        span = 3 * (s0.resolution - 1)
    else:
        lo = np.minimum(s0.coords.min(axis=0), target.coords.min(axis=0))
        hi = np.maximum(s0.coords.max(axis=0), target.coords.max(axis=0))
        span = int((hi - lo).sum())
    return math.ceil(4 * span / spec.radius) + 1
