"""Stochastic transition kernel over sparse voxel embeddings.

One transition predicts, for every cell in the neighborhood of the current
state, an occupancy probability and a latent mean, then samples occupancy
per cell (Bernoulli) and, for occupied cells, a latent code (isotropic
Gaussian around the mean with a scheduled standard deviation).  Mode
seeking replaces the sampling by a deterministic rule: keep cells above
probability 0.5 with the mean as the code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ChainDiedError, EmptyStateError
from .grid import NeighborhoodSpec, SparseState, neighborhood, voxelize
from .net import (
    MlpSpec,
    ParamStore,
    Tape,
    gather_features_batch,
    gather_width,
    mlp_forward,
    mlp_init,
)

LAMBDA_MIN = 1e-6

DEFAULT_WINDOW = NeighborhoodSpec(2, "linf")


@dataclass(frozen=True)
class SigmaSchedule:
    """Latent noise schedule sigma(t) = base * 10^(-decay * t)."""

    base: float = 0.1
    decay: float = 0.01

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError("sigma base must be positive")
        if self.decay < 0:
            raise ValueError("sigma decay must be non-negative")

    def sigma(self, t: int) -> float:
        return self.base * 10.0 ** (-self.decay * t)


@dataclass
class RngStreams:
    """Independent generators per draw purpose, derived from one seed."""

    occupancy: np.random.Generator
    latent: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, chain_id: int = 0) -> "RngStreams":
        return cls(
            occupancy=np.random.default_rng(np.random.SeedSequence((seed, chain_id, 0))),
            latent=np.random.default_rng(np.random.SeedSequence((seed, chain_id, 1))),
        )


@dataclass
class TransitionOutput:
    """Per-neighborhood-cell occupancy probability and latent mean.

    `lam` is the logistic output clamped to [LAMBDA_MIN, 1 - LAMBDA_MIN];
    `sig_raw` keeps the unclamped logistic value so gradients through the
    clamp can be masked.  `tape`/`out_node` are present when the forward
    pass was recorded for training.
    """

    coords: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    source_step: int = 0
    sig_raw: np.ndarray | None = None
    tape: Tape | None = None
    out_node: object = None

    def __len__(self):
        return len(self.coords)

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[1]

    def backward(self, grad_lam: np.ndarray, grad_mu: np.ndarray) -> None:
        """Push loss gradients w.r.t. (lam, mu) through the recorded net."""
        if self.tape is None:
            raise ValueError("transition output was produced without a tape")
        sig = self.sig_raw
        inside = (sig > LAMBDA_MIN) & (sig < 1.0 - LAMBDA_MIN)
        grad_raw = np.empty((len(self.coords), 1 + self.mu.shape[1]))
        grad_raw[:, 0] = grad_lam * sig * (1.0 - sig) * inside
        grad_raw[:, 1:] = grad_mu
        self.tape.backward([(self.out_node, grad_raw)])


@dataclass(frozen=True)
class KernelConfig:
    latent_dim: int = 32
    hidden: int = 64
    layers: int = 2
    window: NeighborhoodSpec = DEFAULT_WINDOW
    conditioned: bool = False

    def mlp_spec(self) -> MlpSpec:
        width_in = gather_width(self.window, self.latent_dim, self.conditioned)
        widths = (width_in,) + (self.hidden,) * self.layers + (self.latent_dim + 1,)
        return MlpSpec(widths, activation="relu")


class TransitionModel:
    """The learned transition kernel: local window features -> (lam, mu)."""

    PREFIX = "kernel"

    def __init__(self, config: KernelConfig, store: ParamStore | None = None, seed: int = 0):
        self.config = config
        self.spec = config.mlp_spec()
        if store is None:
            store = ParamStore()
            mlp_init(store, self.PREFIX, self.spec, np.random.default_rng(seed))
        self.params = store

    def predict(
        self,
        state: SparseState,
        spec: NeighborhoodSpec,
        cond: SparseState | None = None,
        step: int = 0,
        with_tape: bool = False,
    ) -> TransitionOutput:
        """(lam, mu) for every cell of the neighborhood of `state`."""
        if state.is_empty:
            raise EmptyStateError("cannot predict from an empty state")
        if (cond is not None) != self.config.conditioned:
            raise ValueError("condition state does not match the model's conditioned flag")
        if cond is not None and cond.latent_dim != state.latent_dim:
            raise ValueError("condition latent_dim differs from state latent_dim")
        hood = neighborhood(state, spec)
        feats = gather_features_batch(state, hood, self.config.window, cond=cond)
        out, tape = mlp_forward(self.params, self.PREFIX, self.spec, feats)
        raw = out.value
        sig = 1.0 / (1.0 + np.exp(-raw[:, 0]))
        lam = np.clip(sig, LAMBDA_MIN, 1.0 - LAMBDA_MIN)
        return TransitionOutput(
            coords=hood,
            lam=lam,
            mu=raw[:, 1:].copy(),
            source_step=step,
            sig_raw=sig,
            tape=tape if with_tape else None,
            out_node=out if with_tape else None,
        )


def _sample_cells(
    coords: np.ndarray,
    lam: np.ndarray,
    mu: np.ndarray,
    sigma: float,
    streams: RngStreams,
    resolution: int | None,
    voxel_size: float,
) -> SparseState:
    """Shared Bernoulli-then-Gaussian sampler over a sorted cell domain."""
    u = streams.occupancy.random(len(coords))
    keep = u < lam
    kept = coords[keep]
    noise = streams.latent.standard_normal((len(kept), mu.shape[1]))
    codes = mu[keep] + sigma * noise
    return SparseState.from_arrays(kept, codes, resolution, voxel_size)


def sample_transition(
    out: TransitionOutput,
    sigma: float,
    streams: RngStreams,
    resolution: int | None = None,
    voxel_size: float = 1.0,
) -> SparseState:
    """Independent per-cell sample: occupancy ~ Ber(lam), code ~ N(mu, sigma^2 I)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return _sample_cells(out.coords, out.lam, out.mu, sigma, streams, resolution, voxel_size)


def mode_seek_step(
    out: TransitionOutput,
    resolution: int | None = None,
    voxel_size: float = 1.0,
) -> SparseState:
    """Deterministic step: keep cells with lam > 0.5, code = mu exactly."""
    keep = out.lam > 0.5
    return SparseState.from_arrays(
        out.coords[keep], out.mu[keep], resolution, voxel_size
    )


def generate(
    model: TransitionModel,
    s0: SparseState,
    t_steps: int,
    mode_seek_steps: int,
    sigma_sched: SigmaSchedule,
    spec: NeighborhoodSpec,
    conditioned: bool = False,
    seed: int = 0,
    chain_id: int = 0,
    keep_trace: bool = False,
) -> tuple[SparseState, list[SparseState]]:
    """Run T stochastic transitions then T' mode-seeking transitions.

    The (lam, mu) prediction is recomputed for every mode-seeking step.
    Raises ChainDiedError (with the step index and last state) if any
    intermediate state becomes empty.
    """
    if s0.is_empty:
        raise EmptyStateError("initial state has no occupied cells")
    if t_steps < 0 or mode_seek_steps < 0:
        raise ValueError("step counts must be non-negative")
    streams = RngStreams.from_seed(seed, chain_id)
    cond = s0 if conditioned else None
    state = s0
    trace = [s0] if keep_trace else []
    for t in range(t_steps):
        out = model.predict(state, spec, cond=cond, step=t)
        nxt = _sample_cells(
            out.coords, out.lam, out.mu, sigma_sched.sigma(t), streams,
            state.resolution, state.voxel_size,
        )
        if nxt.is_empty:
            raise ChainDiedError(t + 1, last_state=state)
        state = nxt
        if keep_trace:
            trace.append(state)
    for i in range(mode_seek_steps):
        out = model.predict(state, spec, cond=cond, step=t_steps + i)
        nxt = mode_seek_step(out, state.resolution, state.voxel_size)
        if nxt.is_empty:
            raise ChainDiedError(t_steps + i + 1, last_state=state)
        state = nxt
        if keep_trace:
            trace.append(state)
    return state, trace


def initial_state(
    points: np.ndarray,
    resolution: int,
    voxel_size: float,
    latent_dim: int,
    init_mode: str = "random",
    rng: np.random.Generator | None = None,
    encoder=None,
    sigma_init: float = 1.0,
) -> SparseState:
    """Occupancy from voxelization; latents random or encoded.

    `random`: codes ~ N(0, sigma_init^2 I) in sorted-cell order.
    `encoded`: codes from `encoder(points, dists)` called with all-zero
    distances (the points sit on the observed surface).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyStateError("initial point cloud is empty")
    if init_mode == "encoded":
        if encoder is None:
            raise ValueError("encoded init_mode requires an encoder callable")
        return encoder(points, np.zeros(len(points)))
    if init_mode != "random":
        raise ValueError(f"unknown init_mode {init_mode!r}")
    occ = voxelize(points, resolution, voxel_size, latent_dim)
    if rng is None:
        rng = np.random.default_rng(0)
    codes = sigma_init * rng.standard_normal((len(occ), latent_dim))
    return occ.with_codes(codes)


def dump_chain_trace(trace: list[SparseState], out_dir) -> list[str]:
    """Write one state CSV per step, named step_<t>.csv; returns the paths."""
    from pathlib import Path

    from .grid import save_state

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, state in enumerate(trace):
        p = out / f"step_{t}.csv"
        save_state(state, p)
        paths.append(str(p))
    return paths
