"""Closed-form losses for the per-step transition objective.

Each per-step loss is an exact KL divergence between the mixed training
kernel and the model's transition, summed over the neighborhood: a
Bernoulli term per cell plus, weighted by the cell's mixed occupancy
probability, a same-variance Gaussian term on the latent mean.  The final
step swaps the mixture for the target itself; up to an additive constant
(K/2 * log(2*pi*sigma) per occupied cell, returned for logging, never
differentiated) this has the same gradient as the reweighted negative
log-likelihood of the target.

Minimization convention throughout: all values are >= 0 and the bound
evaluator negates them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainError,
    DomainMismatchError,
    EmptyQuerySetError,
    NotSaturatedError,
    SequenceNotConvergedError,
)
from .grid import SparseState
from .infusion import InfusionOutput, SequenceStep
from .kernel import LAMBDA_MIN, SigmaSchedule, TransitionOutput


@dataclass
class LossBreakdown:
    """Occupancy and latent sums plus gradients w.r.t. (lam, mu)."""

    l_o_sum: float
    l_z_sum: float
    gamma: float
    grad_lam: np.ndarray
    grad_mu: np.ndarray
    l_o_cells: np.ndarray | None = None
    l_z_cells: np.ndarray | None = None
    final_const: float = 0.0

    @property
    def l_t(self) -> float:
        return self.l_o_sum + self.gamma * self.l_z_sum


def bernoulli_kl(q: float, p: float) -> float:
    """KL(Ber(q) || Ber(p)) with the 0 log 0 = 0 convention."""
    _check_q(np.asarray(q))
    _check_p(np.asarray(p))
    return float(_bernoulli_kl_vec(np.asarray(q, dtype=np.float64), np.asarray(p, dtype=np.float64)))


def gaussian_kl_same_var(mu_q: np.ndarray, mu_p: np.ndarray, sigma: float) -> float:
    """KL between isotropic Gaussians sharing sigma: ||mu_q - mu_p||^2 / (2 sigma^2)."""
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    diff = np.asarray(mu_q, dtype=np.float64) - np.asarray(mu_p, dtype=np.float64)
    return float(np.dot(diff.ravel(), diff.ravel()) / (2.0 * sigma * sigma))


def _check_q(q: np.ndarray) -> None:
    if np.any(q < 0) or np.any(q > 1):
        raise DomainError("q must lie in [0, 1]")


def _check_p(p: np.ndarray) -> None:
    tol = 1e-12
    if np.any(p < LAMBDA_MIN - tol) or np.any(p > 1.0 - LAMBDA_MIN + tol):
        raise DomainError(
            f"p must lie in the clamped interval [{LAMBDA_MIN}, {1 - LAMBDA_MIN}]"
        )


def _bernoulli_kl_vec(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(q)
    pos = q > 0
    out[pos] += q[pos] * np.log(q[pos] / p[pos])
    neg = q < 1
    out[neg] += (1.0 - q[neg]) * np.log((1.0 - q[neg]) / (1.0 - p[neg]))
    return out


def _kl_terms(
    lam_q: np.ndarray,
    mu_q: np.ndarray,
    lam_p: np.ndarray,
    mu_p: np.ndarray,
    gamma: float,
    sigma: float,
) -> LossBreakdown:
    _check_q(lam_q)
    _check_p(lam_p)
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    l_o = _bernoulli_kl_vec(lam_q, lam_p)
    diff = mu_p - mu_q
    l_z = lam_q * (diff * diff).sum(axis=1) / (2.0 * sigma * sigma)
    grad_lam = -lam_q / lam_p + (1.0 - lam_q) / (1.0 - lam_p)
    grad_mu = (gamma * lam_q / (sigma * sigma))[:, None] * diff
    return LossBreakdown(
        l_o_sum=float(l_o.sum()),
        l_z_sum=float(l_z.sum()),
        gamma=gamma,
        grad_lam=grad_lam,
        grad_mu=grad_mu,
        l_o_cells=l_o,
        l_z_cells=l_z,
    )


def transition_loss(
    out: TransitionOutput,
    inf: InfusionOutput,
    gamma: float,
    sigma: float,
) -> LossBreakdown:
    """Exact per-step KL between the mixed kernel and the transition.

    The mixture side is a fixed target: gradients flow only through the
    model's (lam, mu).
    """
    if len(out) != len(inf) or not np.array_equal(out.coords, inf.coords):
        raise DomainMismatchError("transition and mixture domains differ")
    return _kl_terms(inf.lam, inf.mu, out.lam, out.mu, gamma, sigma)


def final_step_loss(
    out: TransitionOutput,
    target: SparseState,
    sigma: float,
    alpha: float = 1.0,
    gamma: float = 1.0,
) -> LossBreakdown:
    """Last-step loss with the target itself as the mixture.

    Valid only in the saturated regime (alpha == 1); the caller passes the
    rate it reached so the mistake is loud.  `final_const` carries the
    additive offset to the reweighted negative log-likelihood,
    n_occupied * K/2 * log(2 pi sigma); it takes no part in gradients.
    """
    if alpha < 1.0:
        raise NotSaturatedError(f"final-step loss needs alpha == 1, got {alpha}")
    codes, found = target.lookup(out.coords)
    lam_q = found.astype(np.float64)
    breakdown = _kl_terms(lam_q, codes, out.lam, out.mu, gamma, sigma)
    k = out.mu.shape[1]
    breakdown.final_const = float(found.sum()) * 0.5 * k * np.log(2.0 * np.pi * sigma)
    return breakdown


def autoencoder_loss(
    decoded: np.ndarray,
    target_d: np.ndarray,
    codes: np.ndarray,
    beta: float,
    voxel_size: float,
    mode: str = "sdf",
) -> tuple[float, np.ndarray, np.ndarray]:
    """Clamped-distance regression with latent-norm regularization.

    loss = mean |decoded - clamp(d / eps)| + beta * mean ||z_c||, where the
    clamp range is [-1, 1] for signed mode and [0, 1] for unsigned.
    Returns (loss, grad wrt decoded, grad wrt codes).
    """
    decoded = np.asarray(decoded, dtype=np.float64).ravel()
    target_d = np.asarray(target_d, dtype=np.float64).ravel()
    if decoded.size == 0:
        raise EmptyQuerySetError("no query points")
    if decoded.shape != target_d.shape:
        raise DomainMismatchError("decoded and target query sets differ in size")
    if beta < 0:
        raise DomainError("beta must be non-negative")
    lo = -1.0 if mode == "sdf" else 0.0
    tgt = np.clip(target_d / voxel_size, lo, 1.0)
    diff = decoded - tgt
    loss = float(np.abs(diff).mean())
    grad_decoded = np.sign(diff) / diff.size
    grad_codes = np.zeros_like(codes)
    if beta > 0 and len(codes):
        norms = np.linalg.norm(codes, axis=1)
        loss += beta * float(norms.mean())
        nz = norms > 0
        grad_codes[nz] = (beta / len(codes)) * codes[nz] / norms[nz, None]
    return loss, grad_decoded, grad_codes


@dataclass
class ElboReport:
    """Exact lower-bound pieces for one emulated sequence.

    `bound` = -(sum of intermediate losses at gamma=1) - final-step loss;
    the parameter-free initial-state term is excluded, and the additive
    Gaussian normalization constant is reported separately rather than
    folded in.
    """

    bound: float
    kl_sum: float
    final_term: float
    final_const: float


def elbo_lower_bound(
    steps: list[SequenceStep],
    final_state: SparseState,
    target: SparseState,
    sigma_sched: SigmaSchedule,
) -> ElboReport:
    """Evaluate the exact bound over an emulated sequence ending at the target."""
    if not final_state.occupancy_equal(target):
        raise SequenceNotConvergedError("sequence did not end at the target occupancy")
    kl_sum = 0.0
    for step in steps[:-1]:
        b = transition_loss(step.out, step.inf, gamma=1.0, sigma=sigma_sched.sigma(step.out.source_step))
        kl_sum += b.l_t
    last = steps[-1]
    fin = final_step_loss(
        last.out, target, sigma_sched.sigma(last.out.source_step),
        alpha=last.inf.alpha, gamma=1.0,
    )
    return ElboReport(
        bound=-kl_sum - fin.l_t,
        kl_sum=-kl_sum,
        final_term=-fin.l_t,
        final_const=fin.final_const,
    )
