"""Pilot assignment and linear MMSE channel estimation under contamination.

Pilots are orthonormal columns of the identity, so the per-receiver
observation is the pilot-matched column of the received block.  Estimation
operates on that projected statistic directly; the full block is only ever
materialized by the Monte Carlo oracle.

Both the spectrum-blind quality scalar (trace-ratio form) and the exact trace
of the estimate covariance are exposed: the two coincide in the
contamination-limited and high-SNR regimes but differ when the cascade Gram
matrix has a skewed spectrum, and downstream closed forms document which one
they consume.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class DegenerateConfigError(ValueError):
    """Estimation filter is singular: zero noise with a rank-deficient Gram."""


@dataclass(frozen=True)
class PilotPlan:
    """Pilot indices per receiver, IRs first, then ERs.

    tau is the pilot length in symbols; assignment[k] is the pilot index of
    receiver k in the global ordering (information receivers 0..K_I-1, energy
    receivers K_I..K_I+K_E-1).
    """

    num_ir: int
    num_er: int
    tau: int
    assignment: tuple
    reuse_ir: int
    reuse_er: int

    def copilots(self, k):
        """Indices (including k) of receivers sharing receiver k's pilot."""
        mine = self.assignment[k]
        return tuple(j for j, p in enumerate(self.assignment) if p == mine)

    @property
    def num_receivers(self):
        return self.num_ir + self.num_er


def assign_pilots(num_ir, num_er, reuse_ir=0, reuse_er=0):
    """Build the pilot plan: tau = K_I + K_E - (reuse_ir + reuse_er).

    Information receivers take the first pilots (one-to-one when reuse_ir is
    zero, the default); the remaining pilots are spread over the energy
    receivers round-robin.
    """
    if reuse_ir < 0 or reuse_er < 0:
        raise ValueError("reuse factors must be nonnegative")
    if reuse_ir > num_ir or reuse_er > num_er:
        raise ValueError("reuse factor exceeds receiver count")
    tau = num_ir + num_er - reuse_ir - reuse_er
    if tau < 1:
        raise ValueError(f"infeasible reuse factors: tau={tau} < 1")
    ir_pilots = num_ir - reuse_ir
    er_pilots = tau - ir_pilots
    if ir_pilots < 1 and num_ir > 0:
        raise ValueError("no pilots left for information receivers")
    if er_pilots < 1 and num_er > 0:
        raise ValueError("no pilots left for energy receivers")
    assignment = [k % ir_pilots for k in range(num_ir)]
    assignment += [ir_pilots + k % er_pilots for k in range(num_er)]
    return PilotPlan(
        num_ir=num_ir,
        num_er=num_er,
        tau=tau,
        assignment=tuple(assignment),
        reuse_ir=reuse_ir,
        reuse_er=reuse_er,
    )


def received_pilot(g_all, plan, rho_u, sigma_n2, rng):
    """Received pilot block and its per-receiver projections.

    g_all holds the effective channels, shape (..., K, N) with K receivers in
    plan order.  The block is Y with rows indexed by pilot, shape
    (..., tau, N): row i collects sqrt(tau rho_u) times the sum of co-pilot
    channels plus i.i.d. complex noise of power sigma_n2 per entry.  The
    projection of receiver k is simply row assignment[k].

    Returns (block, projections) with projections shaped like g_all.
    """
    g_all = np.asarray(g_all)
    *lead, K, N = g_all.shape
    if K != plan.num_receivers:
        raise ValueError("channel array does not match the pilot plan")
    block = (
        rng.standard_normal((*lead, plan.tau, N))
        + 1j * rng.standard_normal((*lead, plan.tau, N))
    ) * np.sqrt(sigma_n2 / 2.0)
    scale = np.sqrt(plan.tau * rho_u)
    for k in range(K):
        block[..., plan.assignment[k], :] += scale * g_all[..., k, :]
    projections = block[..., list(plan.assignment), :]
    return block, projections


@dataclass
class EstimatorStats:
    """Statistical description of one (AP, receiver) MMSE estimator.

    gamma is the trace-ratio quality scalar; gamma_exact = tr(cov) is the
    exact estimate power of the scattered part.  error_moment variants give
    beta_bar tr(FF^H) minus the corresponding gamma.  jittered reports
    whether the Hermitian solve needed a diagonal repair.
    """

    a_matrix: np.ndarray
    cov: np.ndarray
    mean: np.ndarray
    y_mean: np.ndarray
    beta_bar: float
    trace_gram: float
    gamma: float
    gamma_exact: float
    jittered: bool

    @property
    def error_moment(self):
        return self.beta_bar * self.trace_gram - self.gamma

    @property
    def error_moment_exact(self):
        return self.beta_bar * self.trace_gram - self.gamma_exact


def build_estimator(plan, k, links, f, rho_u, sigma_n2):
    """MMSE estimator statistics for receiver k at one AP.

    links is the list of Ricean links (plan order) at this AP; f is the AP's
    cascade.  The filter is A = sqrt(tau rho_u) beta_bar F^H F M^{-1} with
    M = tau rho_u c F^H F + sigma^2 I and c the summed co-pilot beta_bar.
    The estimate covariance tau rho_u beta_bar^2 F^H F M^{-1} F^H F commutes
    into Hermitian form because M is a polynomial in F^H F.
    """
    n = f.shape[1]
    gram = f.conj().T @ f
    trace_gram = float(np.real(np.trace(gram)))
    beta_bar = links[k].beta_bar
    copilot = plan.copilots(k)
    c = float(sum(links[j].beta_bar for j in copilot))
    tau_rho = plan.tau * rho_u
    m = tau_rho * c * gram + sigma_n2 * np.eye(n)
    jittered = False
    try:
        cho = scipy.linalg.cho_factor(m)
    except np.linalg.LinAlgError:
        if sigma_n2 == 0.0:
            raise DegenerateConfigError(
                "zero noise with a rank-deficient cascade Gram matrix"
            )
        jittered = True
        m = m + (1e-12 * np.trace(m).real / n) * np.eye(n)
        cho = scipy.linalg.cho_factor(m)
    # A = sqrt(tau rho) beta_bar gram M^{-1}; solve on the right via M X = gram.
    a_matrix = np.sqrt(tau_rho) * beta_bar * scipy.linalg.cho_solve(cho, gram).conj().T
    cov = tau_rho * beta_bar**2 * gram @ scipy.linalg.cho_solve(cho, gram)
    cov = 0.5 * (cov + cov.conj().T)
    gamma = tau_rho * beta_bar**2 * trace_gram**2 / (
        tau_rho * c * trace_gram + n * sigma_n2
    )
    mean = links[k].mean_effective(f)
    y_mean = np.sqrt(tau_rho) * sum(links[j].mean_effective(f) for j in copilot)
    return EstimatorStats(
        a_matrix=a_matrix,
        cov=cov,
        mean=mean,
        y_mean=y_mean,
        beta_bar=beta_bar,
        trace_gram=trace_gram,
        gamma=gamma,
        gamma_exact=float(np.real(np.trace(cov))),
        jittered=jittered,
    )


def apply_estimator(stats, y):
    """Estimate from the projected observation: ghat = mean + A (y - y_mean).

    Broadcasts over leading axes of y (shape (..., N)); rows are channel
    transposes, so the filter applies as (y - y_mean) A^T.
    """
    centered = y - stats.y_mean
    return stats.mean + centered @ stats.a_matrix.T


def mmse_estimate(y, plan, k, links, f, rho_u, sigma_n2):
    """One-call convenience: build the estimator and apply it to y.

    Returns (ghat, stats).
    """
    stats = build_estimator(plan, k, links, f, rho_u, sigma_n2)
    return apply_estimator(stats, y), stats


def draw_estimates(plan, links, f, rho_u, sigma_n2, rng, trials):
    """Joint draw of true and estimated channels for every receiver.

    Returns (g, ghat, stats): g and ghat have shape (trials, K, N) in plan
    order, stats is the per-receiver list of EstimatorStats.  One pilot block
    per trial couples co-pilot estimates exactly as the receiver would see
    them.
    """
    from . import channel as _channel

    g = np.stack(
        [_channel.draw_channels(link, f, rng, trials) for link in links], axis=1
    )
    _, proj = received_pilot(g, plan, rho_u, sigma_n2, rng)
    stats = [
        build_estimator(plan, k, links, f, rho_u, sigma_n2)
        for k in range(plan.num_receivers)
    ]
    ghat = np.stack(
        [apply_estimator(stats[k], proj[:, k, :]) for k in range(len(stats))], axis=1
    )
    return g, ghat, stats


def estimate_second_moment(link, f, gamma):
    """Closed-form E||ghat||^2 = kappa beta_bar z^H F F^H z + gamma.

    Pass the quality scalar for the spectrum-blind form or tr(cov) for the
    exact one.
    """
    steered = link.los.conj() @ (f @ (f.conj().T @ link.los))
    return link.kappa * link.beta_bar * float(np.real(steered)) + gamma
