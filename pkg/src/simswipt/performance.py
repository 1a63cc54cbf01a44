"""Downlink performance evaluation: ergodic SE and average harvested energy.

Closed forms follow the channel-hardening decomposition for the
protective partial zero-forcing scheme, plus the logistic nonlinear harvester
response.  The decomposition covers the coherent gain, beamforming
uncertainty, inter-user and energy-stream leakage, and pilot contamination.
Independent Monte Carlo oracles sample channels, estimate, precode, and
measure every term of the decomposition with batch-means standard errors,
so each closed-form term can be checked in isolation.

Closed forms are pure functions of a ClosedFormStats bundle; the Monte Carlo
routines share a single sampling core.  Accumulation relies on numpy pairwise
summation to bound floating-point drift.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import channel as _channel
from . import estimation as _estimation
from . import precoding as _precoding


# --- parameters and decisions ---


@dataclass(frozen=True)
class SystemParams:
    """Block structure, normalized powers, and harvester circuit constants.

    rho_d and rho_u are linear SNRs (transmit power over noise power);
    sigma_n2 is the noise power in Watts, used only to convert harvested
    energy back to physical units.  xi, chi, phi are the logistic circuit
    constants (phi is the maximum DC output in Watts).  qos_energy (Watts)
    and qos_se (bit/s/Hz) are optional per-receiver targets.
    """

    tau_c: int = 200
    tau: int = 1
    rho_d: float = 0.0
    rho_u: float = 0.0
    sigma_n2: float = 1.0
    xi: float = 150.0
    chi: float = 0.024
    phi: float = 0.024
    qos_energy: float | None = None
    qos_se: float | None = None

    def __post_init__(self):
        if not 0 < self.tau < self.tau_c:
            raise ValueError("pilot length must satisfy 0 < tau < tau_c")
        if self.xi <= 0.0 or self.phi <= 0.0:
            raise ValueError("circuit constants xi and phi must be positive")
        if self.rho_d < 0.0 or self.rho_u < 0.0 or self.sigma_n2 <= 0.0:
            raise ValueError("powers must be nonnegative and noise positive")

    @property
    def omega(self):
        """Zero-input response offset of the logistic harvester."""
        return 1.0 / (1.0 + np.exp(self.xi * self.chi))

    @property
    def prelog(self):
        """Fraction of the coherence block left for downlink data."""
        return 1.0 - self.tau / self.tau_c


@dataclass
class ResourceDecision:
    """AP mode selection and per-stream power split.

    modes[m] = 1 marks an information AP, 0 an energy AP.  power_ir[m, k]
    and power_er[m, j] are the normalized power fractions eta; a feasible
    split spends at most the full budget on the side matching the mode.
    """

    modes: np.ndarray
    power_ir: np.ndarray
    power_er: np.ndarray

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=float)
        self.power_ir = np.atleast_2d(np.asarray(self.power_ir, dtype=float))
        self.power_er = np.atleast_2d(np.asarray(self.power_er, dtype=float))

    @property
    def num_aps(self):
        return self.modes.shape[0]

    def check_feasible(self, atol=1e-9):
        if np.any((self.modes != 0.0) & (self.modes != 1.0)):
            raise ValueError("modes must be binary")
        if np.any(self.power_ir < -atol) or np.any(self.power_er < -atol):
            raise ValueError("negative power fraction")
        spent_i = self.power_ir.sum(axis=1)
        spent_e = self.power_er.sum(axis=1)
        if np.any(spent_i > self.modes + atol):
            raise ValueError("information power exceeds the information-AP budget")
        if np.any(spent_e > 1.0 - self.modes + atol):
            raise ValueError("energy power exceeds the energy-AP budget")

    @classmethod
    def uniform(cls, modes, num_ir, num_er):
        """Equal split of each AP's budget across its own receiver class."""
        modes = np.asarray(modes, dtype=float)
        m = modes.shape[0]
        power_ir = np.repeat(modes[:, None] / max(num_ir, 1), num_ir, axis=1)
        power_er = np.repeat((1.0 - modes)[:, None] / max(num_er, 1), num_er, axis=1)
        return cls(modes, power_ir.reshape(m, num_ir), power_er.reshape(m, num_er))


# --- per-AP statistical bundle consumed by the closed forms ---


@dataclass
class ClosedFormStats:
    """Everything the closed-form SE and HE expressions need, precomputed.

    Arrays are indexed (AP, receiver).  gamma_* carries the estimate quality
    actually fed to the error moments (exact covariance trace by default);
    los_power_* is kappa beta_bar z^H F F^H z, the coherent LoS power of the
    effective channel.  mean_er / cov_er are the ER estimate distributions
    used by the fourth-moment terms.
    """

    plan: "_estimation.PilotPlan"
    num_ir: int
    num_er: int
    trace_gram: np.ndarray
    alpha_ir: np.ndarray
    alpha_er: np.ndarray
    beta_ir: np.ndarray
    gamma_ir: np.ndarray
    beta_er: np.ndarray
    gamma_er: np.ndarray
    los_power_er: np.ndarray
    mean_er: np.ndarray
    cov_er: np.ndarray
    estimators: list = field(repr=False, default_factory=list)

    def copilot_irs(self, k):
        """Indices of IRs sharing IR k's pilot (excluding k itself)."""
        return [j for j in self.plan.copilots(k) if j != k and j < self.num_ir]

    def copilot_ers(self, j):
        """ER-local indices sharing ER j's pilot (excluding j itself)."""
        k = self.num_ir + j
        return [
            i - self.num_ir
            for i in self.plan.copilots(k)
            if i != k and i >= self.num_ir
        ]


def build_stats(f, links, plan, num_ir, params, alpha_moment="exact",
                gamma_flavor="exact"):
    """Assemble ClosedFormStats for a full scene.

    f is the per-AP cascade stack (M, S, N); links is an M-sequence of
    plan-ordered RiceanLink sequences (information receivers first).
    gamma_flavor picks which quality scalar feeds the closed-form error
    moments: "exact" uses tr(cov), "spectrum-blind" the trace-ratio form.
    """
    if gamma_flavor not in ("exact", "spectrum-blind"):
        raise ValueError(f"unknown gamma flavor {gamma_flavor!r}")
    f = np.asarray(f)
    num_aps = f.shape[0]
    num_er = plan.num_receivers - num_ir
    n = f.shape[2]
    trace_gram = np.empty(num_aps)
    alpha_ir = np.empty((num_aps, num_ir))
    alpha_er = np.empty((num_aps, num_er))
    beta_ir = np.empty((num_aps, num_ir))
    gamma_ir = np.empty((num_aps, num_ir))
    beta_er = np.empty((num_aps, num_er))
    gamma_er = np.empty((num_aps, num_er))
    los_power_er = np.empty((num_aps, num_er))
    mean_er = np.empty((num_aps, num_er, n), dtype=complex)
    cov_er = np.empty((num_aps, num_er, n, n), dtype=complex)
    estimators = []
    for m in range(num_aps):
        stats_m = [
            _estimation.build_estimator(plan, k, links[m], f[m], params.rho_u,
                                        params.sigma_n2)
            for k in range(plan.num_receivers)
        ]
        estimators.append(stats_m)
        trace_gram[m] = stats_m[0].trace_gram
        exact_i = [stats_m[k].gamma_exact for k in range(num_ir)]
        exact_e = [stats_m[num_ir + j].gamma_exact for j in range(num_er)]
        alpha_ir[m] = _precoding.alpha_zf_approx(
            f[m], links[m][:num_ir], gammas=exact_i, moment=alpha_moment
        )
        alpha_er[m] = _precoding.alpha_pmrt_approx(
            f[m], links[m][num_ir:], gammas=exact_e, moment=alpha_moment
        )
        for k in range(num_ir):
            beta_ir[m, k] = links[m][k].beta_bar
            gamma_ir[m, k] = (
                stats_m[k].gamma_exact if gamma_flavor == "exact"
                else stats_m[k].gamma
            )
        for j in range(num_er):
            link = links[m][num_ir + j]
            st = stats_m[num_ir + j]
            beta_er[m, j] = link.beta_bar
            gamma_er[m, j] = st.gamma_exact if gamma_flavor == "exact" else st.gamma
            steered = f[m].conj().T @ link.los
            los_power_er[m, j] = link.kappa * link.beta_bar * float(
                np.real(steered.conj() @ steered)
            )
            mean_er[m, j] = st.mean
            cov_er[m, j] = st.cov
    return ClosedFormStats(
        plan=plan, num_ir=num_ir, num_er=num_er, trace_gram=trace_gram,
        alpha_ir=alpha_ir, alpha_er=alpha_er, beta_ir=beta_ir,
        gamma_ir=gamma_ir, beta_er=beta_er, gamma_er=gamma_er,
        los_power_er=los_power_er, mean_er=mean_er, cov_er=cov_er,
        estimators=estimators,
    )


# --- closed-form spectral efficiency ---


@dataclass
class SeClosedForm:
    """Per-IR closed-form decomposition of the effective SINR."""

    ds: np.ndarray
    bu: np.ndarray
    iui_copilot: np.ndarray
    iui_orth: np.ndarray
    eui: np.ndarray
    pc: np.ndarray
    sinr: np.ndarray
    se: np.ndarray


def se_from_sinr(sinr, params):
    return params.prelog * np.log2(1.0 + np.asarray(sinr))


def se_closed_form_terms(decision, stats, params):
    """Hardening-based SINR decomposition for every information receiver.

    The coherent gain is sum_m alpha sqrt(a rho eta); residual terms are
    error-moment weighted power sums, with the co-pilot coherent square
    reported separately as the pilot-contamination term.
    """
    decision.check_feasible()
    a = decision.modes
    rho = params.rho_d
    k_i = stats.num_ir
    error_ir = stats.beta_ir * stats.trace_gram[:, None] - stats.gamma_ir
    amp = stats.alpha_ir * np.sqrt(a[:, None] * rho * decision.power_ir)
    ds = amp.sum(axis=0)
    bu = np.einsum(
        "m,mk,mk->k", a * rho, decision.power_ir, error_ir
    )
    load_i = (a * rho)[:, None] * decision.power_ir
    load_e = ((1.0 - a) * rho)[:, None] * decision.power_er
    eui = load_e.sum(axis=1) @ error_ir
    iui_copilot = np.zeros(k_i)
    iui_orth = np.zeros(k_i)
    pc = np.zeros(k_i)
    for k in range(k_i):
        mates = stats.copilot_irs(k)
        for kp in range(k_i):
            if kp == k:
                continue
            noncoh = float(load_i[:, kp] @ error_ir[:, k])
            if kp in mates:
                coherent = float(amp[:, kp].sum()) ** 2
                pc[k] += coherent
                iui_copilot[k] += coherent + noncoh
            else:
                iui_orth[k] += noncoh
    sinr = ds**2 / (bu + iui_copilot + iui_orth + eui + 1.0)
    return SeClosedForm(
        ds=ds, bu=bu, iui_copilot=iui_copilot, iui_orth=iui_orth, eui=eui,
        pc=pc, sinr=sinr, se=se_from_sinr(sinr, params),
    )


def sinr_closed_form(decision, stats, params):
    """Closed-form effective SINR per information receiver."""
    return se_closed_form_terms(decision, stats, params).sinr


# --- closed-form harvested energy ---


@dataclass
class HeClosedForm:
    """Per-ER closed-form decomposition of the average received RF energy.

    All arrays are in the normalized bracket (before the block-energy
    scaling); q is the full per-block energy in Watt-symbols and e_nl the
    harvested output in Watts.
    """

    serving: np.ndarray
    cross_copilot: np.ndarray
    cross_orth: np.ndarray
    leak: np.ndarray
    noise: float
    q: np.ndarray
    e_nl: np.ndarray


def _fourth_moment_same(mean, cov):
    """E ||ghat||^4 for ghat ~ CN(mean, cov)."""
    tr = float(np.real(np.trace(cov)))
    tr2 = float(np.real(np.trace(cov @ cov)))
    norm2 = float(np.real(mean.conj() @ mean))
    quad = float(np.real(mean.conj() @ cov @ mean))
    return tr**2 + tr2 + norm2**2 + 2.0 * norm2 * tr + 2.0 * quad


def _fourth_moment_copilot(mean, mean_p, cov, ratio):
    """Co-pilot cross fourth moment with proportional estimation errors.

    ratio is beta_bar'/beta_bar; the correlated-error contributions are
    expressed through the observer's covariance scaled by the ratio.
    """
    cross = complex(mean.conj() @ mean_p)
    tr = float(np.real(np.trace(cov)))
    tr2 = float(np.real(np.trace(cov @ cov)))
    quad = float(np.real(mean.conj() @ cov @ mean_p))
    return (
        abs(cross) ** 2
        + 2.0 * ratio**2 * cross.real * tr
        + ratio**4 * (tr**2 + tr2)
        + 2.0 * ratio**2 * quad
    )


def energy_weights(stats):
    """Per-stream coefficients of the average received-energy bracket.

    Returns (beam, leak): beam[m, j, jp] multiplies (1 - a_m) eta^E_{m jp}
    in observer j's bracket (the serving fourth-moment term on the diagonal,
    co-pilot or orthogonal cross terms off it), and leak[m, j] multiplies
    a_m sum_k eta^I_{m k} (information leakage, already divided by the
    antenna count).  The bracket is linear in the powers with these weights,
    which is what the mode and power optimizer builds its constraints from.
    """
    num_er = stats.num_er
    num_aps = stats.trace_gram.shape[0]
    t_gram = stats.trace_gram
    beam = np.zeros((num_aps, num_er, num_er))
    error_er = stats.beta_er * t_gram[:, None] - stats.gamma_er
    signal_er = stats.los_power_er + stats.gamma_er
    full_er = stats.los_power_er + stats.beta_er * t_gram[:, None]
    for j in range(num_er):
        mates = stats.copilot_ers(j)
        for m in range(num_aps):
            a_term = _fourth_moment_same(stats.mean_er[m, j], stats.cov_er[m, j])
            beam[m, j, j] = stats.alpha_er[m, j] ** 2 * (
                signal_er[m, j] * error_er[m, j] + a_term
            )
            for jp in range(num_er):
                if jp == j:
                    continue
                # The interfering stream carries its own normalization, so
                # the cross moments scale with the interferer's alpha.
                if jp in mates:
                    ratio = stats.beta_er[m, jp] / stats.beta_er[m, j]
                    b_term = _fourth_moment_copilot(
                        stats.mean_er[m, j], stats.mean_er[m, jp],
                        stats.cov_er[m, j], ratio,
                    )
                    beam[m, j, jp] = stats.alpha_er[m, jp] ** 2 * (
                        b_term + signal_er[m, jp] * error_er[m, j]
                    )
                else:
                    beam[m, j, jp] = stats.alpha_er[m, jp] ** 2 * (
                        full_er[m, j] * signal_er[m, jp]
                    )
    n = stats.mean_er.shape[2] if num_er else 1
    leak = full_er / float(n)
    return beam, leak


def he_closed_form_terms(decision, stats, params):
    """Average received-energy decomposition for every energy receiver.

    Sums the serving-beam term, co-pilot and orthogonal-pilot cross terms,
    the information-stream leakage (1/N weighted), and the thermal floor.
    """
    decision.check_feasible()
    a = decision.modes
    rho = params.rho_d
    num_er = stats.num_er
    block = float(params.tau_c - params.tau)
    beam, leak_w = energy_weights(stats)
    er_load = (1.0 - a)[:, None] * decision.power_er
    ir_load = (a[:, None] * decision.power_ir).sum(axis=1)
    serving = np.einsum("mj,mjj->j", er_load, beam)
    cross_copilot = np.zeros(num_er)
    cross_orth = np.zeros(num_er)
    for j in range(num_er):
        mates = stats.copilot_ers(j)
        for jp in range(num_er):
            if jp == j:
                continue
            cross = float(er_load[:, jp] @ beam[:, j, jp])
            if jp in mates:
                cross_copilot[j] += cross
            else:
                cross_orth[j] += cross
    leak = ir_load @ leak_w
    bracket = serving + cross_copilot + cross_orth + leak
    q = block * params.sigma_n2 * (1.0 + rho * bracket)
    return HeClosedForm(
        serving=serving, cross_copilot=cross_copilot, cross_orth=cross_orth,
        leak=leak, noise=block * params.sigma_n2, q=q,
        e_nl=nleh(q, params),
    )


def q_closed_form(decision, stats, params):
    """Closed-form per-block received RF energy per energy receiver."""
    return he_closed_form_terms(decision, stats, params).q


# --- nonlinear harvester ---


def logistic_response(x, params):
    """Raw logistic circuit response in Watts."""
    return params.phi / (1.0 + np.exp(-params.xi * (np.asarray(x, dtype=float) - params.chi)))


def nleh(q, params, input_scale="block"):
    """Average nonlinear harvested energy for received energy q.

    input_scale "block" treats q as per-coherence-block Watt-symbols and
    divides by the data-phase length before the logistic response (so the
    circuit sees Watts); "watts" applies the response directly.  The offset
    (phi Omega)/(1 - Omega) pins zero input to zero output.
    """
    if input_scale == "block":
        x = np.asarray(q, dtype=float) / (params.tau_c - params.tau)
    elif input_scale == "watts":
        x = np.asarray(q, dtype=float)
    else:
        raise ValueError(f"unknown input scale {input_scale!r}")
    omega = params.omega
    return (logistic_response(x, params) - params.phi * omega) / (1.0 - omega)


# --- Monte Carlo oracles ---


def _batch_se(values, batches):
    """Batch-means standard error along the last (trial) axis."""
    t = values.shape[-1]
    b = max(2, min(batches, t))
    size = t // b
    trimmed = values[..., : b * size].reshape(*values.shape[:-1], b, size)
    means = trimmed.mean(axis=-1)
    return means.std(axis=-1, ddof=1) / np.sqrt(b)


@dataclass
class PrecodedSample:
    """Per-AP joint draw of true channels and normalized precoders."""

    g: list
    w_ir: list
    w_er: list


def sample_precoded(decision, f, links, plan, num_ir, params, trials, rng,
                    stats=None, exact_csi=False, zf_grouping="per-user"):
    """Draw channels, estimate, precode, and normalize for every AP.

    Returns a PrecodedSample whose lists hold, per AP, the true channel rows
    (trials, K, N) and the statistically normalized precoders (trials, K_I, N)
    and (trials, K_E, N).  With exact_csi the estimates are replaced by the
    true channels (zero estimation error), which the protectiveness tests
    rely on.  Rank failures in the zero-forcing solve propagate.

    zf_grouping "per-user" inverts the full estimate matrix, one column per
    information receiver; that construction nulls co-pilot estimates exactly
    (no coherent contamination) and is singular when co-pilot estimates
    coincide.  "per-pilot" keeps one representative column per distinct
    information pilot, the classical contaminated model where co-pilot
    receivers share a beam and the coherent pilot-contamination term
    survives.  The two coincide without pilot reuse.
    """
    f = np.asarray(f)
    if stats is None:
        stats = build_stats(f, links, plan, num_ir, params)
    if zf_grouping == "per-user":
        zf_cols = list(range(num_ir))
        stream_col = list(range(num_ir))
    elif zf_grouping == "per-pilot":
        zf_cols, stream_col, seen = [], [], {}
        for k in range(num_ir):
            pilot = plan.assignment[k]
            if pilot not in seen:
                seen[pilot] = len(zf_cols)
                zf_cols.append(k)
            stream_col.append(seen[pilot])
    else:
        raise ValueError(f"unknown zf grouping {zf_grouping!r}")
    num_er = plan.num_receivers - num_ir
    g_all, w_ir_all, w_er_all = [], [], []
    for m in range(f.shape[0]):
        g, ghat, _ = _estimation.draw_estimates(
            plan, links[m], f[m], params.rho_u, params.sigma_n2, rng, trials
        )
        if exact_csi:
            ghat = g
        ghat_i = np.swapaxes(ghat[:, :num_ir, :], 1, 2)[..., zf_cols]
        ghat_e = np.swapaxes(ghat[:, num_ir:, :], 1, 2)
        w_ir = np.empty((trials, num_ir, f.shape[2]), dtype=complex)
        for k in range(num_ir):
            w_ir[:, k, :] = stats.alpha_ir[m, k] * _precoding.zf_precoder(
                ghat_i, stream_col[k]
            )
        w_er = np.empty((trials, num_er, f.shape[2]), dtype=complex)
        for j in range(num_er):
            w_er[:, j, :] = stats.alpha_er[m, j] * _precoding.pmrt_precoder(
                ghat_i, ghat_e, j
            )
        g_all.append(g)
        w_ir_all.append(w_ir)
        w_er_all.append(w_er)
    return PrecodedSample(g=g_all, w_ir=w_ir_all, w_er=w_er_all), stats


@dataclass
class SeMonteCarlo:
    """Empirical SINR decomposition with batch-means standard errors."""

    ds: np.ndarray
    ds_se: np.ndarray
    ds_imag: np.ndarray
    bu: np.ndarray
    bu_se: np.ndarray
    iui_copilot: np.ndarray
    iui_copilot_se: np.ndarray
    iui_orth: np.ndarray
    iui_orth_se: np.ndarray
    eui: np.ndarray
    eui_se: np.ndarray
    ap_power: np.ndarray
    ap_power_se: np.ndarray
    sinr: np.ndarray
    se: np.ndarray
    trials: int


def monte_carlo_se(decision, f, links, plan, num_ir, params, trials, rng,
                   stats=None, batches=20, exact_csi=False,
                   zf_grouping="per-user"):
    """Sampled SINR decomposition for every information receiver.

    Per trial the coherent gain, self-interference fluctuation, co-pilot and
    orthogonal inter-user terms, and energy-stream leakage are accumulated
    across APs before squaring, exactly as the receiver combines them.  Also
    reports the empirical per-AP transmit power for the budget check.
    """
    decision.check_feasible()
    if trials < 100:
        raise ValueError("at least 100 trials required")
    sample, stats = sample_precoded(
        decision, f, links, plan, num_ir, params, trials, rng,
        stats=stats, exact_csi=exact_csi, zf_grouping=zf_grouping,
    )
    a = decision.modes
    rho = params.rho_d
    k_i = num_ir
    k_e = plan.num_receivers - num_ir
    num_aps = a.shape[0]
    sig = np.zeros((k_i, k_i, trials), dtype=complex)
    eui_amp = np.zeros((k_i, k_e, trials), dtype=complex)
    ap_power = np.zeros((num_aps, trials))
    for m in range(num_aps):
        rows = sample.g[m][:, :k_i, :].conj()
        wgt_i = np.sqrt(a[m] * rho * decision.power_ir[m])
        wgt_e = np.sqrt((1.0 - a[m]) * rho * decision.power_er[m])
        for kp in range(k_i):
            inner = np.einsum("tkn,tn->kt", rows, sample.w_ir[m][:, kp, :])
            sig[:, kp, :] += wgt_i[kp] * inner
        for jp in range(k_e):
            inner = np.einsum("tkn,tn->kt", rows, sample.w_er[m][:, jp, :])
            eui_amp[:, jp, :] += wgt_e[jp] * inner
        ap_power[m] = rho * (
            np.sum(
                (a[m] * decision.power_ir[m])[None, :]
                * np.sum(np.abs(sample.w_ir[m]) ** 2, axis=2),
                axis=1,
            )
            + np.sum(
                ((1.0 - a[m]) * decision.power_er[m])[None, :]
                * np.sum(np.abs(sample.w_er[m]) ** 2, axis=2),
                axis=1,
            )
        )
    ds_t = np.stack([sig[k, k, :] for k in range(k_i)])
    ds_mean = ds_t.mean(axis=1)
    bu_t = np.abs(ds_t - ds_mean[:, None]) ** 2
    iui_cop_t = np.zeros((k_i, trials))
    iui_orth_t = np.zeros((k_i, trials))
    for k in range(k_i):
        mates = stats.copilot_irs(k)
        for kp in range(k_i):
            if kp == k:
                continue
            term = np.abs(sig[k, kp, :]) ** 2
            if kp in mates:
                iui_cop_t[k] += term
            else:
                iui_orth_t[k] += term
    eui_t = np.sum(np.abs(eui_amp) ** 2, axis=1)
    ds = np.real(ds_mean)
    bu = bu_t.mean(axis=1)
    iui_cop = iui_cop_t.mean(axis=1)
    iui_orth = iui_orth_t.mean(axis=1)
    eui = eui_t.mean(axis=1)
    sinr = ds**2 / (bu + iui_cop + iui_orth + eui + 1.0)
    return SeMonteCarlo(
        ds=ds,
        ds_se=_batch_se(np.real(ds_t), batches),
        ds_imag=np.imag(ds_mean),
        bu=bu,
        bu_se=_batch_se(bu_t, batches),
        iui_copilot=iui_cop,
        iui_copilot_se=_batch_se(iui_cop_t, batches),
        iui_orth=iui_orth,
        iui_orth_se=_batch_se(iui_orth_t, batches),
        eui=eui,
        eui_se=_batch_se(eui_t, batches),
        ap_power=ap_power.mean(axis=1),
        ap_power_se=_batch_se(ap_power, batches),
        sinr=sinr,
        se=se_from_sinr(sinr, params),
        trials=trials,
    )


@dataclass
class HeMonteCarlo:
    """Empirical received-energy decomposition and both logistic orderings."""

    serving: np.ndarray
    serving_se: np.ndarray
    cross_copilot: np.ndarray
    cross_copilot_se: np.ndarray
    cross_orth: np.ndarray
    cross_orth_se: np.ndarray
    leak: np.ndarray
    leak_se: np.ndarray
    q: np.ndarray
    q_se: np.ndarray
    e_nl_of_mean: np.ndarray
    mean_of_e_nl: np.ndarray
    mean_of_e_nl_se: np.ndarray
    remark_gap: np.ndarray
    trials: int


def monte_carlo_he(decision, f, links, plan, num_ir, params, trials, rng,
                   stats=None, batches=20, exact_csi=False,
                   zf_grouping="per-user"):
    """Sampled received-energy families for every energy receiver.

    Measures the serving-beam, co-pilot cross, orthogonal cross, and
    information-leakage expectation families per AP and stream (the energy
    definition has no cross-AP coherence), then applies the logistic model
    both ways: response of the mean and mean of the response.  Their gap
    quantifies the first-order approximation quality.
    """
    decision.check_feasible()
    if trials < 100:
        raise ValueError("at least 100 trials required")
    sample, stats = sample_precoded(
        decision, f, links, plan, num_ir, params, trials, rng,
        stats=stats, exact_csi=exact_csi, zf_grouping=zf_grouping,
    )
    a = decision.modes
    rho = params.rho_d
    k_i = num_ir
    k_e = plan.num_receivers - num_ir
    block = float(params.tau_c - params.tau)
    serving_t = np.zeros((k_e, trials))
    cross_cop_t = np.zeros((k_e, trials))
    cross_orth_t = np.zeros((k_e, trials))
    leak_t = np.zeros((k_e, trials))
    for m in range(a.shape[0]):
        rows = sample.g[m][:, k_i:, :].conj()
        for j in range(k_e):
            mates = stats.copilot_ers(j)
            for jp in range(k_e):
                weight = (1.0 - a[m]) * decision.power_er[m, jp]
                if weight == 0.0:
                    continue
                inner = np.abs(
                    np.einsum("tn,tn->t", rows[:, j, :], sample.w_er[m][:, jp, :])
                ) ** 2
                if jp == j:
                    serving_t[j] += weight * inner
                elif jp in mates:
                    cross_cop_t[j] += weight * inner
                else:
                    cross_orth_t[j] += weight * inner
            for k in range(k_i):
                weight = a[m] * decision.power_ir[m, k]
                if weight == 0.0:
                    continue
                inner = np.abs(
                    np.einsum("tn,tn->t", rows[:, j, :], sample.w_ir[m][:, k, :])
                ) ** 2
                leak_t[j] += weight * inner
    energy_t = block * params.sigma_n2 * (
        1.0 + rho * (serving_t + cross_cop_t + cross_orth_t + leak_t)
    )
    nl_t = nleh(energy_t, params)
    q = energy_t.mean(axis=1)
    e_nl_of_mean = nleh(q, params)
    mean_of_e_nl = nl_t.mean(axis=1)
    return HeMonteCarlo(
        serving=serving_t.mean(axis=1),
        serving_se=_batch_se(serving_t, batches),
        cross_copilot=cross_cop_t.mean(axis=1),
        cross_copilot_se=_batch_se(cross_cop_t, batches),
        cross_orth=cross_orth_t.mean(axis=1),
        cross_orth_se=_batch_se(cross_orth_t, batches),
        leak=leak_t.mean(axis=1),
        leak_se=_batch_se(leak_t, batches),
        q=q,
        q_se=_batch_se(energy_t, batches),
        e_nl_of_mean=e_nl_of_mean,
        mean_of_e_nl=mean_of_e_nl,
        mean_of_e_nl_se=_batch_se(nl_t, batches),
        remark_gap=np.abs(e_nl_of_mean - mean_of_e_nl),
        trials=trials,
    )


# --- report ---


@dataclass
class PerformanceReport:
    """Per-receiver summary with run metadata, serializable to CSV rows."""

    sinr: np.ndarray
    se: np.ndarray
    q: np.ndarray
    e_nl: np.ndarray
    seed: int | None = None
    config_hash: str | None = None
    qos_se: float | None = None
    qos_energy: float | None = None

    CSV_FIELDS = (
        "role", "index", "sinr", "se", "q_block", "e_nl", "qos_ok",
        "seed", "config_hash",
    )

    @property
    def sum_he(self):
        return float(np.sum(self.e_nl))

    def qos_flags(self):
        se_ok = (
            self.se >= self.qos_se if self.qos_se is not None
            else np.ones_like(self.se, dtype=bool)
        )
        he_ok = (
            self.e_nl >= self.qos_energy if self.qos_energy is not None
            else np.ones_like(self.e_nl, dtype=bool)
        )
        return se_ok, he_ok

    def csv_rows(self):
        se_ok, he_ok = self.qos_flags()
        rows = []
        for k in range(self.se.shape[0]):
            rows.append({
                "role": "ir", "index": k,
                "sinr": repr(float(self.sinr[k])), "se": repr(float(self.se[k])),
                "q_block": "", "e_nl": "",
                "qos_ok": int(se_ok[k]),
                "seed": "" if self.seed is None else self.seed,
                "config_hash": self.config_hash or "",
            })
        for j in range(self.q.shape[0]):
            rows.append({
                "role": "er", "index": j,
                "sinr": "", "se": "",
                "q_block": repr(float(self.q[j])), "e_nl": repr(float(self.e_nl[j])),
                "qos_ok": int(he_ok[j]),
                "seed": "" if self.seed is None else self.seed,
                "config_hash": self.config_hash or "",
            })
        return rows

    def write_csv(self, path):
        with open(path, "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=self.CSV_FIELDS)
            writer.writeheader()
            writer.writerows(self.csv_rows())


def build_report(decision, stats, params, seed=None, config_hash=None):
    """Closed-form PerformanceReport for one decision on one scene."""
    se_terms = se_closed_form_terms(decision, stats, params)
    he_terms = he_closed_form_terms(decision, stats, params)
    return PerformanceReport(
        sinr=se_terms.sinr, se=se_terms.se, q=he_terms.q, e_nl=he_terms.e_nl,
        seed=seed, config_hash=config_hash,
        qos_se=params.qos_se, qos_energy=params.qos_energy,
    )
