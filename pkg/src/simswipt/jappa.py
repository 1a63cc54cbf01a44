"""Joint AP-mode and power optimizer over the hardened closed forms.

With the metasurface phases frozen by a heuristic pass, what remains is a
mixed-integer program: pick each AP's operating mode and its per-receiver
power split to maximize the summed harvested energy, subject to per-IR
rate floors, per-ER harvest floors, and per-AP power budgets.  The binary
modes are relaxed to [0, 1] with a penalty that pulls them back to the
corners, every nonconvex constraint is replaced by a tangent convex
surrogate (an inner approximation: surrogate-feasible points satisfy the
true constraints), and each surrogate problem is solved to KKT accuracy
by a dense log-barrier Newton method.  Iterating the linearization point
yields a nondecreasing objective; a final rounding plus a power-only
polish returns a binary, budget-exact ResourceDecision.

Scale convention: the harvest constraint is enforced on per-symbol watts,
q_watts = sigma_n2 * (1 + rho_d * bracket), matching nleh's logistic
input, so E_NL(Q) >= Gamma and q_watts >= inverse_logistic(target) are
the same statement.
"""

from dataclasses import dataclass
import csv
import math

import numpy as np
from scipy.optimize import nnls

from . import performance as _performance


# --- harvester response inversion and the scalar bounds ---


def raw_logistic_target(harvested, params):
    """Raw logistic output that corresponds to a harvested-power level.

    Undoes the zero-input offset correction: a harvester emitting e watts
    after the offset normalization has raw circuit output
    (1 - Omega) e + phi Omega.
    """
    e = np.asarray(harvested, dtype=float)
    return (1.0 - params.omega) * e + params.phi * params.omega


def inverse_logistic(target, params):
    """Input power at which the raw logistic response equals target.

    target must lie strictly inside (0, phi): the circuit output reaches
    neither zero nor its saturation level at any finite input.
    """
    t = float(target)
    if not 0.0 < t < params.phi:
        raise ValueError(
            f"raw logistic output lives in (0, {params.phi}); got {t}"
        )
    return params.chi - math.log((params.phi - t) / t) / params.xi


def xi_upper_bound(target, anchor, params):
    """Convex tangent majorant of inverse_logistic, touching at anchor.

    The inverse splits into a convex -log(phi - t) part and a concave
    -log(1/t) part; replacing the latter by its tangent at anchor gives
    an upper bound that is convex in target and exact at target == anchor.
    """
    t = float(target)
    t0 = float(anchor)
    if not 0.0 < t < params.phi or not 0.0 < t0 < params.phi:
        raise ValueError(
            f"raw logistic output lives in (0, {params.phi}); got {t}, {t0}"
        )
    return params.chi - (
        math.log((params.phi - t) / t0) - (t - t0) / t0
    ) / params.xi


def quadratic_lower_bound(x, x0):
    """Tangent lower bound x0 (2x - x0) <= x**2, tight at x == x0."""
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    return x0 * (2.0 * x - x0)


# --- decision-independent coefficients under frozen phases ---


@dataclass(frozen=True)
class JappaWeights:
    """Closed-form coefficients the optimizer's constraints are built from.

    All are fixed once the metasurface phases are: coherent_gain is the
    per-stream ZF normalization, ir_error the residual-interference weight
    every non-serving stream applies to an IR, beam/leak the received-energy
    bracket weights (leak already divided by the antenna count), and
    copilot_ir the pilot-sharing groups among IRs.
    """

    num_aps: int
    num_ir: int
    num_er: int
    coherent_gain: np.ndarray
    ir_error: np.ndarray
    beam: np.ndarray
    leak: np.ndarray
    copilot_ir: tuple


def closed_form_weights(stats):
    """Cache the optimizer-facing coefficient arrays from a scene's stats."""
    ir_error = stats.beta_ir * stats.trace_gram[:, None] - stats.gamma_ir
    beam, leak = _performance.energy_weights(stats)
    copilot = tuple(tuple(stats.copilot_irs(k)) for k in range(stats.num_ir))
    return JappaWeights(
        num_aps=stats.trace_gram.shape[0], num_ir=stats.num_ir,
        num_er=stats.num_er, coherent_gain=stats.alpha_ir.copy(),
        ir_error=ir_error, beam=beam, leak=leak, copilot_ir=copilot,
    )


# --- relaxed-problem model evaluators (any modes in [0, 1]) ---


def model_bracket(modes, power_ir, power_er, weights):
    """Received-energy bracket per ER, linear in the powers."""
    modes = np.asarray(modes, dtype=float)
    er_load = (1.0 - modes)[:, None] * power_er
    ir_total = modes * np.asarray(power_ir).sum(axis=1)
    return (
        np.einsum("mp,mjp->j", er_load, weights.beam) + ir_total @ weights.leak
    )


def model_q_watts(modes, power_ir, power_er, weights, params):
    """Per-symbol received RF power per ER."""
    bracket = model_bracket(modes, power_ir, power_er, weights)
    return params.sigma_n2 * (1.0 + params.rho_d * bracket)


def model_harvest(modes, power_ir, power_er, weights, params):
    """Harvested power per ER through the nonlinear circuit."""
    q = model_q_watts(modes, power_ir, power_er, weights, params)
    return _performance.nleh(q, params, input_scale="watts")


def model_coherent_amp(modes, power_ir, weights):
    """Per-IR coherent amplitude sum_m gain * sqrt(mode * power)."""
    modes = np.asarray(modes, dtype=float)
    load = np.maximum(modes[:, None] * np.asarray(power_ir), 0.0)
    return (weights.coherent_gain * np.sqrt(load)).sum(axis=0)


def model_rate_denominator(modes, power_ir, power_er, weights, params):
    """Coherent amplitude and SINR denominator per IR."""
    rho = params.rho_d
    modes = np.asarray(modes, dtype=float)
    amp = model_coherent_amp(modes, power_ir, weights)
    stream_load = (
        modes * np.asarray(power_ir).sum(axis=1)
        + (1.0 - modes) * np.asarray(power_er).sum(axis=1)
    )
    den = 1.0 + rho * (stream_load @ weights.ir_error)
    for k, mates in enumerate(weights.copilot_ir):
        for kp in mates:
            den[k] += rho * amp[kp] ** 2
    return amp, den


def model_sinr(modes, power_ir, power_er, weights, params):
    """Effective SINR per IR; coincides with the closed form at binary modes."""
    amp, den = model_rate_denominator(
        modes, power_ir, power_er, weights, params
    )
    return params.rho_d * amp**2 / den


def model_se(modes, power_ir, power_er, weights, params):
    """Spectral efficiency per IR from the relaxed model."""
    sinr = model_sinr(modes, power_ir, power_er, weights, params)
    return params.prelog * np.log2(1.0 + sinr)


def relaxed_objective(modes, harvest_targets, lam_pen):
    """Sum of harvest targets minus the binarity penalty."""
    modes = np.asarray(modes, dtype=float)
    return float(
        np.sum(harvest_targets) - lam_pen * np.sum(modes - modes**2)
    )


def _qos_arrays(params, num_ir, num_er):
    if params.qos_se is None:
        rate = np.zeros(num_ir)
    else:
        rate = np.broadcast_to(
            np.asarray(params.qos_se, dtype=float), (num_ir,)
        ).copy()
    if params.qos_energy is None:
        gamma = np.zeros(num_er)
    else:
        gamma = np.broadcast_to(
            np.asarray(params.qos_energy, dtype=float), (num_er,)
        ).copy()
    return rate, gamma


def _sinr_thresholds(params, num_ir):
    rate, _ = _qos_arrays(params, num_ir, 0)
    return 2.0 ** (rate / params.prelog) - 1.0


# --- the SCA linearization point ---


@dataclass(frozen=True)
class ScaState:
    """One linearization point of the mode-and-power SCA.

    coherent_amp is the per-IR amplitude the rate surrogate is expanded
    around, power_gap the per-AP information-minus-energy power total, and
    mode_swing the bracket change per unit of mode at fixed powers (the
    coefficient the harvest surrogate linearizes against).
    """

    iteration: int
    modes: np.ndarray
    power_ir: np.ndarray
    power_er: np.ndarray
    harvest_targets: np.ndarray
    lam_pen: float
    objective: float
    coherent_amp: np.ndarray
    power_gap: np.ndarray
    mode_swing: np.ndarray

    @classmethod
    def from_point(cls, iteration, modes, power_ir, power_er,
                   harvest_targets, weights, lam_pen):
        modes = np.asarray(modes, dtype=float).copy()
        power_ir = np.asarray(power_ir, dtype=float).reshape(
            weights.num_aps, weights.num_ir).copy()
        power_er = np.asarray(power_er, dtype=float).reshape(
            weights.num_aps, weights.num_er).copy()
        harvest_targets = np.asarray(harvest_targets, dtype=float).copy()
        amp = model_coherent_amp(modes, power_ir, weights)
        gap = power_ir.sum(axis=1) - power_er.sum(axis=1)
        swing = (
            power_ir.sum(axis=1)[:, None] * weights.leak
            - np.einsum("mp,mjp->mj", power_er, weights.beam)
        )
        obj = relaxed_objective(modes, harvest_targets, lam_pen)
        return cls(
            iteration=iteration, modes=modes, power_ir=power_ir,
            power_er=power_er, harvest_targets=harvest_targets,
            lam_pen=lam_pen, objective=obj, coherent_amp=amp,
            power_gap=gap, mode_swing=swing,
        )


# --- variable packing ---


class VarLayout:
    """Packs (modes, power_ir, power_er, targets) into one real vector.

    With fixed_modes given, the mode block disappears and every power
    entry whose AP is switched away from that receiver class is dropped
    from the vector entirely (it is identically zero in the reduced
    problem, and keeping it would leave the barrier no interior).
    """

    def __init__(self, num_aps, num_ir, num_er, fixed_modes=None):
        self.num_aps = num_aps
        self.num_ir = num_ir
        self.num_er = num_er
        if fixed_modes is None:
            self.fixed_modes = None
        else:
            self.fixed_modes = np.asarray(fixed_modes, dtype=float).copy()
            if not np.all(np.isin(self.fixed_modes, (0.0, 1.0))):
                raise ValueError("fixed modes must be exactly binary")
        pos = 0
        self.mode_pos = np.full(num_aps, -1, dtype=int)
        if fixed_modes is None:
            self.mode_pos = np.arange(num_aps)
            pos = num_aps
        self.ir_pos = np.full((num_aps, num_ir), -1, dtype=int)
        self.er_pos = np.full((num_aps, num_er), -1, dtype=int)
        for m in range(num_aps):
            if fixed_modes is None or self.fixed_modes[m] > 0.5:
                for k in range(num_ir):
                    self.ir_pos[m, k] = pos
                    pos += 1
        for m in range(num_aps):
            if fixed_modes is None or self.fixed_modes[m] < 0.5:
                for j in range(num_er):
                    self.er_pos[m, j] = pos
                    pos += 1
        self.eps_pos = np.arange(pos, pos + num_er)
        pos += num_er
        self.num_vars = pos

    def split(self, x):
        """Unpack into full-shape (modes, power_ir, power_er, targets)."""
        x = np.asarray(x, dtype=float)
        if self.fixed_modes is None:
            modes = x[self.mode_pos].copy()
        else:
            modes = self.fixed_modes.copy()
        power_ir = np.zeros((self.num_aps, self.num_ir))
        mask = self.ir_pos >= 0
        power_ir[mask] = x[self.ir_pos[mask]]
        power_er = np.zeros((self.num_aps, self.num_er))
        mask = self.er_pos >= 0
        power_er[mask] = x[self.er_pos[mask]]
        return modes, power_ir, power_er, x[self.eps_pos].copy()

    def pack(self, modes, power_ir, power_er, targets):
        x = np.zeros(self.num_vars)
        if self.fixed_modes is None:
            x[self.mode_pos] = modes
        mask = self.ir_pos >= 0
        x[self.ir_pos[mask]] = np.asarray(power_ir)[mask]
        mask = self.er_pos >= 0
        x[self.er_pos[mask]] = np.asarray(power_er)[mask]
        x[self.eps_pos] = targets
        return x


# --- smooth concave inequality constraints g(x) >= 0 ---


class Constraint:
    """A smooth concave inequality g(x) >= 0 for the barrier solver.

    value(x) returns g (minus infinity outside the log domain); parts(x)
    returns (g, gradient, hessian-or-None) and is only called at points
    where value is finite.  scale normalizes the constraint for the
    solver's stopping tests and is frozen when the subproblem is built.
    """

    def __init__(self, name, value, parts, kind="structural", scale=1.0):
        self.name = name
        self.value = value
        self.parts = parts
        self.kind = kind
        self.scale = scale


def affine_constraint(name, linear, offset, kind="structural"):
    """g(x) = linear @ x + offset."""
    w = np.asarray(linear, dtype=float).copy()
    b = float(offset)

    def value(x):
        return float(w @ x) + b

    def parts(x):
        return float(w @ x) + b, w, None

    return Constraint(name, value, parts, kind)


def quadratic_constraint(name, offset, linear, curvature, kind="structural"):
    """g(x) = offset + linear @ x - x @ curvature @ x, curvature PSD."""
    w = np.asarray(linear, dtype=float).copy()
    p = np.asarray(curvature, dtype=float)
    p = 0.5 * (p + p.T)
    h = -2.0 * p
    b = float(offset)

    def value(x):
        return b + float(w @ x) - float(x @ p @ x)

    def parts(x):
        return b + float(w @ x) - float(x @ p @ x), w - 2.0 * (p @ x), h

    return Constraint(name, value, parts, kind)


def _box_lower(name, idx, bound, n):
    w = np.zeros(n)
    w[idx] = 1.0
    return affine_constraint(name, w, -float(bound), kind="box")


def _box_upper(name, idx, bound, n):
    w = np.zeros(n)
    w[idx] = -1.0
    return affine_constraint(name, w, float(bound), kind="box")


def _harvest_constraint(j, layout, state, weights, params):
    """Tangent surrogate of 4 * (q_watts_j - Xi(target_j)) >= 0."""
    m_ap = layout.num_aps
    n = layout.num_vars
    sig = float(params.sigma_n2)
    rho = float(params.rho_d)
    gu = np.zeros((m_ap, n))
    gv = np.zeros((m_ap, n))
    cu = np.zeros(m_ap)
    cv = np.zeros(m_ap)
    w_beam = np.zeros(n)
    for m in range(m_ap):
        mp = layout.mode_pos[m]
        if mp >= 0:
            gu[m, mp] = 1.0
            gv[m, mp] = 1.0
        else:
            cu[m] = layout.fixed_modes[m]
            cv[m] = layout.fixed_modes[m]
        for k in range(layout.num_ir):
            p = layout.ir_pos[m, k]
            if p >= 0:
                gu[m, p] = weights.leak[m, j]
                gv[m, p] = -weights.leak[m, j]
        for jp in range(layout.num_er):
            p = layout.er_pos[m, jp]
            if p >= 0:
                gu[m, p] = -weights.beam[m, j, jp]
                gv[m, p] = weights.beam[m, j, jp]
                w_beam[p] += 4.0 * sig * rho * weights.beam[m, j, jp]
    u0 = state.modes + state.mode_swing[:, j]
    lin = w_beam + 2.0 * sig * rho * (gu.T @ u0)
    const = 4.0 * sig + sig * rho * (2.0 * float(u0 @ cu) - float(u0 @ u0))
    h0 = -2.0 * sig * rho * (gv.T @ gv)
    ep = int(layout.eps_pos[j])
    phi, xi, chi = params.phi, params.xi, params.chi
    off = 1.0 - params.omega
    t0 = float(raw_logistic_target(state.harvest_targets[j], params))

    def _target(x):
        return off * x[ep] + phi * params.omega

    def value(x):
        t = _target(x)
        if t >= phi:
            return -np.inf
        v = gv @ x + cv
        bound = chi - (math.log((phi - t) / t0) - (t - t0) / t0) / xi
        return (
            float(lin @ x) + const - 4.0 * bound
            - sig * rho * float(v @ v)
        )

    def parts(x):
        t = _target(x)
        v = gv @ x + cv
        bound = chi - (math.log((phi - t) / t0) - (t - t0) / t0) / xi
        val = (
            float(lin @ x) + const - 4.0 * bound
            - sig * rho * float(v @ v)
        )
        grad = lin - 2.0 * sig * rho * (gv.T @ v)
        grad[ep] += -4.0 * off / xi * (1.0 / (phi - t) + 1.0 / t0)
        hess = h0.copy()
        hess[ep, ep] += -4.0 * off**2 / xi / (phi - t) ** 2
        return val, grad, hess

    return Constraint(f"harvest[{j}]", value, parts)


def _amp_tangent(k, layout, state, weights):
    """Gradient of the coherent amplitude of IR k at the state point."""
    grad = np.zeros(layout.num_vars)
    for m in range(layout.num_aps):
        p = layout.ir_pos[m, k]
        if p < 0:
            continue
        a = state.modes[m]
        e = state.power_ir[m, k]
        s = math.sqrt(max(a * e, 0.0))
        alpha = weights.coherent_gain[m, k]
        mp = layout.mode_pos[m]
        if s == 0.0:
            continue
        if mp >= 0:
            grad[mp] = alpha * e / (2.0 * s)
        grad[p] = alpha * a / (2.0 * s)
    return grad


def _rate_constraint(k, layout, state, weights, params, threshold):
    """Tangent surrogate of 4 * (rho q_k^2 / T_k - denominator_k) >= 0."""
    m_ap = layout.num_aps
    n = layout.num_vars
    rho = float(params.rho_d)
    wt = rho * weights.ir_error[:, k]
    gw = np.zeros((m_ap, n))
    gvv = np.zeros((m_ap, n))
    cw = np.zeros(m_ap)
    cvv = np.zeros(m_ap)
    w_load = np.zeros(n)
    for m in range(m_ap):
        mp = layout.mode_pos[m]
        if mp >= 0:
            gw[m, mp] = 1.0
            gvv[m, mp] = 1.0
        else:
            cw[m] = layout.fixed_modes[m]
            cvv[m] = layout.fixed_modes[m]
        for kp in range(layout.num_ir):
            p = layout.ir_pos[m, kp]
            if p >= 0:
                gw[m, p] = 1.0
                gvv[m, p] = -1.0
        for jp in range(layout.num_er):
            p = layout.er_pos[m, jp]
            if p >= 0:
                gw[m, p] = -1.0
                gvv[m, p] = 1.0
                w_load[p] += -4.0 * wt[m]
    v0 = state.modes - state.power_gap
    lin = 2.0 * (gvv.T @ (wt * v0)) + w_load
    const = -4.0 + 2.0 * float((wt * v0) @ cvv) - float(wt @ (v0 * v0))
    h0 = -2.0 * gw.T @ (wt[:, None] * gw)
    live = [m for m in range(m_ap) if layout.ir_pos[m, k] >= 0]
    a_pos = np.array([layout.mode_pos[m] for m in live], dtype=int)
    e_pos = np.array([layout.ir_pos[m, k] for m in live], dtype=int)
    a_fix = (
        None if layout.fixed_modes is None else layout.fixed_modes[live]
    )
    alpha = weights.coherent_gain[live, k]
    q0 = float(state.coherent_amp[k])
    coef = 4.0 * rho * q0 / threshold
    tangents = []
    x0 = layout.pack(
        state.modes, state.power_ir, state.power_er, state.harvest_targets
    )
    for kp in weights.copilot_ir[k]:
        g_kp = _amp_tangent(kp, layout, state, weights)
        b_kp = float(state.coherent_amp[kp]) - float(g_kp @ x0)
        tangents.append((g_kp, b_kp))
        h0 -= 8.0 * rho * np.outer(g_kp, g_kp)

    def _amp_parts(x):
        a = x[a_pos] if a_fix is None else a_fix
        e = x[e_pos]
        s = np.sqrt(a * e)
        return a, e, s

    def value(x):
        a, e, s = _amp_parts(x)
        q = float(alpha @ s)
        w = gw @ x + cw
        val = (
            coef * (2.0 * q - q0) + float(lin @ x) + const
            - float(wt @ (w * w))
        )
        for g_kp, b_kp in tangents:
            val -= 4.0 * rho * (float(g_kp @ x) + b_kp) ** 2
        return val

    def parts(x):
        a, e, s = _amp_parts(x)
        q = float(alpha @ s)
        w = gw @ x + cw
        val = (
            coef * (2.0 * q - q0) + float(lin @ x) + const
            - float(wt @ (w * w))
        )
        grad = lin - 2.0 * (gw.T @ (wt * w))
        hess = h0.copy()
        half = coef * 2.0
        d_e = alpha * a / (2.0 * s)
        grad[e_pos] += half * d_e
        curv = half * alpha / (4.0 * s**3)
        np.add.at(hess, (e_pos, e_pos), -curv * a**2)
        if a_fix is None:
            d_a = alpha * e / (2.0 * s)
            grad[a_pos] += half * d_a
            np.add.at(hess, (a_pos, a_pos), -curv * e**2)
            np.add.at(hess, (a_pos, e_pos), curv * a * e)
            np.add.at(hess, (e_pos, a_pos), curv * a * e)
        for g_kp, b_kp in tangents:
            qh = float(g_kp @ x) + b_kp
            val -= 4.0 * rho * qh**2
            grad -= 8.0 * rho * qh * g_kp
        return val, grad, hess

    return Constraint(f"rate[{k}]", value, parts)


# --- the convex subproblem container ---


@dataclass
class ConvexSubproblem:
    """One tangent inner approximation, ready for the barrier solver.

    maximize/offset define the affine surrogate objective; x_point is the
    linearization point; slater a strictly feasible start (the point
    itself when point_feasible, a restoration result otherwise);
    tangency_gap the worst scaled mismatch between each surrogate and the
    expression it linearizes, evaluated at x_point.
    """

    num_vars: int
    maximize: np.ndarray
    offset: float
    constraints: list
    x_point: np.ndarray
    point_feasible: bool
    slater: object = None
    layout: object = None
    tangency_gap: float = 0.0

    def residuals(self, x):
        return np.array([c.value(x) / c.scale for c in self.constraints])

    def objective(self, x):
        return float(self.maximize @ np.asarray(x, dtype=float)) + self.offset


def _apply_scales(constraints, x0):
    for c in constraints:
        v, g, _ = c.parts(x0)
        c.scale = float(max(abs(v), np.abs(g).max(), 1e-12))


def build_subproblem(state, weights, params, fix_modes=False):
    """Assemble the tangent convex subproblem around an SCA state.

    With fix_modes the mode block is frozen at the (binary) state modes
    and the problem reduces to the power-and-target polish.  The builder
    flags (point_feasible=False) when the linearization point does not
    strictly satisfy its own surrogates, in which case the caller should
    run restore_feasible before solving.
    """
    if weights.num_er == 0:
        raise ValueError("nothing to optimize without energy receivers")
    rate_qos, gamma = _qos_arrays(params, weights.num_ir, weights.num_er)
    thresholds = _sinr_thresholds(params, weights.num_ir)
    if fix_modes:
        layout = VarLayout(
            weights.num_aps, weights.num_ir, weights.num_er,
            fixed_modes=state.modes,
        )
    else:
        layout = VarLayout(weights.num_aps, weights.num_ir, weights.num_er)
    n = layout.num_vars
    x0 = layout.pack(
        state.modes, state.power_ir, state.power_er, state.harvest_targets
    )
    cons = []
    for j in range(weights.num_er):
        cons.append(_harvest_constraint(j, layout, state, weights, params))
    for k in range(weights.num_ir):
        if thresholds[k] > 0.0:
            cons.append(
                _rate_constraint(k, layout, state, weights, params,
                                 thresholds[k])
            )
    for m in range(weights.num_aps):
        mp = layout.mode_pos[m]
        live_ir = layout.ir_pos[m][layout.ir_pos[m] >= 0]
        live_er = layout.er_pos[m][layout.er_pos[m] >= 0]
        if mp >= 0:
            a0 = state.modes[m]
            w = np.zeros(n)
            w[mp] = 2.0 * a0
            w[live_ir] = -1.0
            cons.append(
                affine_constraint(f"info_budget[{m}]", w, -a0 * a0)
            )
            w = np.zeros(n)
            w[live_er] = -1.0
            p = np.zeros((n, n))
            p[mp, mp] = 1.0
            cons.append(quadratic_constraint(f"energy_budget[{m}]", 1.0, w, p))
            cons.append(_box_lower(f"mode_floor[{m}]", mp, 0.0, n))
            cons.append(_box_upper(f"mode_cap[{m}]", mp, 1.0, n))
        else:
            if live_ir.size:
                w = np.zeros(n)
                w[live_ir] = -1.0
                cons.append(affine_constraint(f"info_budget[{m}]", w, 1.0))
            if live_er.size:
                w = np.zeros(n)
                w[live_er] = -1.0
                cons.append(affine_constraint(f"energy_budget[{m}]", w, 1.0))
        for p in live_ir:
            cons.append(_box_lower(f"info_floor[{m}]", int(p), 0.0, n))
        for p in live_er:
            cons.append(_box_lower(f"energy_floor[{m}]", int(p), 0.0, n))
    for j in range(weights.num_er):
        cons.append(
            _box_lower(f"target_floor[{j}]", int(layout.eps_pos[j]),
                       gamma[j], n)
        )
    _apply_scales(cons, x0)
    c = np.zeros(n)
    c[layout.eps_pos] = 1.0
    if not fix_modes:
        c[layout.mode_pos] = -state.lam_pen * (1.0 - 2.0 * state.modes)
        offset = -state.lam_pen * float(np.sum(state.modes**2))
    else:
        offset = 0.0
    gap = 0.0
    q_watts = model_q_watts(
        state.modes, state.power_ir, state.power_er, weights, params
    )
    amp, den = model_rate_denominator(
        state.modes, state.power_ir, state.power_er, weights, params
    )
    targets_raw = raw_logistic_target(state.harvest_targets, params)
    for con in cons:
        if con.name.startswith("harvest["):
            j = int(con.name[8:-1])
            true4 = 4.0 * (
                q_watts[j] - inverse_logistic(targets_raw[j], params)
            )
        elif con.name.startswith("rate["):
            k = int(con.name[5:-1])
            true4 = 4.0 * (
                params.rho_d * amp[k] ** 2 / thresholds[k] - den[k]
            )
        else:
            continue
        gap = max(gap, abs(con.value(x0) - true4) / con.scale)
    res = np.array([con.value(x0) / con.scale for con in cons])
    feasible = bool(np.all(res > 0.0))
    return ConvexSubproblem(
        num_vars=n, maximize=c, offset=offset, constraints=cons,
        x_point=x0, point_feasible=feasible,
        slater=x0 if feasible else None, layout=layout, tangency_gap=gap,
    )


# --- the log-barrier Newton subsolver ---


class SubproblemError(RuntimeError):
    """Solver ran out of iterations; .best carries the last iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SubproblemInfeasibleError(RuntimeError):
    """Restoration could not find a strictly feasible point."""

    def __init__(self, message, margin=None):
        super().__init__(message)
        self.margin = margin


@dataclass
class SubproblemSolution:
    """Primal point, barrier multipliers, and the scaled KKT residuals."""

    x: np.ndarray
    duals: np.ndarray
    objective: float
    kkt_stationarity: float
    kkt_complementarity: float
    kkt_residual: float
    newton_steps: int
    barrier: float


def _barrier_value(c, cons, x, mu):
    with np.errstate(all="ignore"):
        vals = np.array([con.value(x) / con.scale for con in cons])
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0.0):
        return None, vals
    return -float(c @ x) - mu * np.log(vals).sum(), vals


def solve_subproblem(problem, tol=1e-6, max_steps=4000):
    """Deterministic log-barrier Newton solve of a convex subproblem.

    Runs a fixed decade barrier schedule with damped Newton steps and
    backtracking, stopping each stage on the Newton decrement.  Returns
    the primal point with the barrier multipliers as duals; kkt_residual
    is the max of scaled stationarity, complementarity, and primal
    violation.  Raises SubproblemError on step exhaustion (best iterate
    attached) and ValueError without a strictly feasible start.
    """
    cons = problem.constraints
    n = problem.num_vars
    m = len(cons)
    cscale = max(1.0, float(np.abs(problem.maximize).max()))
    c = problem.maximize / cscale
    if problem.slater is None:
        raise ValueError("subproblem has no strictly feasible start")
    x = np.asarray(problem.slater, dtype=float).copy()
    phi, vals = _barrier_value(c, cons, x, 1.0)
    if phi is None:
        raise ValueError("slater start is not strictly feasible")
    mu = 1.0
    mu_min = tol * 1e-2
    steps = 0
    scales = np.array([con.scale for con in cons])
    grads = np.empty((m, n))
    g_tol = 0.05 * tol
    while True:
        phi, vals = _barrier_value(c, cons, x, mu)
        for _ in range(120):
            hess_sum = np.zeros((n, n))
            for i, con in enumerate(cons):
                v, g, h = con.parts(x)
                vals[i] = v / con.scale
                grads[i] = g / con.scale
                if h is not None:
                    hess_sum -= (mu / vals[i]) * (h / con.scale)
            lam = mu / vals
            grad_phi = -c - grads.T @ lam
            if float(np.abs(grad_phi).max()) <= g_tol:
                break
            hess_phi = (
                hess_sum + (grads * (lam**2 / mu)[:, None]).T @ grads
            )
            # Jacobi-normalize before solving: near a corner the diagonal
            # spans many decades and a ridge sized to the largest entry
            # would drown the small-curvature directions.
            dsc = np.sqrt(np.maximum(hess_phi.diagonal(), 1e-30))
            hn = hess_phi / dsc[:, None] / dsc[None, :]
            hn[np.diag_indices_from(hn)] += 1e-13
            rhs = -grad_phi / dsc
            try:
                step = np.linalg.solve(hn, rhs) / dsc
            except np.linalg.LinAlgError:
                hn[np.diag_indices_from(hn)] += 1e-6
                step = np.linalg.solve(hn, rhs) / dsc
            decrement = float(-grad_phi @ step)
            if decrement < 0.0:
                step = -grad_phi
                decrement = float(grad_phi @ grad_phi)
            if 0.5 * decrement <= 1e-16:
                break
            slope = float(grad_phi @ step)
            t = 1.0
            accepted = False
            while t >= 1e-16:
                cand = x + t * step
                phi_t, vals_t = _barrier_value(c, cons, cand, mu)
                if phi_t is not None and phi_t <= phi + 0.25 * t * slope:
                    x = cand
                    phi = phi_t
                    vals = vals_t
                    accepted = True
                    break
                t *= 0.5
            steps += 1
            if steps > max_steps:
                best = _solution_from(problem, x, mu, cscale, scales, cons,
                                      steps)
                raise SubproblemError(
                    f"barrier solve exhausted {max_steps} Newton steps "
                    f"(kkt {best.kkt_residual:.2e})", best=best,
                )
            if not accepted:
                break
            if t * float(np.abs(step).max()) <= 1e-14 * (
                1.0 + float(np.abs(x).max())
            ):
                break
        if mu <= mu_min:
            break
        mu = max(mu / 10.0, mu_min)
    return _solution_from(problem, x, mu, cscale, scales, cons, steps)


def _solution_from(problem, x, mu, cscale, scales, cons, steps):
    """Assemble the solution with least-squares refined dual certificates."""
    c = problem.maximize / cscale
    n = problem.num_vars
    m = len(cons)
    vals = np.empty(m)
    grads = np.empty((m, n))
    for i, con in enumerate(cons):
        v, g, _ = con.parts(x)
        vals[i] = v / con.scale
        grads[i] = g / con.scale
    if m:
        # Recover duals by nonnegative least squares.  Three candidate
        # fits, keeping whichever certifies the smallest KKT residual:
        # the plain fit (best stationarity, can dump weight on slack
        # constraints), an active-set fit, and a residual-scaled fit in
        # eta = lam * g coordinates, where the central-path duals are the
        # constant vector mu and complementarity is max(eta) by
        # construction.
        candidates = []
        lam_full, _ = nnls(grads.T, -c)
        candidates.append(lam_full)
        act = vals <= 1e-4
        if act.any() and not act.all():
            lam_act = np.zeros(m)
            fit, _ = nnls(grads[act].T, -c)
            lam_act[act] = fit
            candidates.append(lam_act)
        cols = grads / vals[:, None]
        eta, _ = nnls(cols.T, -c)
        candidates.append(eta / vals)
        lam = None
        r_stat = r_comp = np.inf
        for cand in candidates:
            stat = float(np.abs(c + grads.T @ cand).max())
            comp = float(np.max(cand * np.abs(vals)))
            if max(stat, comp) < max(r_stat, r_comp):
                lam, r_stat, r_comp = cand, stat, comp
        r_prim = float(max(0.0, -vals.min()))
    else:
        lam = np.zeros(0)
        r_stat = float(np.abs(c).max())
        r_comp = r_prim = 0.0
    duals = lam * cscale / scales
    return SubproblemSolution(
        x=x.copy(), duals=duals, objective=problem.objective(x),
        kkt_stationarity=r_stat, kkt_complementarity=r_comp,
        kkt_residual=max(r_stat, r_comp, r_prim), newton_steps=steps,
        barrier=mu,
    )


def _lifted(inner, n):
    """Wrap a scaled constraint with a shared slack variable appended."""

    def value(y):
        return inner.value(y[:n]) / inner.scale + y[n]

    def parts(y):
        v, g, h = inner.parts(y[:n])
        grad = np.zeros(n + 1)
        grad[:n] = g / inner.scale
        grad[n] = 1.0
        hess = None
        if h is not None:
            hess = np.zeros((n + 1, n + 1))
            hess[:n, :n] = h / inner.scale
        return v / inner.scale + y[n], grad, hess

    return Constraint(inner.name + "+slack", value, parts, inner.kind, 1.0)


def restore_feasible(problem, margin=1e-7, tol=1e-8):
    """Slack-minimization returning a strictly feasible start.

    Lifts every scaled constraint by a shared slack s, minimizes s, and
    accepts when the optimum slack is below half the margin (the point
    then clears every constraint by at least margin/2 in scaled units).
    Raises SubproblemInfeasibleError when no such point exists.
    """
    n = problem.num_vars
    cons = [_lifted(con, n) for con in problem.constraints]
    w = np.zeros(n + 1)
    w[n] = 1.0
    cons.append(affine_constraint("slack_floor", w, 0.0, kind="box"))
    shifted = []
    for con in cons[:-1]:
        inner_value, inner_parts = con.value, con.parts

        def value(y, _v=inner_value):
            return _v(y) - margin

        def parts(y, _p=inner_parts):
            v, g, h = _p(y)
            return v - margin, g, h

        shifted.append(Constraint(con.name, value, parts, con.kind, 1.0))
    shifted.append(cons[-1])
    with np.errstate(all="ignore"):
        base = np.array([
            con.value(problem.x_point) / con.scale
            for con in problem.constraints
        ])
    worst = float(np.min(base[np.isfinite(base)])) if base.size else 0.0
    y0 = np.concatenate([
        problem.x_point, [max(margin - worst, margin) + 1.0]
    ])
    c = np.zeros(n + 1)
    c[n] = -1.0
    lifted_problem = ConvexSubproblem(
        num_vars=n + 1, maximize=c, offset=0.0, constraints=shifted,
        x_point=y0, point_feasible=True, slater=y0,
    )
    sol = solve_subproblem(lifted_problem, tol=tol)
    slack = float(sol.x[n])
    if slack > 0.5 * margin:
        raise SubproblemInfeasibleError(
            f"restoration stalled at slack {slack:.3e} (margin {margin:.1e})",
            margin=slack,
        )
    return sol.x[:n].copy()


# --- the SCA loop ---


@dataclass
class TraceRow:
    """One SCA iteration: objective, worst violation, binarity, solve health."""

    iteration: int
    objective: float
    max_violation: float
    binarity_gap: float
    tangency_gap: float
    kkt_residual: float


SCA_TRACE_FIELDS = ("n", "objective", "max_residual", "mode_gap")


def write_sca_trace_csv(trace, path):
    """Write the per-iteration SCA trace with full-precision floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCA_TRACE_FIELDS)
        for row in trace:
            writer.writerow([
                row.iteration, repr(float(row.objective)),
                repr(float(row.max_violation)),
                repr(float(row.binarity_gap)),
            ])


@dataclass
class ScaResult:
    """Outcome of the full SCA run plus rounding and polish."""

    decision: "_performance.ResourceDecision"
    trace: list
    final_state: ScaState
    pre_round_state: ScaState
    converged: bool
    kkt_residuals: list
    polish_tangency: float


def default_initial(weights, params):
    """Half-open modes with half of each class budget split equally."""
    m_ap = weights.num_aps
    modes = np.full(m_ap, 0.5)
    power_ir = np.full(
        (m_ap, weights.num_ir),
        0.5 * 0.25 / max(weights.num_ir, 1),
    )
    power_er = np.full(
        (m_ap, weights.num_er),
        0.5 * 0.75 / max(weights.num_er, 1),
    )
    targets = _initial_targets(modes, power_ir, power_er, weights, params)
    return modes, power_ir, power_er, targets


def _initial_targets(modes, power_ir, power_er, weights, params):
    _, gamma = _qos_arrays(params, weights.num_ir, weights.num_er)
    harvested = model_harvest(modes, power_ir, power_er, weights, params)
    cap = params.phi * (1.0 - 1e-9)
    return np.clip(0.999 * harvested, gamma, cap)


def relaxed_violation(state, weights, params):
    """Worst scaled violation of the relaxed constraints at a state."""
    rate_qos, gamma = _qos_arrays(params, weights.num_ir, weights.num_er)
    q_watts = model_q_watts(
        state.modes, state.power_ir, state.power_er, weights, params
    )
    targets_raw = raw_logistic_target(state.harvest_targets, params)
    worst = 0.0
    for j in range(weights.num_er):
        need = inverse_logistic(targets_raw[j], params)
        scale = max(q_watts[j], params.sigma_n2)
        worst = max(worst, (need - q_watts[j]) / scale)
    se = model_se(state.modes, state.power_ir, state.power_er, weights, params)
    for k in range(weights.num_ir):
        worst = max(worst, (rate_qos[k] - se[k]) / max(1.0, rate_qos[k]))
    spent_i = state.power_ir.sum(axis=1)
    spent_e = state.power_er.sum(axis=1)
    worst = max(worst, float(np.max(spent_i - state.modes**2, initial=0.0)))
    worst = max(
        worst, float(np.max(spent_e - (1.0 - state.modes**2), initial=0.0))
    )
    worst = max(worst, float(np.max(-state.modes, initial=0.0)))
    worst = max(worst, float(np.max(state.modes - 1.0, initial=0.0)))
    worst = max(worst, float(np.max(gamma - state.harvest_targets,
                                    initial=0.0)))
    worst = max(worst, float(np.max(-state.power_ir, initial=0.0)))
    worst = max(worst, float(np.max(-state.power_er, initial=0.0)))
    return worst


def original_residuals(decision, weights, params):
    """Residual arrays of the original binary-mode constraints.

    harvest: harvested power minus its floor per ER; rate: spectral
    efficiency minus its floor per IR; power: per-AP headroom of the
    mode-gated budget.  All are nonnegative exactly when the decision is
    feasible for the unrelaxed problem.
    """
    rate_qos, gamma = _qos_arrays(params, weights.num_ir, weights.num_er)
    modes = np.asarray(decision.modes, dtype=float)
    harvested = model_harvest(
        modes, decision.power_ir, decision.power_er, weights, params
    )
    se = model_se(
        modes, decision.power_ir, decision.power_er, weights, params
    )
    spent = (
        modes * decision.power_ir.sum(axis=1)
        + (1.0 - modes) * decision.power_er.sum(axis=1)
    )
    return {
        "harvest": harvested - gamma,
        "rate": se - rate_qos,
        "power": 1.0 - spent,
    }


def _binarity(modes):
    return float(np.max(np.abs(modes - np.round(modes)), initial=0.0))


def _project_binary(modes_bin, power_ir, power_er):
    """Zero the off-class powers and keep sums strictly inside the budget."""
    shrink = 1.0 - 1e-9
    ei = power_ir * modes_bin[:, None]
    ee = power_er * (1.0 - modes_bin)[:, None]
    for m in range(modes_bin.shape[0]):
        cap_i = modes_bin[m] * shrink
        cap_e = (1.0 - modes_bin[m]) * shrink
        si = ei[m].sum()
        if si > cap_i and si > 0.0:
            ei[m] *= cap_i / si
        se = ee[m].sum()
        if se > cap_e and se > 0.0:
            ee[m] *= cap_e / se
    return ei, ee


def _ensure_feasible_state(state, weights, params, fix_modes=False):
    """Build the subproblem, restoring the point first if it is infeasible."""
    prob = build_subproblem(state, weights, params, fix_modes=fix_modes)
    if prob.point_feasible:
        return prob, state
    start = restore_feasible(prob)
    modes, power_ir, power_er, targets = prob.layout.split(start)
    state = ScaState.from_point(
        state.iteration, modes, power_ir, power_er, targets, weights,
        state.lam_pen,
    )
    prob = build_subproblem(state, weights, params, fix_modes=fix_modes)
    if not prob.point_feasible:
        raise SubproblemInfeasibleError(
            "restored point still violates its own surrogates"
        )
    return prob, state


def sca_loop(stats, params, lam_pen=10.0, max_iters=100, tol=1e-4,
             initial=None, trace_path=None):
    """Run the full SCA with rounding and polish; returns an ScaResult.

    initial may be None (the default half-open start), an ScaState, or a
    (modes, power_ir, power_er) triple whose harvest targets are derived
    from the point.  The trace rows cover the relaxed iterations; the
    polish outcome lives in final_state and decision.
    """
    weights = closed_form_weights(stats)
    if weights.num_er == 0:
        raise ValueError("nothing to optimize without energy receivers")
    if initial is None:
        point = default_initial(weights, params)
    elif isinstance(initial, ScaState):
        point = (initial.modes, initial.power_ir, initial.power_er,
                 initial.harvest_targets)
    else:
        modes, power_ir, power_er = initial
        targets = _initial_targets(
            np.asarray(modes, dtype=float), power_ir, power_er, weights,
            params,
        )
        point = (modes, power_ir, power_er, targets)
    state = ScaState.from_point(0, *point, weights, lam_pen)
    trace = []
    kkts = []
    converged = False
    for n in range(max_iters):
        prob, state = _ensure_feasible_state(state, weights, params)
        sol = solve_subproblem(prob)
        kkts.append(sol.kkt_residual)
        if prob.objective(sol.x) <= prob.objective(prob.x_point):
            # The subsolver could not improve on the linearization point
            # beyond its duality gap: the point is SCA-stationary.  The
            # true objective majorizes the surrogate with equality here,
            # so stopping (rather than stepping) keeps the trace monotone.
            converged = True
            break
        modes, power_ir, power_er, targets = prob.layout.split(sol.x)
        new_state = ScaState.from_point(
            n + 1, modes, power_ir, power_er, targets, weights, lam_pen
        )
        trace.append(TraceRow(
            iteration=n, objective=new_state.objective,
            max_violation=relaxed_violation(new_state, weights, params),
            binarity_gap=_binarity(new_state.modes),
            tangency_gap=prob.tangency_gap, kkt_residual=sol.kkt_residual,
        ))
        done = abs(new_state.objective - state.objective) <= tol
        state = new_state
        if done:
            converged = True
            break
    pre_round = state
    modes_bin = np.where(state.modes >= 0.5, 1.0, 0.0)
    power_ir, power_er = _project_binary(
        modes_bin, state.power_ir, state.power_er
    )
    targets = _initial_targets(modes_bin, power_ir, power_er, weights, params)
    polish_state = ScaState.from_point(
        state.iteration + 1, modes_bin, power_ir, power_er, targets,
        weights, lam_pen,
    )
    prob, polish_state = _ensure_feasible_state(
        polish_state, weights, params, fix_modes=True
    )
    sol = solve_subproblem(prob)
    kkts.append(sol.kkt_residual)
    modes, power_ir, power_er, targets = prob.layout.split(sol.x)
    final_state = ScaState.from_point(
        polish_state.iteration + 1, modes, power_ir, power_er, targets,
        weights, lam_pen,
    )
    decision = _performance.ResourceDecision(
        modes=modes_bin, power_ir=power_ir, power_er=power_er
    )
    if trace_path is not None:
        write_sca_trace_csv(trace, trace_path)
    return ScaResult(
        decision=decision, trace=trace, final_state=final_state,
        pre_round_state=pre_round, converged=converged, kkt_residuals=kkts,
        polish_tangency=prob.tangency_gap,
    )
