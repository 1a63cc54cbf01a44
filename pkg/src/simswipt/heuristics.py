"""Phase-profile baselines and the layer-by-layer heuristic search.

Three ways to set the metasurface phases: i.i.d. random draws (the
stochastic baseline), one common constant (the equal baseline), and a
best-of-C per-layer search that maximizes the cascade Frobenius trace
tr(F F^H), sweeping layers front to back for each access point
independently.  Also provides the random mode-selection baseline with
equal power split used to sanity-check the optimizers.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import channel as _channel
from . import performance as _performance

TWO_PI = 2.0 * np.pi

KINDS = ("rdps", "eqps", "hps")


@dataclass(frozen=True)
class PhasePolicy:
    """How to configure the stack phases for a run.

    kind is one of "rdps" (i.i.d. uniform), "eqps" (one constant) or "hps"
    (layer-by-layer best-of-candidates search); candidates is the per-layer
    search budget, only meaningful for "hps".
    """

    kind: str
    candidates: int = 100
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown phase policy kind {self.kind!r}")
        if self.candidates < 1:
            raise ValueError("candidate budget must be at least 1")


def rdps(stack, num_aps, rng):
    """I.i.d. uniform phases in [0, 2pi) for every AP, layer, and element."""
    geom = stack.geometry
    return rng.uniform(0.0, TWO_PI, (num_aps, geom.num_layers, geom.num_elements))


def eqps(stack, num_aps, constant=0.0):
    """All phases set to one common constant (wrapped into [0, 2pi))."""
    geom = stack.geometry
    value = float(constant) % TWO_PI
    return np.full((num_aps, geom.num_layers, geom.num_elements), value)


def hps_search(stack, num_aps, candidates, rng):
    """Layer-by-layer best-of-candidates phase search per AP.

    Starts from i.i.d. uniform phases drawn from rng, then visits each AP's
    layers front to back; at each visit the layer's full phase vector is
    resampled `candidates` times (other layers held fixed), the cascade
    trace tr(F F^H) is evaluated for each draw, and the best draw replaces
    the layer.  The kept configuration is always one of the drawn
    candidates; the incumbent does not compete.

    Candidate draws come from independent child generators, one per
    (AP, layer) in row-major order via rng.spawn, so enlarging the budget
    keeps every earlier candidate -- best-of-C is monotone in C under a
    common seed, per layer visit.  `candidates` may also be an explicit
    (C, S) array of phase vectors, used verbatim at every visit (the
    exhaustive micro-scale check relies on this).

    Returns (theta, trace) with theta of shape (M, L, S) and trace of shape
    (M, L) holding each visit's best objective.
    """
    geom = stack.geometry
    m_count, layers = num_aps, geom.num_layers
    theta = rng.uniform(0.0, TWO_PI, (m_count, layers, geom.num_elements))
    if isinstance(candidates, (int, np.integer)):
        if candidates < 1:
            raise ValueError("candidate budget must be at least 1")
        grid = None
        budget = int(candidates)
    else:
        grid = np.asarray(candidates, dtype=float)
        if grid.ndim != 2 or grid.shape[1] != geom.num_elements:
            raise ValueError("explicit candidates must be (C, S)")
        budget = grid.shape[0]
    children = rng.spawn(m_count * layers)
    trace = np.zeros((m_count, layers))
    for m in range(m_count):
        for ell in range(layers):
            child = children[m * layers + ell]
            if grid is None:
                draws = child.uniform(0.0, TWO_PI, (budget, geom.num_elements))
            else:
                draws = grid
            scores = np.empty(budget)
            for it in range(budget):
                theta[m, ell] = draws[it]
                _, scores[it] = _channel.sim_cascade(stack, theta[m])
            best = int(np.argmax(scores))
            theta[m, ell] = draws[best]
            trace[m, ell] = scores[best]
    return theta, trace


def apply_policy(policy, stack, num_aps, rng=None):
    """Produce phases for a policy; returns (theta, trace or None)."""
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    if policy.kind == "rdps":
        return rdps(stack, num_aps, rng), None
    if policy.kind == "eqps":
        return eqps(stack, num_aps), None
    return hps_search(stack, num_aps, policy.candidates, rng)


def rapepa(num_aps, num_ir, num_er, mode_count, delta, rng):
    """Random AP-mode draw with equal per-group power split.

    The information-AP count is drawn uniformly from the integer window
    mode_count +- delta, then clamped to [0, num_aps]; that many APs are
    chosen uniformly without replacement and everyone splits its budget
    equally across its served group.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if not 0 <= mode_count <= num_aps:
        raise ValueError("mode count outside [0, M]")
    lo, hi = mode_count - delta, mode_count + delta
    m_i = int(rng.integers(lo, hi + 1))
    m_i = min(max(m_i, 0), num_aps)
    modes = np.zeros(num_aps)
    chosen = rng.choice(num_aps, size=m_i, replace=False)
    modes[chosen] = 1.0
    return _performance.ResourceDecision.uniform(modes, num_ir, num_er)


def write_trace_csv(trace, path):
    """Objective trace as CSV rows (ap, layer, objective)."""
    trace = np.asarray(trace)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["ap", "layer", "objective"])
        for m in range(trace.shape[0]):
            for ell in range(trace.shape[1]):
                writer.writerow([m, ell, repr(float(trace[m, ell]))])
