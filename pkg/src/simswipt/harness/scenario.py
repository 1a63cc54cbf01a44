"""Scenario generation and single-realization evaluation.

One realization = drop APs and receivers in the service square, derive
large-scale gains and line-of-sight geometry, configure the metasurface
phases with the selected policy, pick AP modes and powers with the
selected allocator, and score the outcome with the closed-form report.
"""

from dataclasses import dataclass

import numpy as np

from .. import channel as _channel
from .. import drl as _drl
from .. import estimation as _estimation
from .. import heuristics as _heuristics
from .. import jappa as _jappa
from .. import performance as _performance
from .config import substream


@dataclass
class NetworkTopology:
    """Placed network: positions in meters, per-link gains and LoS."""

    ap_xyz: np.ndarray
    rx_xyz: np.ndarray
    beta: np.ndarray
    links: list
    num_ir: int


def generate_topology(cfg, rng, geom=None, num_aps=None):
    """Uniform drop over the square with three-slope gains and shadowing.

    Draw order is fixed (AP positions, receiver positions, then the
    shadowing field in one vectorized call), so a given rng state maps to
    exactly one topology.  Receivers are plan-ordered: information
    receivers first.
    """
    geom = geom or cfg.geometry()
    m_count = num_aps if num_aps is not None else cfg.get("topo.m")
    k_i, k_e = cfg.get("topo.k_i"), cfg.get("topo.k_e")
    k = k_i + k_e
    area = cfg.get("topo.area")
    kappa = cfg.get("topo.kappa")

    ap_xyz = np.column_stack([
        rng.uniform(0.0, area, (m_count, 2)),
        np.full(m_count, cfg.get("topo.ap_height")),
    ])
    rx_xyz = np.column_stack([
        rng.uniform(0.0, area, (k, 2)),
        np.full(k, cfg.get("topo.rx_height")),
    ])
    offsets = rx_xyz[None, :, :] - ap_xyz[:, None, :]
    dists = np.linalg.norm(offsets, axis=2)
    beta = _channel.three_slope_pathloss(dists, rng)

    links = []
    for m in range(m_count):
        row = []
        for idx in range(k):
            direction = offsets[m, idx] / dists[m, idx]
            row.append(_channel.RiceanLink(
                beta=float(beta[m, idx]), kappa=kappa,
                los=_channel.los_steering(geom, direction)))
        links.append(row)
    return NetworkTopology(ap_xyz=ap_xyz, rx_xyz=rx_xyz, beta=beta,
                           links=links, num_ir=k_i)


def _phase_policy(cfg, kind, stack, num_aps, rng):
    policy = _heuristics.PhasePolicy(
        kind=kind, candidates=cfg.get("policy.hps_candidates"))
    theta, _ = _heuristics.apply_policy(policy, stack, num_aps, rng)
    return theta


def _greedy_decision(env, actors, centralized):
    """Deterministic rollout of trained actors; returns (actions, theta)."""
    obs = env.reset()
    if centralized:
        raw = actors[0].forward(obs.ravel())[0]
    else:
        raw = _drl._joint_raw(actors, obs)
    act_dim = env.layout.dim
    actions = [_drl.normalize_action(raw[m * act_dim:(m + 1) * act_dim],
                                     env.layout)
               for m in range(env.num_aps)]
    theta = np.stack([act.theta for act in actions])
    return actions, theta


def _train_allocator(cfg, alloc, stack, topology, plan, params, rng_alloc):
    """Train a CTDE/CTCE policy on the realization, return its decision.

    The learned policy controls the phases too, so the returned theta
    replaces whatever the phase policy produced.
    """
    env = _drl.SwiptEnv(stack, topology.links, plan, topology.num_ir, params,
                        lam_tradeoff=cfg.get("train.lam_tradeoff"),
                        lam_se=cfg.get("train.lam_se"))
    train_cfg = _drl.DrlConfig(
        actor_lr=cfg.get("train.actor_lr"),
        critic_lr=cfg.get("train.critic_lr"),
        noise_scale=cfg.get("train.noise_scale"),
        noise_decay=cfg.get("train.noise_decay"),
        noise_floor=cfg.get("train.noise_floor"),
    )
    trainer = _drl.ctce_train if alloc == "ctce" else _drl.ctde_train
    seed = int(rng_alloc.integers(0, 2**63))
    result = trainer(env, episodes=cfg.get("train.episodes"),
                     steps=cfg.get("train.steps"), config=train_cfg,
                     seed=seed)
    actions, theta = _greedy_decision(env, result.actors, alloc == "ctce")
    modes = np.array([act.mode for act in actions])
    power_ir = np.zeros((env.num_aps, env.num_ir))
    power_er = np.zeros((env.num_aps, env.num_er))
    for m, act in enumerate(actions):
        if act.mode >= 0.5:
            power_ir[m] = act.power_ir
        else:
            power_er[m] = act.power_er
    decision = _performance.ResourceDecision(
        modes=modes, power_ir=power_ir, power_er=power_er)
    return decision, theta


def evaluate_realization(cfg, index, policy_name=None, stack=None):
    """Score one seeded network drop under one phase+alloc policy.

    Substream layout: (seed, index, 0) places the network, (seed, index, 1)
    drives the phase policy, (seed, index, 2) drives the allocator.  The
    same index therefore reuses the same topology across policies and
    sweep values (common random numbers).
    """
    name = policy_name or cfg.policy_combos()[0]
    phase_kind, _, alloc = name.partition("+")
    seed = cfg.get("run.seed")
    geom = cfg.geometry()
    stack = stack or _channel.build_stack(geom)

    topology = generate_topology(cfg, substream(seed, index, 0), geom=geom)
    plan = _estimation.assign_pilots(
        cfg.get("topo.k_i"), cfg.get("topo.k_e"),
        reuse_ir=cfg.get("pilots.reuse_ir"),
        reuse_er=cfg.get("pilots.reuse_er"))
    params = cfg.system_params(plan.tau)

    theta = _phase_policy(cfg, phase_kind, stack, cfg.get("topo.m"),
                          substream(seed, index, 1))
    rng_alloc = substream(seed, index, 2)
    if alloc == "rapepa":
        mode_count = cfg.get("alloc.mode_count")
        if mode_count < 0:
            mode_count = cfg.get("topo.m") // 2
        decision = _heuristics.rapepa(
            cfg.get("topo.m"), cfg.get("topo.k_i"), cfg.get("topo.k_e"),
            mode_count, cfg.get("alloc.delta"), rng_alloc)
    elif alloc == "jappa":
        stats = _performance.build_stats(
            _channel.cascade_all(stack, theta), topology.links, plan,
            topology.num_ir, params)
        result = _jappa.sca_loop(stats, params,
                                 lam_pen=cfg.get("alloc.lam_pen"))
        decision = result.decision
    elif alloc in ("ctde", "ctce"):
        decision, theta = _train_allocator(cfg, alloc, stack, topology,
                                           plan, params, rng_alloc)
    else:
        raise ValueError(f"unknown allocator {alloc!r}")

    stats = _performance.build_stats(
        _channel.cascade_all(stack, theta), topology.links, plan,
        topology.num_ir, params)
    return _performance.build_report(decision, stats, params, seed=index,
                                     config_hash=cfg.hash)


METRICS = ("min_se", "sum_se", "sum_he")


def report_metrics(report):
    """The sweep-facing scalar metrics of one realization."""
    se = np.asarray(report.se, dtype=float)
    return {
        "min_se": float(se.min()) if se.size else 0.0,
        "sum_se": float(se.sum()),
        "sum_he": report.sum_he,
    }
