"""Channel-layer tests: geometry, diffraction coupling, cascade, fading."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simswipt import channel


def small_geom(**kw):
    defaults = dict(
        num_elements=16, num_layers=2, num_antennas=4, wavelength=1.0, thickness=4.0
    )
    defaults.update(kw)
    return channel.SimGeometry(**defaults)


# --- element indexing and distances ---


def test_inter_element_distance_zero_offset_gives_layer_gap():
    geom = small_geom(num_elements=9, thickness=6.0, num_layers=2)
    for s in (1, 5, 9):
        assert channel.inter_element_distance(s, s, geom) == pytest.approx(3.0)


def test_inter_element_distance_hand_values():
    # 2x2 layout, spacing 0.5, gap 2: diagonal neighbours are sqrt(4.5) apart,
    # in-row neighbours sqrt(4.25).
    geom = channel.SimGeometry(
        num_elements=4,
        num_layers=1,
        num_antennas=1,
        wavelength=1.0,
        thickness=2.0,
        element_spacing=0.5,
    )
    assert channel.inter_element_distance(1, 4, geom) == pytest.approx(np.sqrt(4.5))
    assert channel.inter_element_distance(1, 2, geom) == pytest.approx(np.sqrt(4.25))


def test_element_indices_square_layout_is_integer_grid():
    s_z, s_y = channel.element_indices(9)
    assert list(s_z) == [1, 1, 1, 2, 2, 2, 3, 3, 3]
    assert list(s_y) == [1, 2, 3, 1, 2, 3, 1, 2, 3]


def test_element_grid_is_centered():
    grid = channel.element_grid(16, 0.5)
    assert np.allclose(grid.mean(axis=0), 0.0)


# --- Rayleigh-Sommerfeld coupling ---


def test_rs_coupling_single_coefficient_value():
    # One source, one destination, purely normal propagation: gap = d = 2,
    # wavelength 1.  Amplitude is lambda^2 cos(chi)/(4 d) = 1/8.
    h = channel.rs_coupling(
        np.array([[0.0, 0.0]]), np.array([[0.0, 0.0]]), gap=2.0, wavelength=1.0
    )
    expected = (1.0 / 8.0) * (1.0 / (4.0 * np.pi) - 1.0j) * np.exp(1j * 4.0 * np.pi)
    assert h.shape == (1, 1)
    assert h[0, 0] == pytest.approx(expected)


def test_rs_coupling_entries_finite_nonzero():
    geom = small_geom()
    stack = channel.build_stack(geom)
    for h in stack.couplings:
        assert np.all(np.isfinite(h))
        assert np.all(np.abs(h) > 0.0)


def test_rs_coupling_rejects_nonpositive_gap():
    pts = np.zeros((1, 2))
    with pytest.raises(ValueError):
        channel.rs_coupling(pts, pts, gap=0.0, wavelength=1.0)


def test_interlayer_coupling_is_symmetric():
    # Same grid on both planes: distances are symmetric, so the matrix is
    # complex symmetric (not Hermitian).
    elems = channel.element_grid(16, 0.5)
    h = channel.rs_coupling(elems, elems, gap=2.0, wavelength=1.0)
    assert np.allclose(h, h.T)


# --- passivity table ---


def test_admissibility_pattern_matches_published_table():
    norms36 = channel.coupling_norm_table([36], [10, 8, 6, 5, 4], num_layers=2)[0]
    norms40 = channel.coupling_norm_table([40], [5, 4, 3], num_layers=2)[0]
    assert np.all(norms36 < 1.0)
    assert np.all(norms40 > 1.0)


def test_stack_passivity_flag():
    passive = channel.build_stack(small_geom(num_elements=36, thickness=4.0))
    assert passive.passive
    active = channel.build_stack(
        small_geom(num_elements=40, num_layers=2, thickness=3.0)
    )
    assert not active.passive


# --- cascade ---


def test_cascade_single_layer_zero_phase_is_coupling():
    geom = small_geom(num_layers=1, thickness=2.0)
    stack = channel.build_stack(geom)
    f, trace = channel.sim_cascade(stack, np.zeros((1, geom.num_elements)))
    assert np.allclose(f, stack.couplings[0])
    assert trace == pytest.approx(np.sum(np.abs(stack.couplings[0]) ** 2))


def test_cascade_matches_explicit_product():
    rng = np.random.default_rng(3)
    geom = small_geom()
    stack = channel.build_stack(geom)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(2, 16))
    f, trace = channel.sim_cascade(stack, theta)
    explicit = (
        np.diag(np.exp(1j * theta[1]))
        @ stack.couplings[1]
        @ np.diag(np.exp(1j * theta[0]))
        @ stack.couplings[0]
    )
    assert np.allclose(f, explicit)
    assert trace == pytest.approx(np.sum(np.abs(explicit) ** 2))


def test_cascade_common_phase_shift_rotates_cascade():
    rng = np.random.default_rng(4)
    geom = small_geom()
    stack = channel.build_stack(geom)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(2, 16))
    f0, tr0 = channel.sim_cascade(stack, theta)
    c = 0.7
    f1, tr1 = channel.sim_cascade(stack, theta + c)
    assert np.allclose(f1, np.exp(1j * 2 * c) * f0)
    assert tr1 == pytest.approx(tr0)


def test_cascade_phase_only_stack_is_unitary():
    # Replace couplings by identities: the cascade reduces to a product of
    # diagonal unit-modulus factors, which preserves norms.
    geom = small_geom(num_antennas=16)
    stack = channel.build_stack(geom)
    stack.couplings = [np.eye(16), np.eye(16)]
    rng = np.random.default_rng(5)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(2, 16))
    f, _ = channel.sim_cascade(stack, theta)
    x = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    assert np.linalg.norm(f @ x) == pytest.approx(np.linalg.norm(x))


@settings(max_examples=25, deadline=None)
@given(
    shift=st.floats(min_value=-np.pi, max_value=np.pi),
    layer=st.integers(min_value=0, max_value=1),
)
def test_trace_invariant_to_single_layer_offset(shift, layer):
    geom = small_geom()
    stack = channel.build_stack(geom)
    rng = np.random.default_rng(6)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(2, 16))
    _, tr0 = channel.sim_cascade(stack, theta)
    shifted = theta.copy()
    shifted[layer] += shift
    _, tr1 = channel.sim_cascade(stack, shifted)
    assert tr1 == pytest.approx(tr0, rel=1e-9)


def test_cascade_rejects_bad_phase_shape():
    stack = channel.build_stack(small_geom())
    with pytest.raises(ValueError):
        channel.sim_cascade(stack, np.zeros((3, 16)))


# --- steering ---


def test_los_steering_broadside_is_all_ones():
    geom = small_geom()
    v = channel.los_steering(geom, np.array([10.0, 0.0, 0.0]))
    assert np.allclose(v, 1.0)


def test_los_steering_unit_modulus():
    geom = small_geom()
    v = channel.los_steering(geom, np.array([20.0, -7.0, 3.0]))
    assert np.allclose(np.abs(v), 1.0)


def test_los_steering_matches_trigonometric_evaluation():
    geom = small_geom(num_elements=9, element_spacing=0.5)
    direction = np.array([12.0, 5.0, -4.0])
    d = np.linalg.norm(direction)
    sin_chi = direction[2] / d
    sin_eps_cos_chi = direction[1] / d
    v = channel.los_steering(geom, direction)
    s_z, s_y = channel.element_indices(9)
    phases = 2.0 * np.pi * 0.5 / 1.0 * (s_z * sin_chi + s_y * sin_eps_cos_chi)
    assert np.allclose(v, np.exp(1j * phases))


def test_los_steering_rejects_colocated_receiver():
    with pytest.raises(ValueError):
        channel.los_steering(small_geom(), np.zeros(3))


# --- path loss ---


def test_pathloss_monotone_beyond_far_breakpoint():
    d = np.linspace(51.0, 500.0, 100)
    beta = channel.three_slope_pathloss(d)
    assert np.all(np.diff(beta) < 0.0)


def test_pathloss_continuity_at_breakpoints():
    for brk in (10.0, 50.0):
        lo = channel.three_slope_pathloss(brk - 1e-9)
        hi = channel.three_slope_pathloss(brk + 1e-9)
        assert abs(lo - hi) / hi < 1e-6


def test_pathloss_reference_values():
    # Independent evaluation: loss at 100 m is 140.7 + 35 log10(0.1) dB.
    assert channel.three_slope_pathloss(100.0) == pytest.approx(
        10.0 ** (-(140.7 - 35.0) / 10.0)
    )
    assert channel.three_slope_pathloss(1000.0) == pytest.approx(10.0 ** (-14.07))


def test_pathloss_shadowing_only_beyond_far_breakpoint():
    rng = np.random.default_rng(8)
    near = channel.three_slope_pathloss(30.0, rng=rng)
    assert near == pytest.approx(channel.three_slope_pathloss(30.0))
    far_draws = [
        channel.three_slope_pathloss(200.0, rng=np.random.default_rng(k))
        for k in range(5)
    ]
    assert len(set(far_draws)) > 1


def test_pathloss_rejects_nonpositive_distance():
    with pytest.raises(ValueError):
        channel.three_slope_pathloss(0.0)


# --- Ricean sampling ---


def make_link(geom, beta=1e-9, kappa=2.0, seed=11):
    rng = np.random.default_rng(seed)
    direction = np.array([30.0, rng.uniform(-20, 20), rng.uniform(-15, -5)])
    return channel.RiceanLink(
        beta=beta, kappa=kappa, los=channel.los_steering(geom, direction)
    )


def test_sample_channel_deterministic_los_limit():
    geom = small_geom()
    stack = channel.build_stack(geom)
    f, _ = channel.sim_cascade(stack, np.zeros((2, 16)))
    link = make_link(geom, kappa=1e9)
    rng = np.random.default_rng(12)
    g = channel.draw_channels(link, f, rng, trials=1000)
    assert np.all(np.var(g, axis=0) < 1e-9 * np.mean(np.abs(g) ** 2))


def test_sampled_mean_matches_analytic():
    geom = small_geom()
    stack = channel.build_stack(geom)
    f, _ = channel.sim_cascade(stack, np.zeros((2, 16)))
    link = make_link(geom)
    rng = np.random.default_rng(13)
    trials = 10**4
    g = channel.draw_channels(link, f, rng, trials=trials)
    mean = g.mean(axis=0)
    se = g.std(axis=0) / np.sqrt(trials)
    target = link.mean_effective(f)
    assert np.all(np.abs(mean - target) <= 3.0 * se + 1e-15)


def test_sampled_second_moment_matches_analytic():
    geom = small_geom()
    stack = channel.build_stack(geom)
    f, _ = channel.sim_cascade(stack, np.zeros((2, 16)))
    link = make_link(geom)
    rng = np.random.default_rng(14)
    trials = 10**4
    g = channel.draw_channels(link, f, rng, trials=trials)
    norms = np.sum(np.abs(g) ** 2, axis=1)
    se = norms.std() / np.sqrt(trials)
    assert abs(norms.mean() - link.second_moment_effective(f)) <= 3.0 * se


def test_single_sample_shapes_and_consistency():
    geom = small_geom()
    stack = channel.build_stack(geom)
    f, _ = channel.sim_cascade(stack, np.zeros((2, 16)))
    link = make_link(geom)
    z, g = channel.sample_channel(link, f, np.random.default_rng(15))
    assert z.shape == (16,)
    assert g.shape == (4,)
    assert np.allclose(g, f.conj().T @ z)


def test_link_validation():
    geom = small_geom()
    los = np.ones(16, dtype=complex)
    with pytest.raises(ValueError):
        channel.RiceanLink(beta=0.0, kappa=1.0, los=los)
    with pytest.raises(ValueError):
        channel.RiceanLink(beta=1.0, kappa=-0.5, los=los)
    assert channel.RiceanLink(beta=1.0, kappa=3.0, los=los).beta_bar == pytest.approx(
        0.25
    )
