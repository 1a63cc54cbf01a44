"""Wave-optics propagation through stacked metasurfaces and Ricean links.

The transmitter of each AP is an N-antenna ULA feeding an L-layer stack of
metasurfaces with S programmable elements per layer.  Free-space coupling
between consecutive layers follows the Rayleigh-Sommerfeld diffraction
integral evaluated at the element centers; each layer then applies a diagonal
unit-modulus phase profile.  The effective AP-side response is the ordered
cascade of all layers.

Receivers see the last layer through a Ricean fade: a deterministic
unit-modulus steering vector plus an isotropic scattered component, scaled by
a three-slope distance law.
"""

from dataclasses import dataclass, field

import numpy as np

# Default carrier: 3.5 GHz. All geometry defaults are expressed in multiples
# of the wavelength so admissibility checks are carrier-independent.
DEFAULT_WAVELENGTH = 0.0857

# Three-slope distance law: reference loss at 1 km with a 35 dB/decade far
# slope, 20 dB/decade between the breakpoints, flat inside the near field.
PATHLOSS_REF_DB = 140.7
PATHLOSS_FAR_SLOPE = 35.0
PATHLOSS_MID_SLOPE = 20.0
PATHLOSS_BREAK_NEAR = 10.0
PATHLOSS_BREAK_FAR = 50.0
SHADOWING_STD_DB = 8.0

AP_HEIGHT = 15.0
RX_HEIGHT = 1.65


def element_indices(num_elements):
    """Return the per-element (row, column) index maps (s_z, s_y).

    The maps are s_z = ceil(s / sqrt(S)) and s_y = mod(s - 1, sqrt(S)) + 1
    with a real-valued sqrt(S).  For perfect squares this is the usual
    row-major square grid; otherwise it produces a staggered layout, which is
    the one that reproduces the published admissibility pattern of the
    coupling norms (see tests).
    """
    s = np.arange(1, num_elements + 1, dtype=float)
    root = np.sqrt(float(num_elements))
    s_z = np.ceil(s / root)
    s_y = np.mod(s - 1.0, root) + 1.0
    return s_z, s_y


def element_grid(num_elements, spacing):
    """Physical (y, z) element coordinates in meters, centered at the mean."""
    s_z, s_y = element_indices(num_elements)
    grid = np.stack([s_y, s_z], axis=1) * spacing
    return grid - grid.mean(axis=0)


def ula_grid(num_antennas, spacing):
    """Physical (y, z) antenna coordinates of a centered horizontal ULA."""
    n = np.arange(1, num_antennas + 1, dtype=float)
    y = (n - (num_antennas + 1) / 2.0) * spacing
    return np.stack([y, np.zeros_like(y)], axis=1)


@dataclass(frozen=True)
class SimGeometry:
    """Stack geometry: S elements per layer, L layers, N feed antennas.

    `thickness` is the total stack depth, so consecutive layers (and the ULA
    below the first layer) are `thickness / num_layers` apart.  Spacings
    default to half a wavelength.
    """

    num_elements: int
    num_layers: int
    num_antennas: int
    wavelength: float = DEFAULT_WAVELENGTH
    thickness: float = None
    element_spacing: float = None
    antenna_spacing: float = None

    def __post_init__(self):
        if self.num_elements < 1 or self.num_layers < 1 or self.num_antennas < 1:
            raise ValueError("element, layer, and antenna counts must be >= 1")
        if self.thickness is None:
            object.__setattr__(self, "thickness", 4.0 * self.wavelength)
        if self.element_spacing is None:
            object.__setattr__(self, "element_spacing", self.wavelength / 2.0)
        if self.antenna_spacing is None:
            object.__setattr__(self, "antenna_spacing", self.wavelength / 2.0)
        if self.layer_gap <= 0.0:
            raise ValueError("layer gap must be positive")

    @property
    def layer_gap(self):
        return self.thickness / self.num_layers

    def element_positions(self):
        return element_grid(self.num_elements, self.element_spacing)

    def antenna_positions(self):
        return ula_grid(self.num_antennas, self.antenna_spacing)


def inter_element_distance(s, s_breve, geom):
    """Distance between element s of one layer and element s_breve of the next.

    Transverse offset comes from the index maps scaled by the element spacing;
    the longitudinal offset is the layer gap.
    """
    if not (1 <= s <= geom.num_elements and 1 <= s_breve <= geom.num_elements):
        raise ValueError("element indices out of range")
    s_z, s_y = element_indices(geom.num_elements)
    dz = s_z[s - 1] - s_z[s_breve - 1]
    dy = s_y[s - 1] - s_y[s_breve - 1]
    transverse = geom.element_spacing * np.hypot(dz, dy)
    return float(np.hypot(transverse, geom.layer_gap))


def rs_coupling(dst_xy, src_xy, gap, wavelength):
    """Rayleigh-Sommerfeld coupling matrix between two parallel planes.

    Entry (i, j) couples source point j to destination point i:

        (lambda^2 cos(chi) / (4 d)) (1/(2 pi d) - j/lambda) exp(j 2 pi d/lambda)

    where d is the point-to-point distance and cos(chi) = gap / d projects
    onto the plane normal.  The leading lambda^2/4 is the element area at
    half-wavelength spacing.
    """
    if gap <= 0.0:
        raise ValueError("plane separation must be positive")
    dy = dst_xy[:, None, 0] - src_xy[None, :, 0]
    dz = dst_xy[:, None, 1] - src_xy[None, :, 1]
    d = np.sqrt(dy * dy + dz * dz + gap * gap)
    cos_chi = gap / d
    amplitude = wavelength**2 * cos_chi / (4.0 * d)
    kernel = 1.0 / (2.0 * np.pi * d) - 1j / wavelength
    return amplitude * kernel * np.exp(1j * 2.0 * np.pi * d / wavelength)


@dataclass
class SimStack:
    """Coupling matrices of one stack plus their passivity audit.

    couplings[0] maps the ULA onto the first layer (S x N); couplings[l] for
    l >= 1 maps layer l onto layer l+1 (S x S).  `norms` holds the spectral
    norm of each coupling; a passive stack has all of them below one.
    """

    geometry: SimGeometry
    couplings: list
    norms: np.ndarray

    @property
    def passive(self):
        return bool(np.all(self.norms < 1.0))


def build_stack(geom):
    """Precompute the coupling matrices for a geometry (phase-independent)."""
    elems = geom.element_positions()
    ants = geom.antenna_positions()
    couplings = [rs_coupling(elems, ants, geom.layer_gap, geom.wavelength)]
    if geom.num_layers > 1:
        inter = rs_coupling(elems, elems, geom.layer_gap, geom.wavelength)
        couplings.extend([inter] * (geom.num_layers - 1))
    norms = np.array([np.linalg.norm(h, 2) for h in couplings])
    return SimStack(geometry=geom, couplings=couplings, norms=norms)


def sim_cascade(stack, theta):
    """Ordered cascade of one stack under the phase profile theta (L x S).

    Returns (F, trace) with F of shape S x N and trace = tr(F F^H).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (stack.geometry.num_layers, stack.geometry.num_elements):
        raise ValueError(
            "phase profile must be (layers, elements) = "
            f"({stack.geometry.num_layers}, {stack.geometry.num_elements})"
        )
    f = None
    for ell, coupling in enumerate(stack.couplings):
        if f is None:
            f = coupling
        else:
            f = coupling @ f
        f = np.exp(1j * theta[ell])[:, None] * f
    trace = float(np.sum(np.abs(f) ** 2))
    return f, trace


def cascade_all(stack, theta_all):
    """Cascades for all APs: theta_all is (M, L, S), result is (M, S, N)."""
    return np.stack([sim_cascade(stack, t)[0] for t in theta_all])


def coupling_norm_table(element_counts, thickness_over_wavelength, num_layers=2):
    """Spectral norm of the inter-layer coupling over a (S, thickness) grid.

    Works in wavelength units (the norm is carrier-independent once spacings
    are expressed in wavelengths).  Rows follow `element_counts`, columns
    follow `thickness_over_wavelength`; the layer gap for a stack of the
    given thickness is thickness / num_layers.
    """
    out = np.zeros((len(element_counts), len(thickness_over_wavelength)))
    for i, s_count in enumerate(element_counts):
        elems = element_grid(int(s_count), 0.5)
        for j, t_over_lam in enumerate(thickness_over_wavelength):
            gap = float(t_over_lam) / num_layers
            h = rs_coupling(elems, elems, gap, 1.0)
            out[i, j] = np.linalg.norm(h, 2)
    return out


def three_slope_pathloss(distance, rng=None, shadow_std_db=SHADOWING_STD_DB):
    """Linear power gain of the three-slope distance law.

    Piecewise in the 3-D distance (meters): flat inside 10 m, 20 dB/decade to
    50 m, then 35 dB/decade anchored at 140.7 dB @ 1 km.  Log-normal
    shadowing (8 dB std by default) applies only beyond the far breakpoint;
    pass an rng to draw it, omit for the deterministic mean law.
    """
    d = np.asarray(distance, dtype=float)
    if np.any(d <= 0.0):
        raise ValueError("distance must be positive")
    far = PATHLOSS_REF_DB + PATHLOSS_FAR_SLOPE * np.log10(d / 1000.0)
    at_far_break = PATHLOSS_REF_DB + PATHLOSS_FAR_SLOPE * np.log10(
        PATHLOSS_BREAK_FAR / 1000.0
    )
    mid = at_far_break + PATHLOSS_MID_SLOPE * np.log10(d / PATHLOSS_BREAK_FAR)
    at_near_break = at_far_break + PATHLOSS_MID_SLOPE * np.log10(
        PATHLOSS_BREAK_NEAR / PATHLOSS_BREAK_FAR
    )
    loss_db = np.where(
        d > PATHLOSS_BREAK_FAR, far, np.where(d > PATHLOSS_BREAK_NEAR, mid, at_near_break)
    )
    if rng is not None and shadow_std_db > 0.0:
        shadow = shadow_std_db * rng.standard_normal(d.shape if d.shape else None)
        loss_db = loss_db - np.where(d > PATHLOSS_BREAK_FAR, shadow, 0.0)
    gain = 10.0 ** (-loss_db / 10.0)
    if np.isscalar(distance):
        return float(gain)
    return gain


def los_steering(geom, direction):
    """Unit-modulus steering vector of the last layer toward a receiver.

    `direction` is the 3-D displacement (dx, dy, dz) from the stack center to
    the receiver in the stack's frame: the plane holds the (y, z) axes and x
    is the outward normal.  Entry s carries the phase

        exp(j 2 pi d_ps / lambda (s_z sin(chi) + s_y sin(eps) cos(chi)))

    with sin(chi) = dz/d and the azimuth projection sin(eps) cos(chi) = dy/d
    taken directly from the displacement ratios.  A broadside receiver
    (dy = dz = 0) yields the all-ones vector.
    """
    direction = np.asarray(direction, dtype=float)
    dist = np.linalg.norm(direction)
    if dist <= 0.0:
        raise ValueError("receiver cannot be co-located with the stack center")
    sin_chi = direction[2] / dist
    sin_eps_cos_chi = direction[1] / dist
    s_z, s_y = element_indices(geom.num_elements)
    zeta = 1j * 2.0 * np.pi * geom.element_spacing / geom.wavelength
    return np.exp(zeta * (s_z * sin_chi + s_y * sin_eps_cos_chi))


@dataclass
class RiceanLink:
    """Second-order description of one AP-to-receiver link.

    beta is the distance-law power gain, kappa the Ricean factor, and los the
    unit-modulus steering vector on the last layer.  The normalized gain
    beta_bar = beta / (1 + kappa) scales both components so E||z||^2 = beta S.
    """

    beta: float
    kappa: float
    los: np.ndarray

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.kappa < 0.0:
            raise ValueError("kappa must be nonnegative")

    @property
    def beta_bar(self):
        return self.beta / (1.0 + self.kappa)

    def mean_effective(self, f):
        """Mean of the effective channel g = F^H z."""
        return np.sqrt(self.beta_bar * self.kappa) * (f.conj().T @ self.los)

    def cov_effective(self, f):
        """Covariance of the effective channel (scattered part only)."""
        return self.beta_bar * (f.conj().T @ f)

    def second_moment_effective(self, f):
        """E||g||^2 = kappa beta_bar z_bar^H F F^H z_bar + beta_bar tr(F F^H)."""
        ffh_los = f @ (f.conj().T @ self.los)
        steered = float(np.real(self.los.conj() @ ffh_los))
        return self.kappa * self.beta_bar * steered + self.beta_bar * float(
            np.sum(np.abs(f) ** 2)
        )


def draw_channels(link, f, rng, trials):
    """Draw `trials` effective channels g = F^H z, shape (trials, N).

    z = sqrt(beta_bar) (sqrt(kappa) z_bar + z_tilde) with standard complex
    normal scatter.  Row t of the result is g_t transposed, i.e. the code
    works in row convention: G = Z conj(F).
    """
    s = link.los.shape[0]
    scatter = (rng.standard_normal((trials, s)) + 1j * rng.standard_normal((trials, s)))
    scatter *= np.sqrt(0.5)
    z = np.sqrt(link.beta_bar) * (np.sqrt(link.kappa) * link.los[None, :] + scatter)
    return z @ f.conj()


def sample_channel(link, f, rng):
    """One draw of (z, g): the last-layer field and the effective channel."""
    s = link.los.shape[0]
    scatter = (rng.standard_normal(s) + 1j * rng.standard_normal(s)) * np.sqrt(0.5)
    z = np.sqrt(link.beta_bar) * (np.sqrt(link.kappa) * link.los + scatter)
    return z, f.conj().T @ z
