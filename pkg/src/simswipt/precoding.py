"""Protective downlink precoders and their normalization factors.

Information APs zero-force across the estimated IR channels; energy APs
project maximum-ratio beams for the ERs onto the orthogonal complement of
the IR estimate span, so energy beams never leak onto what the information
decoder can see (up to estimation error).

Normalization convention: a factor c returned by any of the alpha_* routines
satisfies E||c u||^2 = 1 for the corresponding raw direction u, i.e. it is
(E||u||^2)^(-1/2).  Precoders take the factor and scale by it directly.
"""

import numpy as np


class PrecoderRankError(np.linalg.LinAlgError):
    """ZF needs at least K_I antennas and independent estimate columns."""


def _columns(ghat):
    """Validate a (..., N, K) stack of estimate columns."""
    ghat = np.asarray(ghat)
    if ghat.ndim < 2:
        raise ValueError("expected a matrix of estimate columns")
    return ghat


def zf_directions(ghat_i):
    """All raw ZF directions at once: U = G (G^H G)^{-1}, shape (..., N, K).

    Column k nulls every other estimate exactly: g_hat_j^H u_k = delta_jk.
    """
    ghat_i = _columns(ghat_i)
    n, k = ghat_i.shape[-2], ghat_i.shape[-1]
    if n < k:
        raise PrecoderRankError(f"{k} streams need at least {k} antennas, got {n}")
    gram = np.swapaxes(ghat_i, -2, -1).conj() @ ghat_i
    try:
        # The Gram matrix is Hermitian PSD; Cholesky is the rank gate (it
        # fails on semidefinite input, which a plain solve may not), and its
        # pivot spread bounds the conditioning.
        ell = np.linalg.cholesky(gram)
        pivots = np.abs(np.diagonal(ell, axis1=-2, axis2=-1))
        if np.any(np.min(pivots, axis=-1) <= 1e-7 * np.max(pivots, axis=-1)):
            raise PrecoderRankError("collinear estimate columns")
        inv_gh = np.linalg.solve(gram, np.swapaxes(ghat_i, -2, -1).conj())
    except np.linalg.LinAlgError as exc:
        raise PrecoderRankError("collinear estimate columns") from exc
    return np.swapaxes(inv_gh, -2, -1).conj()


def zf_precoder(ghat_i, k, scale=1.0):
    """Scaled ZF precoder for stream k, shape (..., N)."""
    return scale * zf_directions(ghat_i)[..., :, k]


def orthogonal_projector(ghat_i):
    """Projector onto the orthogonal complement of the estimate span.

    Computed from a reduced QR factorization (B = I - Q Q^H) rather than the
    explicit Gram inverse, for numerical robustness; `projector_formula`
    keeps the textbook form and the two are equivalence-tested.  An empty
    column set yields the identity.
    """
    ghat_i = _columns(ghat_i)
    n, k = ghat_i.shape[-2], ghat_i.shape[-1]
    eye = np.eye(n, dtype=complex)
    if k == 0:
        return np.broadcast_to(eye, ghat_i.shape[:-2] + (n, n)).copy()
    q, _ = np.linalg.qr(ghat_i)
    return eye - q @ np.swapaxes(q, -2, -1).conj()


def projector_formula(ghat_i):
    """Textbook projector I - G (G^H G)^{-1} G^H (reference form)."""
    ghat_i = _columns(ghat_i)
    n = ghat_i.shape[-2]
    eye = np.eye(n, dtype=complex)
    if ghat_i.shape[-1] == 0:
        return np.broadcast_to(eye, ghat_i.shape[:-2] + (n, n)).copy()
    gram = np.swapaxes(ghat_i, -2, -1).conj() @ ghat_i
    inv_gh = np.linalg.solve(gram, np.swapaxes(ghat_i, -2, -1).conj())
    return eye - ghat_i @ inv_gh


def pmrt_precoder(ghat_i, ghat_e, k_e, scale=1.0):
    """Protective MRT beam for ER stream k_e, shape (..., N).

    The raw direction is B g_hat_e with B the orthogonal-complement
    projector of the IR estimates; with no IRs this is plain MRT.
    """
    ghat_e = _columns(ghat_e)
    b = orthogonal_projector(ghat_i)
    return scale * (b @ ghat_e[..., :, k_e : k_e + 1])[..., :, 0]


def alpha_monte_carlo(draw, role, k, trials):
    """Empirical normalization factor (E||u||^2)^(-1/2) with standard error.

    draw(t) returns the estimate columns for trial t: a (N, K_I) matrix for
    role "zf", or a pair (G_I, G_E) for role "pmrt".  Rank failures from the
    underlying solves propagate to the caller.  The returned standard error
    is the delta-method propagation of the mean's standard error.
    """
    if trials < 1:
        raise ValueError("at least one trial required")
    norms = np.empty(trials)
    for t in range(trials):
        if role == "zf":
            u = zf_precoder(draw(t), k)
        elif role == "pmrt":
            g_i, g_e = draw(t)
            u = pmrt_precoder(g_i, g_e, k)
        else:
            raise ValueError(f"unknown role {role!r}")
        norms[t] = np.sum(np.abs(u) ** 2)
    mean = float(np.mean(norms))
    se_mean = float(np.std(norms, ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    alpha = mean**-0.5
    alpha_se = 0.5 * mean**-1.5 * se_mean
    return alpha, alpha_se


def _second_moment_matrix(f, links, gammas, moment):
    means = [link.mean_effective(f) for link in links]
    k = len(links)
    w = np.zeros((k, k), dtype=complex)
    for a in range(k):
        for b in range(a, k):
            w[a, b] = means[a].conj() @ means[b]
            w[b, a] = np.conj(w[a, b])
    if moment == "exact":
        if gammas is None:
            raise ValueError("exact moment needs per-link estimate qualities")
        w += np.diag(np.asarray(gammas, dtype=float))
    elif moment == "mean-field":
        w += np.diag([link.beta_bar for link in links])
    else:
        raise ValueError(f"unknown moment {moment!r}")
    return w


def alpha_zf_approx(f, links, gammas=None, moment="exact"):
    """Approximate ZF normalization factors, one per IR.

    Inverts the second-moment matrix of the estimated IR channels and reads
    the diagonal: alpha_k = ([W^{-1}]_kk)^(-1/2).  moment="exact" builds W as
    the true estimate second moment (LoS cross-Gram plus exact estimate
    covariance traces, pass gammas = tr(cov) per IR); "mean-field" replaces
    the diagonal by the prior powers beta_bar, which is the spectrum-blind
    form (exact only when estimates are as strong as the full channel).
    """
    w = _second_moment_matrix(f, links, gammas, moment)
    try:
        w_inv = np.linalg.inv(w)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular second-moment matrix") from exc
    diag = np.real(np.diag(w_inv))
    if np.any(diag <= 0.0):
        raise np.linalg.LinAlgError("second-moment matrix is not positive definite")
    return diag**-0.5


def alpha_pmrt_approx(f, links, gammas=None, moment="exact"):
    """Approximate PMRT normalization factors, one per ER.

    alpha_k = ([W]_kk)^(-1/2) from the diagonal of the ER estimate second
    moment, so each factor depends only on that ER's own statistics.  The
    projection loss from the IR null-space constraint is deliberately not
    modeled (matching the closed-form development); the Monte Carlo factor
    quantifies it.
    """
    w = _second_moment_matrix(f, links, gammas, moment)
    diag = np.real(np.diag(w))
    if np.any(diag <= 0.0):
        raise ValueError("nonpositive second moment")
    return diag**-0.5
