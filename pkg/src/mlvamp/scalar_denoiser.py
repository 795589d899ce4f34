"""Componentwise MMSE denoisers for the nonlinear stages and the input prior.

A nonlinear stage couples a scalar input z_in to an output z_out = phi(z_in, xi)
through an activation phi and optional additive Gaussian noise xi.  Given
Gaussian pseudo-observations r_plus (on z_in, precision gamma_plus) and
r_minus (on z_out, precision gamma_minus), the posterior factorizes
componentwise and we need its first two moments on both sides.

For the supported activations (relu, identity) the moments have closed forms
built from truncated Gaussians; a generic quadrature path and a Monte-Carlo
importance-sampling oracle are provided for validation.
"""
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import MonteCarloError, QuadratureError
from .gauss import (
    gh_nodes,
    log_norm_pdf,
    truncnorm_lower_moments,
    truncnorm_upper_moments,
)

VAR_FLOOR = 1e-15

SUPPORTED_ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class ScalarChannel:
    """Scalar map z_out = phi(z_in) + noise with i.i.d. Gaussian noise.

    ``noise_var == 0`` means the stage is deterministic.  The sigmoid/probit
    output channel is reserved and not implemented.
    """

    activation: str = "relu"
    noise_var: float = 0.0

    def __post_init__(self):
        if self.activation not in SUPPORTED_ACTIVATIONS:
            raise NotImplementedError(
                f"activation {self.activation!r} not supported "
                f"(supported: {SUPPORTED_ACTIVATIONS})"
            )
        if self.noise_var < 0:
            raise ValueError("noise_var must be >= 0")

    def apply(self, z, xi=None):
        out = np.maximum(z, 0.0) if self.activation == "relu" else np.asarray(z, float)
        if xi is not None:
            out = out + xi
        return out


@dataclass
class DenoiseResult:
    """Componentwise posterior moments on both sides of a stage."""

    mean_in: np.ndarray
    mean_out: np.ndarray
    var_in: np.ndarray
    var_out: np.ndarray


def _floor(v):
    return np.maximum(v, VAR_FLOOR)


def _relu_branch_weights(r_plus, gamma_plus, r_minus, v_obs):
    """Log masses of the z_in < 0 / z_in > 0 branches and the positive-branch
    Gaussian parameters, for obs model r_minus ~ N(relu(z_in), v_obs).

    ``v_obs = inf`` drops the output observation entirely.
    """
    vp = 1.0 / gamma_plus
    sp = np.sqrt(vp)
    if np.isinf(v_obs):
        log_w_neg = special.log_ndtr(-r_plus / sp)
        log_w_pos = special.log_ndtr(r_plus / sp)
        m_t = np.asarray(r_plus, float)
        v_t = np.broadcast_to(np.asarray(vp, float), np.shape(m_t))
        return log_w_neg, log_w_pos, m_t, v_t
    vs = v_obs + vp
    m_t = (v_obs * r_plus + vp * r_minus) / vs
    v_t = v_obs * vp / vs
    log_w_neg = log_norm_pdf(r_minus, 0.0, v_obs) + special.log_ndtr(-r_plus / sp)
    log_w_pos = log_norm_pdf(r_minus, r_plus, vs) + special.log_ndtr(m_t / np.sqrt(v_t))
    return log_w_neg, log_w_pos, m_t, np.broadcast_to(np.asarray(v_t, float), np.shape(m_t))


def _mix(w_a, m_a, v_a, w_b, m_b, v_b):
    """Moments of a two-component mixture, safe when a weight underflows to 0."""
    m_a = np.where(w_a > 0, m_a, 0.0)
    v_a = np.where(w_a > 0, v_a, 0.0)
    m_b = np.where(w_b > 0, m_b, 0.0)
    v_b = np.where(w_b > 0, v_b, 0.0)
    mean = w_a * m_a + w_b * m_b
    ex2 = w_a * (v_a + m_a**2) + w_b * (v_b + m_b**2)
    return mean, np.maximum(ex2 - mean**2, 0.0)


def _relu_posterior(r_plus, r_minus, gamma_plus, gamma_minus, noise_var,
                    observed=False):
    """Closed-form posterior moments for the relu channel.

    observed=True treats r_minus as the exact channel output y (requires
    noise_var > 0); otherwise r_minus is a pseudo-observation of z_out with
    precision gamma_minus.
    """
    r_plus = np.asarray(r_plus, dtype=float)
    r_minus = np.asarray(r_minus, dtype=float)
    if observed:
        v_obs = noise_var
    elif gamma_minus <= 0:
        v_obs = np.inf
    else:
        v_obs = 1.0 / gamma_minus + noise_var

    log_w_neg, log_w_pos, m_t, v_t = _relu_branch_weights(
        r_plus, gamma_plus, r_minus, v_obs)
    log_norm = np.logaddexp(log_w_neg, log_w_pos)
    if np.any(np.isneginf(log_norm)):
        raise QuadratureError(
            "posterior mass underflows to zero (inconsistent observation)",
            context={"r_plus": r_plus, "r_minus": r_minus},
        )
    with np.errstate(under="ignore"):
        w_neg = np.exp(log_w_neg - log_norm)
        w_pos = np.exp(log_w_pos - log_norm)

    sp = np.sqrt(1.0 / gamma_plus)
    m_neg, v_neg = truncnorm_upper_moments(r_plus, sp, 0.0)
    m_pos, v_pos = truncnorm_lower_moments(m_t, np.sqrt(v_t), 0.0)
    mean_in, var_in = _mix(w_neg, m_neg, v_neg, w_pos, m_pos, v_pos)

    # Output side: posterior of z_out given z_in combines the channel noise
    # with the gamma_minus pseudo-observation.
    if observed:
        mean_out = var_out = None
    elif noise_var == 0.0:
        mean_out, var_out = _mix(w_neg, 0.0 * m_pos, 0.0 * v_pos, w_pos, m_pos, v_pos)
    else:
        gm = max(gamma_minus, 0.0)
        v_c = 1.0 / (gm + 1.0 / noise_var)
        a = v_c / noise_var
        c0 = v_c * gm * r_minus if gm > 0 else np.zeros_like(m_t)
        mean_out, var_out = _mix(
            w_neg, c0, np.full_like(m_t, v_c),
            w_pos, c0 + a * m_pos, a * a * v_pos + v_c,
        )
    return mean_in, _floor(var_in), mean_out, None if var_out is None else _floor(var_out)


def _identity_posterior(r_plus, r_minus, gamma_plus, gamma_minus, noise_var,
                        observed=False):
    r_plus = np.asarray(r_plus, dtype=float)
    r_minus = np.asarray(r_minus, dtype=float)
    if observed:
        v_obs = noise_var
    elif gamma_minus <= 0:
        v_obs = np.inf
    else:
        v_obs = 1.0 / gamma_minus + noise_var

    if np.isinf(v_obs):
        mean_in = r_plus + 0.0 * r_minus
        var_in = np.full_like(mean_in, 1.0 / gamma_plus)
    else:
        g_eff = 1.0 / v_obs
        var_in = np.full_like(r_plus, 1.0 / (gamma_plus + g_eff))
        mean_in = (gamma_plus * r_plus + g_eff * r_minus) * var_in

    if observed:
        return mean_in, _floor(var_in), None, None
    if noise_var == 0.0:
        return mean_in, _floor(var_in), mean_in.copy(), _floor(var_in.copy())
    gm = max(gamma_minus, 0.0)
    v_c = 1.0 / (gm + 1.0 / noise_var)
    a = v_c / noise_var
    c0 = v_c * gm * r_minus if gm > 0 else 0.0
    mean_out = c0 + a * mean_in
    var_out = a * a * var_in + v_c
    return mean_in, _floor(var_in), mean_out, _floor(var_out)


def denoise_middle(ch, r_plus, r_minus, gamma_plus, gamma_minus, method="auto"):
    """Posterior moments of (z_in, z_out) under the belief of a middle stage.

    gamma_minus = 0 is allowed and drops the output pseudo-observation
    (iteration-0 initialization).  ``method`` selects the closed form
    ("closed", the default for relu/identity) or the generic quadrature path
    ("quadrature", scalar inputs only, used for validation).
    """
    if gamma_plus <= 0 or not np.isfinite(gamma_plus):
        raise ValueError("gamma_plus must be positive and finite")
    if gamma_minus < 0:
        raise ValueError("gamma_minus must be >= 0")
    if method == "quadrature":
        mi, vi, mo, vo = quad_moments(ch, float(r_plus), float(r_minus),
                                      gamma_plus, gamma_minus)
        one = np.asarray
        return DenoiseResult(one(mi), one(mo), one(_floor(vi)), one(_floor(vo)))
    if ch.activation == "relu":
        mi, vi, mo, vo = _relu_posterior(r_plus, r_minus, gamma_plus,
                                         gamma_minus, ch.noise_var)
    else:
        mi, vi, mo, vo = _identity_posterior(r_plus, r_minus, gamma_plus,
                                             gamma_minus, ch.noise_var)
    return DenoiseResult(mi, mo, vi, vo)


def denoise_input(r_minus, gamma_minus):
    """Posterior (mean, var) of the standard-Gaussian input layer.

    Conjugate update of the N(0, 1) prior with a pseudo-observation of
    precision gamma_minus; gamma_minus = 0 returns the prior.
    """
    if gamma_minus < 0:
        raise ValueError("gamma_minus must be >= 0")
    r_minus = np.asarray(r_minus, dtype=float)
    var = 1.0 / (1.0 + gamma_minus)
    return gamma_minus * r_minus * var, var


def denoise_output_nonlinear(ch, y, r_plus, gamma_plus):
    """Posterior (mean_in, var_in) of z_{L-1} when z_L = y is observed
    through a nonlinear channel."""
    if gamma_plus <= 0:
        raise ValueError("gamma_plus must be positive")
    y = np.asarray(y, dtype=float)
    r_plus = np.asarray(r_plus, dtype=float)
    if ch.noise_var > 0:
        post = _relu_posterior if ch.activation == "relu" else _identity_posterior
        mi, vi, _, _ = post(r_plus, y, gamma_plus, 0.0, ch.noise_var, observed=True)
        return mi, vi
    # Deterministic channels: the observation pins the input (identity) or
    # pins/truncates it (relu).
    if ch.activation == "identity":
        return y.copy(), np.full_like(y, VAR_FLOOR)
    if np.any(y < 0):
        raise QuadratureError("y < 0 is impossible under a deterministic relu channel")
    sp = np.sqrt(1.0 / gamma_plus)
    m_trunc, v_trunc = truncnorm_upper_moments(r_plus, sp, 0.0)
    mean = np.where(y > 0, y, m_trunc)
    var = np.where(y > 0, VAR_FLOOR, v_trunc)
    return mean, _floor(var)


# ---------------------------------------------------------------------------
# Generic quadrature path (scalar arguments; validation + fallback).
# ---------------------------------------------------------------------------

def _log_likelihood_factory(ch, r_minus, gamma_minus, observed):
    """Effective log-likelihood of z_in after marginalizing z_out analytically."""
    if observed:
        v_obs = ch.noise_var
    elif gamma_minus <= 0:
        return None, np.inf
    else:
        v_obs = 1.0 / gamma_minus + ch.noise_var

    def loglik(z):
        return log_norm_pdf(r_minus, ch.apply(z), v_obs)

    return loglik, v_obs


def _piece_envelopes(ch, r_plus, gamma_plus, r_minus, v_obs):
    """Integration pieces (lo, hi, envelope mu, envelope var) for the z_in axis."""
    vp = 1.0 / gamma_plus
    if ch.activation == "relu":
        if np.isinf(v_obs):
            m_t, v_t = r_plus, vp
        else:
            vs = v_obs + vp
            m_t = (v_obs * r_plus + vp * r_minus) / vs
            v_t = v_obs * vp / vs
        return [(-np.inf, 0.0, r_plus, vp), (0.0, np.inf, m_t, v_t)]
    # identity: single smooth piece, envelope at the Gaussian product
    if np.isinf(v_obs):
        return [(-np.inf, np.inf, r_plus, vp)]
    g_eff = 1.0 / v_obs
    v_post = 1.0 / (gamma_plus + g_eff)
    m_post = (gamma_plus * r_plus + g_eff * r_minus) * v_post
    return [(-np.inf, np.inf, m_post, v_post)]


def _piece_nodes(lo, hi, mu_e, v_e, n_nodes):
    """Quadrature nodes z and log-weights for one piece.

    Full-line pieces use Gauss-Hermite against the Gaussian envelope; bounded
    or half-bounded pieces use Gauss-Legendre panels on an envelope-derived
    window, split at mu_e and mu_e +- 2 sigma so nodes cluster where the
    envelope lives.  ``sum exp(log_w + log_f)`` approximates the piece
    integral of exp(log_f).
    """
    sig = np.sqrt(v_e)
    if np.isinf(lo) and np.isinf(hi):
        x, w = gh_nodes(n_nodes)
        z = mu_e + sig * x
        return z, np.log(w) - log_norm_pdf(z, mu_e, v_e)
    a = max(lo, mu_e - 12.0 * sig) if np.isfinite(lo) else mu_e - 12.0 * sig
    b = min(hi, mu_e + 12.0 * sig) if np.isfinite(hi) else mu_e + 12.0 * sig
    if b <= a:
        # envelope center far outside the piece: boundary-layer window
        if np.isfinite(hi):
            a, b = hi - 12.0 * sig, hi
        else:
            a, b = lo, lo + 12.0 * sig
    cuts = sorted({a, b} | {c for c in (mu_e - 2 * sig, mu_e, mu_e + 2 * sig)
                            if a < c < b})
    x01, w01 = np.polynomial.legendre.leggauss(n_nodes)
    zs, lws = [], []
    for p_lo, p_hi in zip(cuts[:-1], cuts[1:]):
        half = 0.5 * (p_hi - p_lo)
        zs.append(0.5 * (p_lo + p_hi) + half * x01)
        lws.append(np.log(half * w01))
    return np.concatenate(zs), np.concatenate(lws)


def _quad_pass(ch, r_plus, gamma_plus, loglik, pieces, n_nodes):
    """One quadrature evaluation: per-piece log-masses and conditional moments."""
    vp = 1.0 / gamma_plus
    piece_logz, piece_stats = [], []
    for lo, hi, mu_e, v_e in pieces:
        z, log_w = _piece_nodes(lo, hi, mu_e, v_e, n_nodes)
        log_f = log_norm_pdf(z, r_plus, vp)
        if loglik is not None:
            log_f = log_f + loglik(z)
        log_term = log_f + log_w
        shift = np.max(log_term)
        if not np.isfinite(shift):
            continue
        with np.errstate(under="ignore"):
            r = np.exp(log_term - shift)
        z0 = np.sum(r)
        if z0 <= 0:
            continue
        m1 = np.sum(r * z) / z0
        m2 = np.sum(r * z * z) / z0
        phi = ch.apply(z)
        p1 = np.sum(r * phi) / z0
        p2 = np.sum(r * phi * phi) / z0
        piece_logz.append(shift + np.log(z0))
        piece_stats.append((m1, m2, p1, p2))
    if not piece_logz:
        raise QuadratureError("likelihood evaluates to zero on the whole grid")
    piece_logz = np.array(piece_logz)
    log_total = special.logsumexp(piece_logz)
    pw = np.exp(piece_logz - log_total)
    agg = np.zeros(4)
    for p, st in zip(pw, piece_stats):
        agg += p * np.array(st)
    m1, m2, p1, p2 = agg
    return log_total, m1, max(m2 - m1 * m1, 0.0), p1, max(p2 - p1 * p1, 0.0)


def quad_moments(ch, r_plus, r_minus, gamma_plus, gamma_minus,
                 n_nodes=63, tol=1e-8, observed=False):
    """Generic numerical-integration path for the scalar posterior moments.

    Splits the relu domain at the kink, integrates each piece against a
    truncated-Gaussian envelope (Gauss-Legendre in the envelope CDF domain),
    and verifies the result by doubling the node count.  Raises
    QuadratureError when the two estimates disagree beyond ``tol``.
    """
    loglik, v_obs = _log_likelihood_factory(ch, r_minus, gamma_minus, observed)
    pieces = _piece_envelopes(ch, r_plus, gamma_plus, r_minus, v_obs)
    coarse = _quad_pass(ch, r_plus, gamma_plus, loglik, pieces, n_nodes)
    fine = _quad_pass(ch, r_plus, gamma_plus, loglik, pieces, 2 * n_nodes + 1)
    rel = abs(np.exp(coarse[0] - fine[0]) - 1.0)
    scale = np.sqrt(fine[2]) + abs(fine[1]) + 1e-30
    moment_err = max(abs(coarse[1] - fine[1]) / scale,
                     abs(coarse[2] - fine[2]) / (fine[2] + scale**2),
                     abs(coarse[3] - fine[3]) / scale,
                     abs(coarse[4] - fine[4]) / (fine[4] + scale**2))
    if not np.isfinite(rel) or rel > tol or moment_err > 100 * tol:
        raise QuadratureError(
            "quadrature did not converge (truncation error above tolerance)",
            estimate=fine, error_estimate=max(rel, moment_err),
            context={"r_plus": r_plus, "r_minus": r_minus,
                     "gamma_plus": gamma_plus, "gamma_minus": gamma_minus},
        )
    _, mean_in, var_in, mean_out_raw, var_out_raw = fine
    if observed or ch.noise_var == 0.0:
        mean_out, var_out = mean_out_raw, var_out_raw
    else:
        # z_out | z_in carries its own posterior spread around phi(z_in)
        gm = max(gamma_minus, 0.0)
        v_c = 1.0 / (gm + 1.0 / ch.noise_var)
        a = v_c / ch.noise_var
        c0 = v_c * gm * r_minus if gm > 0 else 0.0
        mean_out = c0 + a * mean_out_raw
        var_out = a * a * var_out_raw + v_c
    return mean_in, var_in, mean_out, var_out


# ---------------------------------------------------------------------------
# Monte-Carlo oracle (self-normalized importance sampling).
# ---------------------------------------------------------------------------

@dataclass
class McMoments:
    mean_in: float
    var_in: float
    mean_out: float
    var_out: float
    se_mean_in: float
    se_var_in: float
    se_mean_out: float
    se_var_out: float
    ess: float
    n_samples: int


def _block_se(values):
    values = np.asarray(values)
    return values.std(ddof=1) / np.sqrt(len(values))


def mc_oracle_moments(ch, r_plus, r_minus, gamma_plus, gamma_minus,
                      n_samples=10**6, seed=0, n_blocks=50):
    """Importance-sampling estimate of the middle-stage posterior moments.

    Draws z_in from an equal mixture of the prior pseudo-belief, a
    likelihood-informed Gaussian and a kink-centered component (the relu
    posterior can concentrate in a boundary layer at 0 that neither of the
    first two covers), then weights by the target density.  The proposal only
    affects efficiency (never the estimand), so this stays a valid oracle for
    the analytic paths.  Standard errors come from ``n_blocks`` contiguous
    blocks.
    """
    if n_samples < 10**4:
        raise ValueError("n_samples must be at least 1e4 for the oracle")
    rng = np.random.default_rng(seed)
    vp = 1.0 / gamma_plus

    if gamma_minus > 0:
        v_obs = 1.0 / gamma_minus + ch.noise_var
        if ch.activation == "relu":
            vs = v_obs + vp
            mi_ = (v_obs * r_plus + vp * r_minus) / vs
            vi_ = v_obs * vp / vs
        else:
            vi_ = 1.0 / (gamma_plus + 1.0 / v_obs)
            mi_ = (gamma_plus * r_plus + r_minus / v_obs) * vi_
    else:
        mi_, vi_ = r_plus, vp

    mk_, vk_ = 0.0, min(vp, vi_)
    comp = rng.integers(0, 3, size=n_samples)
    z = np.where(comp == 0, rng.normal(r_plus, np.sqrt(vp), size=n_samples),
                 np.where(comp == 1,
                          rng.normal(mi_, np.sqrt(vi_), size=n_samples),
                          rng.normal(mk_, np.sqrt(vk_), size=n_samples)))
    log_q = np.logaddexp(
        np.logaddexp(log_norm_pdf(z, r_plus, vp), log_norm_pdf(z, mi_, vi_)),
        log_norm_pdf(z, mk_, vk_)) - np.log(3.0)
    xi = rng.normal(0.0, np.sqrt(ch.noise_var), size=n_samples) if ch.noise_var > 0 else None
    z_out = ch.apply(z, xi)
    log_w = log_norm_pdf(z, r_plus, vp) - log_q
    if gamma_minus > 0:
        log_w = log_w - 0.5 * gamma_minus * (z_out - r_minus) ** 2
    with np.errstate(under="ignore"):
        w = np.exp(log_w - np.max(log_w))
    sw = w.sum()
    ess = sw * sw / np.dot(w, w)
    if ess < 100:
        raise MonteCarloError(
            f"effective sample size {ess:.1f} below 100; oracle unreliable", ess=ess)

    def moments(wv, a):
        m = np.dot(wv, a) / wv.sum()
        v = np.dot(wv, (a - m) ** 2) / wv.sum()
        return m, v

    mean_in, var_in = moments(w, z)
    mean_out, var_out = moments(w, z_out)

    blocks = [[], [], [], []]
    for wb, zb, ob in zip(np.array_split(w, n_blocks),
                          np.array_split(z, n_blocks),
                          np.array_split(z_out, n_blocks)):
        if wb.sum() <= 0:
            continue
        mb, vb = moments(wb, zb)
        mo, vo = moments(wb, ob)
        for lst, val in zip(blocks, (mb, vb, mo, vo)):
            lst.append(val)
    ses = [_block_se(b) for b in blocks]
    return McMoments(mean_in, var_in, mean_out, var_out,
                     ses[0], ses[1], ses[2], ses[3], ess, n_samples)
