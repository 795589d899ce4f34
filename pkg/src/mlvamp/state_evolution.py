"""Scalar state-evolution recursion predicting the per-layer error variances.

The recursion mirrors the engine sweep layer for layer, but replaces every
vector denoise with a scalar error function: the expected posterior variance
of a stage's input/output under the matched scalar channel

    R+ ~ N(0, tau_prev - 1/gamma+),   Z_in ~ N(R+, 1/gamma+),
    Z_out = phi(Z_in) + xi,           R- = Z_out + N(0, 1/gamma-).

Linear stages reduce to the componentwise 2x2 conditional variances averaged
over the empirical singular-value samples, so they are exact at any size;
relu stages are integrated numerically with branch-split tensor quadrature.
Predicted MSE per layer and half-iteration is 1/eta_bar.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .engine import EngineOptions, posterior_to_message
from .errors import MlvampError
from .gauss import gh_nodes, gl_nodes_unit, relu_gauss_moments
from .linear_denoiser import component_variances
from .scalar_denoiser import ScalarChannel, denoise_middle

_OUTER_NODES = 63
_INNER_NODES = 41


@dataclass
class LayerStatistics:
    """Scalar-limit description of one stage.

    Linear stages carry the empirical (singular value, transformed bias)
    samples, the noise precision, and the componentwise bias mean (the one
    piece of the original-coordinate bias that survives the Haar rotations:
    it shifts the law of the stage output that the next activation sees).
    Nonlinear stages carry the activation and its noise law.
    """

    kind: str
    n_in: int = 0
    n_out: int = 0
    s: np.ndarray = None
    b_bar: np.ndarray = None
    nu: float = None
    b_mean: float = 0.0
    activation: str = None
    noise_var: float = 0.0

    def s_padded(self, n):
        out = np.zeros(n)
        r = min(len(self.s), n)
        out[:r] = self.s[:r]
        return out


def stats_from_network(net):
    out = []
    for st in net.stages:
        if st.kind == "linear":
            out.append(LayerStatistics(kind="linear", n_in=st.n_in, n_out=st.n_out,
                                       s=np.array(st.s), b_bar=np.array(st.b_bar),
                                       nu=st.nu, b_mean=float(np.mean(st.b))))
        else:
            out.append(LayerStatistics(kind="nonlinear", n_in=st.n, n_out=st.n,
                                       activation=st.activation,
                                       noise_var=st.noise_var))
    return out


def tau_mean_chain(stats):
    """(tau0, mean) per variable: second moment and componentwise mean of z_l.

    tau0_0 = 1, mean_0 = 0 (standard Gaussian input).  Linear stages use
    independence of (S, B, Xi): tau = E[S^2] tau_prev + E[B^2] + 1/nu, and a
    rotationally generic weight matrix leaves mean = mean(b).  Nonlinear
    stages push the componentwise law N(mean, tau - mean^2) through phi.
    """
    tau = [1.0]
    mean = [0.0]
    for ell in range(1, len(stats) + 1):
        stat = stats[ell - 1]
        prev, m_prev = tau[ell - 1], mean[ell - 1]
        if stat.kind == "linear":
            if not np.all(np.isfinite(stat.s)):
                raise MlvampError("unbounded singular-value samples")
            s_out = stat.s_padded(stat.n_out)
            noise = 0.0 if math.isinf(stat.nu) else 1.0 / stat.nu
            tau.append(float(np.mean(s_out**2) * prev + np.mean(stat.b_bar**2) + noise))
            mean.append(stat.b_mean)
        elif stat.activation == "relu":
            v = max(prev - m_prev**2, 1e-30)
            m1, m2 = relu_gauss_moments(m_prev, v)
            tau.append(float(m2) + stat.noise_var)
            mean.append(float(m1))
        elif stat.activation == "identity":
            tau.append(prev + stat.noise_var)
            mean.append(m_prev)
        else:
            x, w = gh_nodes(127)
            p = m_prev + math.sqrt(max(prev - m_prev**2, 1e-30)) * x
            ch = ScalarChannel(stat.activation, 0.0)
            phi = ch.apply(p)
            tau.append(float(np.sum(w * phi**2)) + stat.noise_var)
            mean.append(float(np.sum(w * phi)))
    n = len(stats)
    return np.array(tau[:n]), np.array(mean[:n])


def compute_tau0(stats):
    """Second moments tau0_l of the transformed truth, variables 0..L-1."""
    return tau_mean_chain(stats)[0]


def error_input(gamma_minus):
    """Endpoint error for the standard-Gaussian input layer."""
    return 1.0 / (1.0 + gamma_minus)


def error_linear(stat, gamma_plus, gamma_minus):
    """(E+, E-) for a middle linear stage: averaged 2x2 conditional variances.

    Gaussian conditional variances do not depend on the observation values,
    so these are exact closed forms over the empirical singular values,
    including the zero-padded region on either side.
    """
    var_in, _ = component_variances(stat.s_padded(stat.n_in),
                                    gamma_plus, gamma_minus, stat.nu)
    _, var_out = component_variances(stat.s_padded(stat.n_out),
                                     gamma_plus, gamma_minus, stat.nu)
    return float(np.mean(var_out)), float(np.mean(var_in))


def error_observed_linear(stat, gamma_plus):
    """E- for the final linear stage with its output observed exactly."""
    if math.isinf(stat.nu):
        raise MlvampError("observed linear stage requires finite noise precision")
    s = stat.s_padded(stat.n_in)
    return float(np.mean(1.0 / (gamma_plus + stat.nu * s * s)))


def _outer_nodes(tau_prev, gamma_plus, mean_prev=0.0):
    """Nodes for R+ ~ N(mean_prev, (tau_prev - mean_prev^2) - 1/gamma+);
    clamps a negative variance."""
    v_r = (tau_prev - mean_prev**2) - 1.0 / gamma_plus
    clamped = v_r < 0
    v_r = max(v_r, 0.0)
    if v_r == 0.0:
        return np.full(1, mean_prev), np.ones(1), clamped
    x, w = gh_nodes(_OUTER_NODES)
    return mean_prev + math.sqrt(v_r) * x, w, clamped


def error_nonlinear(stat, gamma_plus, gamma_minus, tau_prev, mean_prev=0.0):
    """(E+, E-, r_plus_var_clamped) for a middle nonlinear stage.

    Identity channels are exact Gaussian algebra.  Relu channels integrate
    the posterior variances over the (R+, R-) law with the z_in sign handled
    by branch splitting (Gauss-Hermite outer/noise axes, CDF-mapped
    Gauss-Legendre along the truncated branch).  ``mean_prev`` shifts the
    input law: the stage input is N(mean_prev, tau_prev - mean_prev^2)
    componentwise (nonzero when the preceding bias has a mean).
    """
    if stat.activation == "identity":
        nu = math.inf if stat.noise_var == 0 else 1.0 / stat.noise_var
        var_in, var_out = component_variances(np.ones(1), gamma_plus,
                                              gamma_minus, nu)
        return float(var_out[0]), float(var_in[0]), False

    ch = ScalarChannel("relu", stat.noise_var)
    r_nodes, w_o, clamped = _outer_nodes(tau_prev, gamma_plus, mean_prev)

    if gamma_minus <= 0:
        res = denoise_middle(ch, r_nodes, np.zeros_like(r_nodes),
                             gamma_plus, 0.0)
        return (float(np.dot(w_o, res.var_out)),
                float(np.dot(w_o, res.var_in)), clamped)

    sp = math.sqrt(1.0 / gamma_plus)
    v_e = 1.0 / gamma_minus + stat.noise_var
    p_neg = special.ndtr(-r_nodes / sp)

    # z_in < 0 branch: r- = noise only
    e_x, e_w = gh_nodes(_OUTER_NODES)
    e = math.sqrt(v_e) * e_x
    res = denoise_middle(ch, r_nodes[:, None] + 0.0 * e[None, :],
                         0.0 * r_nodes[:, None] + e[None, :],
                         gamma_plus, gamma_minus)
    e_neg_plus = res.var_out @ e_w
    e_neg_minus = res.var_in @ e_w

    # z_in > 0 branch: z from the truncated prior, r- = z + noise
    u, uw = gl_nodes_unit(_INNER_NODES)
    p_lo = special.ndtr(-r_nodes / sp)
    pz = np.clip(p_lo[:, None] + u[None, :] * (1.0 - p_lo[:, None]),
                 1e-300, 1.0 - 1e-16)
    z = np.maximum(r_nodes[:, None] + sp * special.ndtri(pz), 0.0)
    e2_x, e2_w = gh_nodes(_INNER_NODES)
    e2 = math.sqrt(v_e) * e2_x
    r_minus = z[:, :, None] + e2[None, None, :]
    r_plus = np.broadcast_to(r_nodes[:, None, None], r_minus.shape)
    res = denoise_middle(ch, r_plus, r_minus, gamma_plus, gamma_minus)
    e_pos_plus = np.einsum("ijk,j,k->i", res.var_out, uw, e2_w)
    e_pos_minus = np.einsum("ijk,j,k->i", res.var_in, uw, e2_w)

    e_plus_i = p_neg * e_neg_plus + (1.0 - p_neg) * e_pos_plus
    e_minus_i = p_neg * e_neg_minus + (1.0 - p_neg) * e_pos_minus
    return float(np.dot(w_o, e_plus_i)), float(np.dot(w_o, e_minus_i)), clamped


def error_observed_nonlinear(stat, gamma_plus, tau_prev, mean_prev=0.0):
    """E- for a final nonlinear stage observed through Gaussian channel noise."""
    if stat.noise_var <= 0:
        raise MlvampError(
            "SE for a deterministic nonlinear observed stage is not defined; "
            "use a noisy channel or a linear measurement stage")
    from .scalar_denoiser import _identity_posterior, _relu_posterior

    post = _relu_posterior if stat.activation == "relu" else _identity_posterior
    r_nodes, w_o, _ = _outer_nodes(tau_prev, gamma_plus, mean_prev)
    if stat.activation == "identity":
        _, var, _, _ = post(0.0, 0.0, gamma_plus, 0.0, stat.noise_var, observed=True)
        return float(var)
    sp = math.sqrt(1.0 / gamma_plus)
    p_neg = special.ndtr(-r_nodes / sp)
    e_x, e_w = gh_nodes(_OUTER_NODES)
    e = math.sqrt(stat.noise_var) * e_x
    _, v_neg, _, _ = post(r_nodes[:, None] + 0.0 * e[None, :],
                          0.0 * r_nodes[:, None] + e[None, :],
                          gamma_plus, 0.0, stat.noise_var, observed=True)
    u, uw = gl_nodes_unit(_INNER_NODES)
    p_lo = special.ndtr(-r_nodes / sp)
    pz = np.clip(p_lo[:, None] + u[None, :] * (1.0 - p_lo[:, None]),
                 1e-300, 1.0 - 1e-16)
    z = np.maximum(r_nodes[:, None] + sp * special.ndtri(pz), 0.0)
    e2_x, e2_w = gh_nodes(_INNER_NODES)
    e2 = math.sqrt(stat.noise_var) * e2_x
    y = z[:, :, None] + e2[None, None, :]
    r_plus = np.broadcast_to(r_nodes[:, None, None], y.shape)
    _, v_pos, _, _ = post(r_plus, y, gamma_plus, 0.0, stat.noise_var, observed=True)
    e_i = p_neg * (v_neg @ e_w) + (1.0 - p_neg) * np.einsum(
        "ijk,j,k->i", v_pos, uw, e2_w)
    return float(np.dot(w_o, e_i))


@dataclass
class SERecord:
    k: int
    half_iter: int
    direction: str
    eta: np.ndarray
    alpha: np.ndarray
    gamma_plus: np.ndarray
    gamma_minus: np.ndarray
    nmse_db: np.ndarray
    clamp_events: int = 0


@dataclass
class SEState:
    tau0: np.ndarray
    records: list = field(default_factory=list)
    clamp_total: int = 0
    variance_clamps: int = 0


def run_se(stats, n_iter, options=None):
    """Run the scalar recursion for n_iter iterations (2*n_iter half-iterations).

    Initialization is gamma- = 0 everywhere; the layer visit order and the
    precision algebra are identical to the engine sweep.
    """
    if n_iter < 1:
        raise MlvampError("n_iter must be >= 1")
    opts = options or EngineOptions()
    n = len(stats)
    tau0, means = tau_mean_chain(stats)
    gp = np.zeros(n)
    gm = np.zeros(n)
    se = SEState(tau0=tau0)

    def record(k, direction, etas, alphas, events):
        half = 2 * k + (1 if direction == "forward" else 2)
        nmse = 10.0 * np.log10((1.0 / etas) / tau0)
        se.records.append(SERecord(
            k=k, half_iter=half, direction=direction,
            eta=etas.copy(), alpha=alphas.copy(),
            gamma_plus=gp.copy(), gamma_minus=gm.copy(),
            nmse_db=nmse, clamp_events=events))
        se.clamp_total += events

    damp = opts.damping
    for k in range(n_iter):
        etas, alphas = np.zeros(n), np.zeros(n)
        events = 0
        for ell in range(n):
            if ell == 0:
                v = error_input(gm[0])
            else:
                stat = stats[ell - 1]
                if stat.kind == "linear":
                    v, _ = error_linear(stat, gp[ell - 1], gm[ell])
                else:
                    v, _, fl = error_nonlinear(stat, gp[ell - 1], gm[ell],
                                               tau0[ell - 1], means[ell - 1])
                    se.variance_clamps += int(fl)
            eta, alpha, g_new, ev = posterior_to_message(v, gm[ell], opts)
            if damp < 1.0 and k >= 1:
                g_new = damp * g_new + (1 - damp) * gp[ell]
                eta = g_new + gm[ell]
            gp[ell] = g_new
            etas[ell], alphas[ell] = eta, alpha
            events += ev
        record(k, "forward", etas, alphas, events)

        etas, alphas = np.zeros(n), np.zeros(n)
        events = 0
        for ell in range(n - 1, -1, -1):
            stat = stats[ell] if ell < n - 1 else stats[-1]
            if ell == n - 1:
                if stat.kind == "linear":
                    v = error_observed_linear(stat, gp[ell])
                else:
                    v = error_observed_nonlinear(stat, gp[ell], tau0[ell],
                                                 means[ell])
            elif stat.kind == "linear":
                _, v = error_linear(stat, gp[ell], gm[ell + 1])
            else:
                _, v, fl = error_nonlinear(stat, gp[ell], gm[ell + 1],
                                           tau0[ell], means[ell])
                se.variance_clamps += int(fl)
            eta, alpha, g_new, ev = posterior_to_message(v, gp[ell], opts)
            if damp < 1.0 and k >= 1:
                g_new = damp * g_new + (1 - damp) * gm[ell]
                eta = g_new + gp[ell]
            gm[ell] = g_new
            etas[ell], alphas[ell] = eta, alpha
            events += ev
        record(k, "reverse", etas, alphas, events)
    return se


def predicted_nmse_db(se, layer, half_iter):
    """10 log10((1/eta_bar) / tau0) at a given layer and 1-based half-iteration."""
    rec = se.records[half_iter - 1]
    return float(10.0 * np.log10((1.0 / rec.eta[layer]) / se.tau0[layer]))


def se_state_to_json(se):
    return {
        "tau0": se.tau0.tolist(),
        "clamp_total": se.clamp_total,
        "variance_clamps": se.variance_clamps,
        "records": [{
            "k": r.k, "half_iter": r.half_iter, "direction": r.direction,
            "eta": r.eta.tolist(), "alpha": r.alpha.tolist(),
            "gamma_plus": r.gamma_plus.tolist(),
            "gamma_minus": r.gamma_minus.tolist(),
            "nmse_db": r.nmse_db.tolist(),
            "clamp_events": r.clamp_events,
        } for r in se.records],
    }
