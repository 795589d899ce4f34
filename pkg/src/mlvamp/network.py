"""Multi-layer stochastic generative networks: construction, sampling,
SVD-form storage and JSON serialization.

A network is a chain  z_0 -> z_1 -> ... -> z_L  where z_0 is a standard
Gaussian input, each stage maps z_{l-1} to z_l, and the final stage output
z_L = y is the observation.  Linear stages are held in factored form
W = V_out diag(s) V_in (V_in applied directly, not transposed) because the
inference algorithm and the SE recursion only ever need (V, s, b_bar).
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ConfigError, MlvampError
from .gauss import relu_gauss_moments

BUILDER_PROCEDURE = "build_synthetic_network/v1"
HAAR_PROCEDURE = "haar_qr_sign/v1"


def haar_orthogonal(n, rng):
    """Haar-distributed orthogonal matrix via sign-fixed QR of a Gaussian."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d[None, :]


@dataclass(eq=False)
class LinearStage:
    """z_out = V_out diag(s) V_in z_in + b + noise, noise ~ N(0, I/nu).

    nu = inf marks a deterministic stage.  b_bar = V_out^T b is cached since
    both the denoiser and the SE statistics consume the transformed bias.
    """

    v_out: np.ndarray
    v_in: np.ndarray
    s: np.ndarray
    b: np.ndarray
    nu: float
    b_bar: np.ndarray = None

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.b.shape != (self.n_out,):
            raise ValueError("bias length must equal the output dimension")
        if np.any(self.s < 0):
            raise ValueError("singular values must be nonnegative")
        if len(self.s) > min(self.n_in, self.n_out):
            raise ValueError("more singular values than min dimension")
        if not (self.nu > 0):
            raise ValueError("nu must be positive (inf for deterministic)")
        if self.b_bar is None:
            self.b_bar = self.v_out.T @ self.b

    @property
    def kind(self):
        return "linear"

    @property
    def n_in(self):
        return self.v_in.shape[0]

    @property
    def n_out(self):
        return self.v_out.shape[0]

    def s_padded(self, n):
        out = np.zeros(n)
        r = min(len(self.s), n)
        out[:r] = self.s[:r]
        return out

    def to_dense(self):
        sigma = np.zeros((self.n_out, self.n_in))
        r = len(self.s)
        sigma[:r, :r] = np.diag(self.s)
        return self.v_out @ sigma @ self.v_in

    def apply(self, z):
        u = self.v_in @ z
        out = np.zeros(self.n_out)
        r = len(self.s)
        out[:r] = self.s * u[:r]
        return self.v_out @ out + self.b

    def sample_output(self, z, rng):
        out = self.apply(z)
        if np.isfinite(self.nu):
            out = out + rng.normal(0.0, 1.0 / math.sqrt(self.nu), self.n_out)
        return out

    def validate(self, tol=1e-10):
        for v in (self.v_out, self.v_in):
            err = np.max(np.abs(v.T @ v - np.eye(v.shape[0])))
            if err > tol:
                raise MlvampError(f"orthogonality violated: max |V^T V - I| = {err:.2e}")


@dataclass(eq=False)
class NonlinearStage:
    """Componentwise z_out = phi(z_in) + noise on an n-dimensional layer."""

    activation: str
    noise_var: float
    n: int

    @property
    def kind(self):
        return "nonlinear"

    @property
    def n_in(self):
        return self.n

    @property
    def n_out(self):
        return self.n

    def apply(self, z):
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        if self.activation == "identity":
            return np.asarray(z, dtype=float)
        raise NotImplementedError(f"activation {self.activation!r} is reserved")

    def sample_output(self, z, rng):
        out = self.apply(z)
        if self.noise_var > 0:
            out = out + rng.normal(0.0, math.sqrt(self.noise_var), self.n)
        return out

    def validate(self, tol=None):
        self.apply(np.zeros(1))


@dataclass(eq=False)
class NetworkSpec:
    """Ordered stage chain with a standard-Gaussian input of dimension n0."""

    n0: int
    stages: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stages = tuple(self.stages)
        if self.n0 <= 0 or not self.stages:
            raise ConfigError("need a positive input dimension and at least one stage")
        prev = self.n0
        for i, st in enumerate(self.stages):
            if st.n_in != prev:
                raise ConfigError(
                    f"stage {i + 1}: input dim {st.n_in} != previous output {prev}")
            prev = st.n_out

    @property
    def n_layers(self):
        """Number of stages L; hidden variables are z_0 .. z_{L-1}."""
        return len(self.stages)

    @property
    def dims(self):
        """[N_0, ..., N_L] including the observed output."""
        return [self.n0] + [st.n_out for st in self.stages]

    def validate(self, tol=1e-10):
        for st in self.stages:
            st.validate(tol)

    def variable_basis(self, ell):
        """Orthogonal factor V_ell and transform style for variable z_ell.

        Variables produced by a linear stage use q = V^T z, p = z; variables
        consumed by a linear stage use q = z, p = V q (strict-alternation
        convention).  Variables touching no linear stage use V = I.
        """
        if ell >= 1 and self.stages[ell - 1].kind == "linear":
            return self.stages[ell - 1].v_out, "produced"
        if ell < self.n_layers and self.stages[ell].kind == "linear":
            return self.stages[ell].v_in, "consumed"
        return None, "consumed"


@dataclass(eq=False)
class Trajectory:
    """One sampled realization plus the transformed truth per layer."""

    z: list
    q0: list
    p0: list
    seed: int


def svd_decompose_stage(W, b, nu):
    """Factor a dense weight matrix into a LinearStage (W = V_out diag(s) V_in)."""
    W = np.asarray(W, dtype=float)
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(W)) or not np.all(np.isfinite(b)):
        raise ValueError("non-finite entries in weight matrix or bias")
    u, s, vh = np.linalg.svd(W, full_matrices=True)
    if s.size and s[0] > 0:
        r = int(np.sum(s > s[0] * max(W.shape) * np.finfo(float).eps))
    else:
        r = 0
    return LinearStage(v_out=u, v_in=vh, s=s[:r], b=b, nu=nu)


def _hidden_chain_sample(stages, n0, rng):
    z = rng.standard_normal(n0)
    for st in stages:
        z = st.sample_output(z, rng)
    return z


def build_synthetic_network(dims, rho, kappa, snr_db, n_meas, seed):
    """Random alternating (linear, relu) chain with a conditioned measurement.

    dims = [N0, h1, ..., hk] gives the input dimension and the hidden widths;
    the chain is input -> (linear, relu) x k -> linear measurement of n_meas
    rows.  Hidden weights are i.i.d. Gaussian (stored in SVD form) with the
    bias mean set so a fraction rho of pre-activations is positive; the
    measurement matrix is U diag(s) V^T with Haar factors and log-spaced
    singular values of condition number kappa; measurement noise is scaled to
    snr_db below the signal power (pilot-estimated over 10 trajectories).
    """
    dims = [int(d) for d in dims]
    if not dims or any(d <= 0 for d in dims):
        raise ConfigError("dims must be nonempty positive integers")
    if kappa < 1:
        raise ConfigError("kappa must be >= 1")
    if not (0 < rho < 1):
        raise ConfigError("rho must lie in (0, 1)")
    if n_meas <= 0:
        raise ConfigError("n_meas must be positive")

    n_hidden = len(dims) - 1
    children = np.random.SeedSequence(seed).spawn(2 * n_hidden + 3)
    stages = []
    tau = 1.0  # running per-component second moment of the layer input
    sigma_b_frac = 0.2
    for i in range(1, n_hidden + 1):
        n_in, n_out = dims[i - 1], dims[i]
        rng_w = np.random.default_rng(children[2 * (i - 1)])
        rng_b = np.random.default_rng(children[2 * (i - 1) + 1])
        pre_var = tau  # var((W x)_n) with W ~ N(0, 1/n_in) and E x_j^2 = tau
        sigma_b = sigma_b_frac * math.sqrt(pre_var)
        beta = special.ndtri(rho) * math.sqrt(pre_var + sigma_b**2)
        W = rng_w.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_out, n_in))
        b = rng_b.normal(beta, sigma_b, size=n_out)
        stages.append(svd_decompose_stage(W, b, math.inf))
        stages.append(NonlinearStage("relu", 0.0, n_out))
        _, tau = relu_gauss_moments(beta, pre_var + sigma_b**2)

    n_last = dims[-1]
    rank = min(n_meas, n_last)
    rng_u = np.random.default_rng(children[2 * n_hidden])
    rng_v = np.random.default_rng(children[2 * n_hidden + 1])
    s = np.logspace(-math.log10(kappa), 0.0, rank)
    s = s / math.sqrt(np.mean(s**2))
    v_out = haar_orthogonal(n_meas, rng_u)
    v_in = haar_orthogonal(n_last, rng_v)

    # pilot trajectories fix the measurement noise relative to signal power
    meas_clean = LinearStage(v_out=v_out, v_in=v_in, s=s,
                             b=np.zeros(n_meas), nu=math.inf)
    rng_pilot = np.random.default_rng(children[2 * n_hidden + 2])
    power = float(np.mean([
        np.sum(meas_clean.apply(_hidden_chain_sample(stages, dims[0], rng_pilot))**2)
        for _ in range(10)
    ]))
    sigma2 = power * 10.0 ** (-snr_db / 10.0) / n_meas
    meas = LinearStage(v_out=v_out, v_in=v_in, s=s,
                       b=np.zeros(n_meas), nu=1.0 / sigma2)

    meta = {
        "builder": BUILDER_PROCEDURE,
        "orthogonal_procedure": HAAR_PROCEDURE,
        "builder_args": {"dims": dims, "rho": rho, "kappa": kappa,
                         "snr_db": snr_db, "n_meas": int(n_meas), "seed": int(seed)},
        "rank_deficient_measurement": bool(n_meas > n_last),
        "pilot_signal_power": power,
        "measurement_noise_var": sigma2,
    }
    return NetworkSpec(n0=dims[0], stages=stages + [meas], meta=meta)


def sample_trajectory(net, seed):
    """Draw one realization z_0 .. z_L and its transformed truth (q0, p0)."""
    rng = np.random.default_rng(seed)
    z = [rng.standard_normal(net.n0)]
    for st in net.stages:
        z.append(st.sample_output(z[-1], rng))
    q0, p0 = [], []
    for ell, zl in enumerate(z):
        v, style = net.variable_basis(ell)
        if v is None:
            q0.append(zl.copy())
            p0.append(zl.copy())
        elif style == "produced":
            q0.append(v.T @ zl)
            p0.append(zl.copy())
        else:
            q0.append(zl.copy())
            p0.append(v @ zl)
    return Trajectory(z=z, q0=q0, p0=p0, seed=seed)


def empirical_layer_moments(traj):
    """Per-layer second moments (1/N) ||q0_l||^2 (== (1/N) ||z0_l||^2)."""
    return np.array([float(np.mean(q**2)) for q in traj.q0])


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _nu_to_json(nu):
    return "inf" if math.isinf(nu) else nu


def _nu_from_json(v):
    return math.inf if v == "inf" else float(v)


def network_to_json(net, mode="auto"):
    """Serialize a NetworkSpec to a JSON-compatible dict.

    mode "recipe" stores the builder arguments (orthogonal factors regenerate
    from the seed); "explicit" embeds the matrices; "auto" picks recipe when
    the network came from build_synthetic_network.
    """
    if mode == "auto":
        mode = "recipe" if net.meta.get("builder") else "explicit"
    if mode == "recipe" and not net.meta.get("builder"):
        raise ConfigError("network has no builder recipe; use explicit mode")
    doc = {"format": "mlvamp-network", "version": 1, "mode": mode,
           "dims": net.dims, "n0": net.n0, "stages": [], "meta": net.meta}
    for st in net.stages:
        if st.kind == "linear":
            entry = {"kind": "linear", "n_in": st.n_in, "n_out": st.n_out,
                     "s": st.s.tolist(), "b_bar": st.b_bar.tolist(),
                     "nu": _nu_to_json(st.nu)}
            if mode == "explicit":
                entry["v_out"] = st.v_out.tolist()
                entry["v_in"] = st.v_in.tolist()
                entry["b"] = st.b.tolist()
        else:
            entry = {"kind": "nonlinear", "activation": st.activation,
                     "noise_var": st.noise_var, "n": st.n}
        doc["stages"].append(entry)
    return doc


def network_from_json(doc):
    if doc.get("format") != "mlvamp-network":
        raise ConfigError("not a network document")
    if doc["mode"] == "recipe":
        args = doc["meta"]["builder_args"]
        net = build_synthetic_network(**args)
        for st, entry in zip(net.stages, doc["stages"]):
            if entry["kind"] == "linear" and not np.allclose(
                    st.s, entry["s"], rtol=1e-12, atol=1e-12):
                raise ConfigError("rebuilt network does not match stored spectra")
        return net
    stages = []
    for entry in doc["stages"]:
        if entry["kind"] == "linear":
            stages.append(LinearStage(
                v_out=np.array(entry["v_out"]), v_in=np.array(entry["v_in"]),
                s=np.array(entry["s"]), b=np.array(entry["b"]),
                nu=_nu_from_json(entry["nu"])))
        else:
            stages.append(NonlinearStage(entry["activation"],
                                         entry["noise_var"], entry["n"]))
    return NetworkSpec(n0=doc["n0"], stages=stages, meta=doc.get("meta", {}))


def save_network(net, path, mode="auto"):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_json(net, mode), fh)


def load_network(path):
    with open(path, "r", encoding="utf-8") as fh:
        return network_from_json(json.load(fh))
