"""Synthetic-experiment harness: iteration curves, measurement sweeps and
baseline comparisons, with CSV/JSON output.

Within a trial every method sees the bit-identical trajectory (shared seeds);
one network per experiment configuration, re-sampled trajectories per trial.
The per-half-iteration CSV schema is fixed:

    trial, method, half_iter, layer, nmse_db, se_nmse_db,
    gamma_plus, gamma_minus, clamp_events, runtime_ms
"""
import csv
import json
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import baselines as bl
from .engine import EngineOptions, run
from .errors import ConfigError, MlvampError
from .network import build_synthetic_network, sample_trajectory
from .state_evolution import run_se, se_state_to_json, stats_from_network

CSV_COLUMNS = ("trial", "method", "half_iter", "layer", "nmse_db", "se_nmse_db",
               "gamma_plus", "gamma_minus", "clamp_events", "runtime_ms")

PAPER_DIMS = [20, 100, 500, 784]
PAPER_SWEEP_N_MEAS = [100, 200, 300, 400, 500, 600]
KNOWN_METHODS = ("mlvamp", "map", "sgld")


@dataclass
class ExperimentConfig:
    """Defaults reproduce the synthetic experiment preset.

    The preset damps the (gamma, r) updates (0.85): the 20-dimensional input
    layer makes the undamped recursion clamp and oscillate transiently at
    these sizes, while the damped run is clamp-free after the first
    iterations.  The engine itself defaults to no damping.
    """

    dims: list = field(default_factory=lambda: list(PAPER_DIMS))
    rho: float = 0.4
    kappa: float = 10.0
    snr_db: float = 30.0
    n_meas: object = 300            # int, or list of ints for sweeps
    n_iter: int = 50
    n_trials: int = 10
    seed: int = 0
    methods: tuple = ("mlvamp",)
    out_dir: str = None
    damping: float = 0.85
    include_runtime: bool = True
    workers: int = 1
    store_estimates: bool = False
    map_steps: int = 500
    map_step_size: float = 0.01
    sgld_steps: int = 10000
    sgld_lambda: float = 0.002
    sgld_burn_in: int = 5000
    gamma_min: float = 1e-8
    gamma_max: float = 1e11
    alpha_min: float = 1e-6

    def validate(self):
        unknown = [m for m in self.methods if m not in KNOWN_METHODS]
        if unknown:
            raise ConfigError(f"unimplemented methods requested: {unknown}")
        if not self.methods:
            raise ConfigError("methods list must be nonempty")
        if self.n_trials < 0:
            raise ConfigError("n_trials must be >= 0")
        if self.n_iter < 1:
            raise ConfigError("n_iter must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def engine_options(self):
        return EngineOptions(max_iter=self.n_iter, gamma_min=self.gamma_min,
                             gamma_max=self.gamma_max, alpha_min=self.alpha_min,
                             damping=self.damping,
                             store_estimates=self.store_estimates)

    def to_dict(self):
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.methods = tuple(cfg.methods)
        cfg.validate()
        return cfg


def paper_config(**overrides):
    """The defaults reproduce the synthetic-network experiment; ``run --paper``
    needs no further arguments."""
    cfg = ExperimentConfig()
    for key, val in overrides.items():
        if key not in ExperimentConfig.__dataclass_fields__:
            raise ConfigError(f"unknown config key: {key}")
        setattr(cfg, key, val)
    cfg.validate()
    return cfg


def nmse_db(truth, estimate):
    """10 log10(||truth - estimate||^2 / ||truth||^2), clipped below at -200 dB."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ValueError("truth and estimate must have equal dimensions")
    ref = float(np.sum(truth**2))
    if ref <= 0:
        raise ValueError("zero-norm truth vector")
    err = float(np.sum((truth - estimate) ** 2))
    if err == 0:
        return -200.0
    return max(10.0 * np.log10(err / ref), -200.0)


def trial_seed(seed, trial):
    """Trajectory seed for one trial; disjoint from the builder seed stream."""
    return (int(seed), 71, int(trial))


def _build_network(cfg):
    if not np.isscalar(cfg.n_meas):
        raise ConfigError("this experiment needs a single n_meas")
    return build_synthetic_network(cfg.dims, cfg.rho, cfg.kappa, cfg.snr_db,
                                   int(cfg.n_meas), cfg.seed)


def _mlvamp_rows(net, se, cfg, trial, traj):
    start = time.perf_counter()
    records = run(net, traj.z[-1], cfg.engine_options(), truth=traj)
    runtime = 1000.0 * (time.perf_counter() - start)
    rows = []
    clamp_total = 0
    for rec in records:
        se_rec = se.records[rec.half_iter - 1]
        clamp_total += rec.clamp_events
        for layer in range(net.n_layers):
            rows.append({
                "trial": trial, "method": "mlvamp",
                "half_iter": rec.half_iter, "layer": layer,
                "nmse_db": float(rec.nmse_db[layer]),
                "se_nmse_db": float(se_rec.nmse_db[layer]),
                "gamma_plus": float(rec.gamma_plus[layer]),
                "gamma_minus": float(rec.gamma_minus[layer]),
                "clamp_events": rec.clamp_events,
                "runtime_ms": runtime if cfg.include_runtime else "",
            })
    return rows, runtime, clamp_total, records


def _baseline_rows(net, cfg, trial, traj):
    """MAP/SGLD rows for one trial; a diverging method is recorded as a
    failure without voiding the other methods' results."""
    rows, runtimes, failures = [], {}, []
    ctx = bl.HamiltonianContext(net, traj.z[-1])
    seed = trial_seed(cfg.seed, trial) + (13,)

    def attempt(method, fn, estimate_of):
        if method not in cfg.methods:
            return
        start = time.perf_counter()
        try:
            res = fn()
        except MlvampError as exc:
            failures.append({"trial": trial, "method": method, "error": str(exc)})
            return
        runtimes[method] = 1000.0 * (time.perf_counter() - start)
        rows.append({
            "trial": trial, "method": method, "half_iter": "", "layer": 0,
            "nmse_db": nmse_db(traj.z[0], estimate_of(res)), "se_nmse_db": "",
            "gamma_plus": "", "gamma_minus": "", "clamp_events": "",
            "runtime_ms": runtimes[method] if cfg.include_runtime else "",
        })

    attempt("map",
            lambda: bl.map_estimate(ctx, steps=cfg.map_steps,
                                    step_size=cfg.map_step_size, seed=seed),
            lambda r: r.z0_hat)
    attempt("sgld",
            lambda: bl.sgld_run(ctx, steps=cfg.sgld_steps, lam=cfg.sgld_lambda,
                                burn_in=cfg.sgld_burn_in, seed=seed),
            lambda r: r.z0_mean)
    return rows, runtimes, failures


def _trial_job(net, se, cfg_dict, trial, with_baselines):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    traj = sample_trajectory(net, trial_seed(cfg.seed, trial))
    rows = []
    runtimes = {}
    failures = []
    clamp_total = 0
    if "mlvamp" in cfg.methods:
        mrows, runtime, clamp_total, _ = _mlvamp_rows(net, se, cfg, trial, traj)
        rows += mrows
        runtimes["mlvamp"] = runtime
    if with_baselines:
        brows, brt, bfail = _baseline_rows(net, cfg, trial, traj)
        rows += brows
        runtimes.update(brt)
        failures += bfail
    return {"trial": trial, "rows": rows, "runtimes": runtimes,
            "clamp_total": clamp_total, "failures": failures}


def _sort_key(row):
    half = row["half_iter"] if row["half_iter"] != "" else -1
    return (row["trial"], row["method"], half, row["layer"])


@dataclass
class ExperimentResult:
    config: dict
    rows: list
    se: object
    metadata: dict

    @property
    def partial(self):
        return bool(self.metadata.get("failures"))

    def curves(self, layer=0, method="mlvamp"):
        """trial -> (half_iters, nmse_db) arranged from the rows."""
        per_trial = defaultdict(dict)
        for row in self.rows:
            if row["method"] == method and row["layer"] == layer \
                    and row["half_iter"] != "":
                per_trial[row["trial"]][row["half_iter"]] = row["nmse_db"]
        out = {}
        for trial, d in per_trial.items():
            halves = np.array(sorted(d))
            out[trial] = (halves, np.array([d[h] for h in halves]))
        return out

    def se_curve(self, layer=0):
        halves = np.array([r.half_iter for r in self.se.records])
        return halves, np.array([r.nmse_db[layer] for r in self.se.records])

    def median_abs_se_gap(self, layer=0):
        """Per half-iteration, the median over trials of |simulated - SE| in dB."""
        gaps = defaultdict(list)
        for row in self.rows:
            if row["method"] == "mlvamp" and row["layer"] == layer:
                gaps[row["half_iter"]].append(
                    abs(row["nmse_db"] - row["se_nmse_db"]))
        halves = np.array(sorted(gaps))
        return halves, np.array([np.median(gaps[h]) for h in halves])

    def final_nmse_per_trial(self, layer=0, method="mlvamp"):
        out = {}
        for trial, (halves, vals) in self.curves(layer, method).items():
            out[trial] = vals[-1]
        return out

    def write_csv(self, path):
        write_rows_csv(self.rows, path)

    def to_json_dict(self):
        return {"config": self.config, "metadata": self.metadata,
                "se": se_state_to_json(self.se) if self.se is not None else None,
                "rows": self.rows}

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)


def _fmt(v):
    if v == "" or v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".10g")


def write_rows_csv(rows, path, columns=CSV_COLUMNS):
    """RFC-4180 CSV (CRLF, UTF-8, '.' decimal separator)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def se_to_rows(se, method="se"):
    """SE predictions in the shared CSV schema (aligned for plot overlay)."""
    rows = []
    for rec in se.records:
        for layer in range(len(rec.eta)):
            rows.append({
                "trial": "", "method": method, "half_iter": rec.half_iter,
                "layer": layer, "nmse_db": float(rec.nmse_db[layer]),
                "se_nmse_db": float(rec.nmse_db[layer]),
                "gamma_plus": float(rec.gamma_plus[layer]),
                "gamma_minus": float(rec.gamma_minus[layer]),
                "clamp_events": rec.clamp_events, "runtime_ms": "",
            })
    return rows


def _run_trials(net, se, cfg, with_baselines):
    rows, failures = [], []
    runtimes, clamps = {}, {}
    cfg_dict = cfg.to_dict()
    jobs = list(range(cfg.n_trials))
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = {t: pool.submit(_trial_job, net, se, cfg_dict, t,
                                      with_baselines) for t in jobs}
            results = []
            for t, fut in futures.items():
                try:
                    results.append(fut.result())
                except MlvampError as exc:
                    failures.append({"trial": t, "error": str(exc)})
    else:
        results = []
        for t in jobs:
            try:
                results.append(_trial_job(net, se, cfg_dict, t, with_baselines))
            except MlvampError as exc:
                failures.append({"trial": t, "error": str(exc)})
    for res in results:
        rows += res["rows"]
        runtimes[res["trial"]] = res["runtimes"]
        clamps[res["trial"]] = res["clamp_total"]
        failures += res["failures"]
    rows.sort(key=_sort_key)
    return rows, failures, runtimes, clamps


def _experiment(cfg, net, with_baselines):
    cfg.validate()
    if net is None:
        net = _build_network(cfg)
    se = run_se(stats_from_network(net), cfg.n_iter, cfg.engine_options())
    rows, failures, runtimes, clamps = _run_trials(net, se, cfg, with_baselines)
    meta = {"failures": failures, "runtimes_ms": runtimes,
            "clamp_totals": clamps, "network_meta": net.meta,
            "n_layers": net.n_layers, "dims": net.dims,
            "se_clamp_total": se.clamp_total}
    return ExperimentResult(config=cfg.to_dict(), rows=rows, se=se,
                            metadata=meta), net


def run_iteration_experiment(cfg, net=None):
    """Per-half-iteration NMSE curves for one n_meas, with the SE overlay."""
    result, _ = _experiment(cfg, net, with_baselines=False)
    return result


def run_baseline_comparison(cfg, net=None):
    """ML-VAMP plus MAP/SGLD reconstructions on shared trajectories."""
    result, _ = _experiment(cfg, net, with_baselines=True)
    return result


@dataclass
class SweepResult:
    config: dict
    summary_rows: list
    per_m: dict
    metadata: dict

    @property
    def partial(self):
        return any(r.partial for r in self.per_m.values())

    def write_summary_csv(self, path):
        cols = ("n_meas", "method", "final_nmse_db", "final_nmse_db_q1",
                "final_nmse_db_q3", "se_final_nmse_db", "n_trials_ok")
        write_rows_csv(self.summary_rows, path, columns=cols)


def run_measurement_sweep(cfg):
    """Final NMSE (simulated median + SE prediction) per measurement count."""
    cfg.validate()
    m_values = cfg.n_meas if not np.isscalar(cfg.n_meas) else [cfg.n_meas]
    summary, per_m = [], {}
    for m in m_values:
        sub = replace(cfg, n_meas=int(m))
        res = run_iteration_experiment(sub)
        per_m[int(m)] = res
        finals = list(res.final_nmse_per_trial(layer=0).values())
        se_final = float(res.se.records[-1].nmse_db[0])
        summary.append({
            "n_meas": int(m), "method": "mlvamp",
            "final_nmse_db": float(np.median(finals)) if finals else "",
            "final_nmse_db_q1": float(np.percentile(finals, 25)) if finals else "",
            "final_nmse_db_q3": float(np.percentile(finals, 75)) if finals else "",
            "se_final_nmse_db": se_final,
            "n_trials_ok": len(finals),
        })
    meta = {"n_meas_values": [int(m) for m in m_values]}
    return SweepResult(config=cfg.to_dict(), summary_rows=summary,
                       per_m=per_m, metadata=meta)
