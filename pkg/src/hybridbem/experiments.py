"""Experiment recipes behind the CLI subcommands.

Each ``run_*`` function takes an :class:`~hybridbem.config.ExperimentConfig`,
writes its CSV/JSON artifacts under ``<out>/<command>/`` and returns the
summary dictionary that was written as JSON.
"""

import math
from pathlib import Path

import numpy as np

from . import io, measures
from .assumptions import (
    Box,
    check_assumption3,
    estimate_monotonicity,
    estimate_polynomial_lipschitz,
    falsify,
)
from .config import initial_list
from .errors import ConfigError, NonPositiveValues, TooFewPoints
from .markov_chain import stationary_distribution
from .model import ModelConstants
from .simulator import coupled_ensemble, run_ensemble, simulate

EPS = np.finfo(float).eps


def _outdir(cfg, name):
    d = Path(cfg.out) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _prov(cfg):
    return io.Provenance(cfg.raw, cfg.seed)


def _tname(t):
    return f"{t:.6g}".replace("-", "m")


# ------------------------------------------------------------------ check


def run_check(cfg):
    """Weighted-sum condition plus sampled falsification of the constants."""
    sec = cfg.section("check")
    model = cfg.model
    box = Box.make(*sec["box"], model.state_dim) if len(sec["box"]) == 2 else None
    if box is None:
        raise ConfigError("field 'check.box' must be [lo, hi]")
    samples = int(sec["samples"])
    mu = stationary_distribution(cfg.generator)
    constants = model.constants
    estimated = constants is None
    l1 = float(sec.get("l1", constants.l1 if constants else 5.0))
    n_hat = estimate_monotonicity(model, l1, box, samples, cfg.seed)
    if estimated:
        q_hat, a_hat = estimate_polynomial_lipschitz(model, box, samples, cfg.seed)
        constants = ModelConstants(q=q_hat, a=a_hat, l1=l1, n=n_hat).derive(model)
    report = check_assumption3(constants.n, mu)
    report.empirical_violations = falsify(model, constants, box, samples, cfg.seed)
    report.samples = samples
    summary = report.to_dict()
    summary.update(
        stationary_distribution=mu.probs,
        constants=constants.to_dict(),
        constants_source="estimated from samples" if estimated else "declared",
        estimated_monotonicity=n_hat,
        box=[box.lo, box.hi],
        dt=cfg.dt,
        dt_below_max_step=bool(cfg.dt < report.max_step),
        verdict="pass" if report.passes and not report.empirical_violations else "fail",
    )
    io.write_json(_outdir(cfg, "check") / "report.json", summary, _prov(cfg))
    return summary


# --------------------------------------------------------------- simulate


def run_simulate(cfg):
    """One trajectory CSV per initial condition."""
    d = _outdir(cfg, "simulate")
    files = []
    for c, ic in enumerate(cfg.initial):
        traj = simulate(cfg.model, cfg.generator, ic.x, ic.regime, cfg.dt, cfg.steps, cfg.seed,
                        cfg.solver, tag=c, allow_unstable=cfg.allow_unstable)
        path = io.write_csv(d / f"trajectory_{c + 1}.csv", io.trajectory_header(cfg.model.state_dim),
                            traj.rows(), _prov(cfg))
        files.append(path.name)
    summary = {"files": files, "dt": cfg.dt, "steps": cfg.steps,
               "initial": [{"x": ic.x, "regime": ic.regime} for ic in cfg.initial]}
    io.write_json(d / "summary.json", summary, _prov(cfg))
    return summary


# -------------------------------------------------------------- invariant


def stationarity_time(times, pvalues, alpha=0.05, confirm=5, fraction=0.9):
    """Two readings of "stationarity reached at t*" for a consecutive K-S sequence.

    ``pvalues[i]`` compares the snapshots at ``times[i]`` and ``times[i+1]``.
    The strict time is the first grid time after which every later p-value
    exceeds ``alpha``. Under stationarity each test still rejects with
    probability ``alpha``, so the strict time is driven by the last chance
    rejection; the tolerant time is the first grid time from which the next
    ``confirm`` p-values all exceed ``alpha`` and at least ``fraction`` of all
    later ones do.
    """
    ok = np.asarray(pvalues) > alpha
    L = len(ok)
    strict = None
    for j in range(L + 1):
        if np.all(ok[j:]):
            strict = float(times[j]) if j < L else None
            break
    tolerant, frac = None, None
    for j in range(L):
        window = ok[j:j + confirm]
        if len(window) == min(confirm, L - j) and np.all(window) and np.mean(ok[j:]) >= fraction:
            tolerant, frac = float(times[j]), float(np.mean(ok[j:]))
            break
    return {"t_star": tolerant, "t_star_strict": strict, "fraction_after": frac}


def _ks_pair(a, b, pairing):
    if pairing == "halves":
        # disjoint path sets make the two samples independent
        h = len(a) // 2
        return measures.ks_two_sample(a[:h], b[h:2 * h])
    return measures.ks_two_sample(a, b)


def moment_verdict(m2, burn_fraction=0.1, factor=5.0):
    """sup_k m2(k) <= factor * max over the first ``burn_fraction`` of steps."""
    K = len(m2) - 1
    head = max(1, int(round(burn_fraction * K)))
    ref = float(np.max(m2[: head + 1]))
    sup = float(np.max(m2))
    return {"sup": sup, "early_max": ref, "early_steps": head, "factor": factor,
            "bounded": bool(sup <= factor * ref)}


def run_invariant(cfg):
    """Snapshot densities, consecutive K-S sequence and the stationarity flag."""
    sec = cfg.section("invariant")
    ic = cfg.initial[0]
    h, count = float(sec["ks_grid"]["h"]), int(sec["ks_grid"]["count"])
    if count < 2:
        raise ConfigError("field 'invariant.ks_grid.count' must be >= 2")
    grid = [round(i * h, 12) for i in range(count)]
    snap_times = [float(t) for t in sec["snapshot_times"]]
    times = sorted(set(grid) | set(snap_times))
    comp = int(sec["component"]) - 1
    if not 0 <= comp < cfg.model.state_dim:
        raise ConfigError(f"field 'invariant.component' must lie in 1..{cfg.model.state_dim}")
    res = run_ensemble(cfg.model, cfg.generator, ic.x, ic.regime, cfg.dt, times, cfg.paths, cfg.seed,
                       cfg.workers, cfg.solver, horizon_steps=cfg.steps, allow_unstable=cfg.allow_unstable)
    by_time = {s.time: s for s in res.snapshots}
    d = _outdir(cfg, "invariant")
    prov = _prov(cfg)
    n = cfg.model.state_dim

    for t in snap_times:
        s = by_time[t]
        io.write_csv(d / f"snapshot_t{_tname(t)}.csv", io.snapshot_header(n), io.snapshot_rows(s), prov)
        dens = measures.empirical_density(s.x[:, comp], sec["density"])
        io.write_csv(d / f"density_t{_tname(t)}.csv", ["x", "density"], dens.rows(), prov)

    pairing = sec.get("pairing", "halves")
    ks_rows, pvals = [], []
    for i in range(1, count):
        a, b = by_time[grid[i - 1]], by_time[grid[i]]
        r = _ks_pair(a.x[:, comp], b.x[:, comp], pairing)
        ks_rows.append((i, grid[i - 1], grid[i], r.statistic, r.pvalue))
        pvals.append(r.pvalue)
    io.write_csv(d / "ks.csv", ["i", "t_prev", "t", "D", "p_value"], ks_rows, prov)

    t_axis = cfg.dt * np.arange(len(res.second_moment))
    io.write_csv(d / "moments.csv", ["k", "t", "mean_sq", "se"],
                 zip(range(len(t_axis)), t_axis, res.second_moment, res.second_moment_se), prov)

    flag = stationarity_time(grid[:-1], pvals, float(sec["alpha"]), int(sec["confirm"]), float(sec["fraction"]))
    terminal = by_time[grid[-1]]
    regime_freq = np.bincount(terminal.regimes, minlength=cfg.model.regime_count + 1)[1:] / terminal.size
    summary = {
        **flag,
        "alpha": float(sec["alpha"]),
        "ks_pairing": pairing,
        "grid": {"h": h, "count": count, "t_max": grid[-1]},
        "ks_D_first": ks_rows[0][3],
        "ks_D_last": ks_rows[-1][3],
        "moment_boundedness": moment_verdict(res.second_moment),
        "invariant_estimate": {
            "time": grid[-1],
            "mean_sq": measures.moment(terminal.x).__dict__,
            "regime_frequencies": regime_freq,
        },
        "failed_paths": res.failed,
        "paths": cfg.paths,
        "dt": cfg.dt,
        "protocol": ("the invariant measure estimate is the terminal-time ensemble; stationarity is "
                     "flagged from K-S tests between consecutive grid times"),
    }
    io.write_json(d / "summary.json", summary, prov)
    return summary


# --------------------------------------------------- initial independence


def _bootstrap(cfg, a, b, seed_offset=0):
    w = cfg.section("wasserstein")
    return measures.bootstrap_wasserstein(a.x, a.regimes, b.x, b.regimes, float(w["p"]),
                                          int(w["subsample"]), int(w["resamples"]), cfg.seed + seed_offset)


def noise_floor(cfg, snap):
    """W_p between the two halves of one ensemble: the same-law resolution limit."""
    a, b = snap.split()
    return _bootstrap(cfg, a, b)


def run_initial_independence(cfg):
    sec = cfg.section("independence")
    ics = initial_list(cfg, sec["initial"], "independence.initial") if "initial" in sec else cfg.initial
    if len(ics) < 2:
        raise ConfigError("initial-independence needs at least 2 initial conditions")
    t = float(sec["time"])
    common = bool(sec["common_noise"])
    snaps = []
    d = _outdir(cfg, "initial_independence")
    prov = _prov(cfg)
    for c, ic in enumerate(ics):
        res = run_ensemble(cfg.model, cfg.generator, ic.x, ic.regime, cfg.dt, [t], cfg.paths, cfg.seed,
                           cfg.workers, cfg.solver, tag=0 if common else c, allow_unstable=cfg.allow_unstable)
        s = res.snapshots[0]
        snaps.append(s)
        dens = measures.empirical_density(s.x[:, 0], cfg.section("invariant")["density"])
        io.write_csv(d / f"density_ic{c + 1}.csv", ["x", "density"], dens.rows(), prov)
    k = len(ics)
    mean = np.zeros((k, k))
    sd = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            w = _bootstrap(cfg, snaps[i], snaps[j])
            mean[i, j] = mean[j, i] = w.mean
            sd[i, j] = sd[j, i] = w.sd
    floor = noise_floor(cfg, snaps[0])
    off = mean[np.triu_indices(k, 1)]
    ratio = float(off.max() / floor.mean) if floor.mean > 0 else (0.0 if off.max() == 0 else math.inf)
    summary = {
        "time": t,
        "p": float(cfg.section("wasserstein")["p"]),
        "initial": [{"x": ic.x, "regime": ic.regime} for ic in ics],
        "common_noise": common,
        "w_mean": mean,
        "w_sd": sd,
        "noise_floor": floor.mean,
        "noise_floor_sd": floor.sd,
        "max_ratio_to_floor": ratio,
        "within_3x_floor": bool(np.all(off <= 3 * floor.mean)),
        "paths": cfg.paths,
    }
    io.write_json(d / "summary.json", summary, prov)
    return summary


# --------------------------------------------------------- coupling decay


def roundoff_floor(x0, y0, p):
    """Level of |D|^p below which pair differences are round-off, not contraction."""
    scale = max(1.0, float(np.max(np.abs(x0))), float(np.max(np.abs(y0))))
    return (1e3 * EPS * scale) ** p


def fit_window(values, burn_in, floor):
    """Indices [start, stop) used by the decay fit.

    ``stop`` is the first index where the series reaches ``floor``: past it,
    coupled pairs have coalesced to round-off and the series carries no
    contraction information. The burn-in fraction applies to [0, stop).
    """
    values = np.asarray(values)
    below = np.flatnonzero(values <= floor)
    stop = int(below[0]) if below.size else len(values)
    return int(math.ceil(burn_in * stop)), stop


def run_coupling_decay(cfg):
    sec = cfg.section("coupling")
    ics = initial_list(cfg, sec["initial"], "coupling.initial") if "initial" in sec else cfg.initial
    if len(ics) < 2:
        raise ConfigError("coupling-decay needs two initial conditions")
    a, b = ics[0], ics[1]
    p = float(sec["p"])
    c = cfg.model.constants
    if c is not None and not p < 4.0 / c.q:
        raise ConfigError(f"field 'coupling.p' = {p} must be below 4/q = {4.0 / c.q:.6g}")
    if not 0 < p:
        raise ConfigError("field 'coupling.p' must be positive")
    steps = int(sec.get("steps", cfg.steps))
    pairs = int(sec.get("pairs", cfg.paths))
    burn_in = float(sec["burn_in"])
    res = coupled_ensemble(cfg.model, cfg.generator, a.x, a.regime, b.x, b.regime, cfg.dt, steps, pairs,
                           cfg.seed, p, cfg.workers, cfg.solver, allow_unstable=cfg.allow_unstable)
    d = _outdir(cfg, "coupling_decay")
    prov = _prov(cfg)
    k = np.arange(steps + 1)
    io.write_csv(d / "decay.csv", ["k", "t", "mean_dp", "se", "p_not_met"],
                 zip(k, k * cfg.dt, res.mean_dp, res.se_dp, res.p_not_met), prov)

    floor = roundoff_floor(a.x, b.x, p)
    start, stop = fit_window(res.mean_dp, burn_in, floor)
    fit, note = None, None
    try:
        if stop == 0:
            # nothing resolvable: fit the raw series so the reason is reported
            fit = measures.decay_slope(k, res.mean_dp, cfg.dt, burn_in)
        else:
            fit = measures.decay_slope(k[start:stop], res.mean_dp[start:stop], cfg.dt, burn_in=0.0)
    except (NonPositiveValues, TooFewPoints) as exc:
        note = f"fit skipped: {type(exc).__name__}: {exc}"
    tau = res.tau
    met = tau >= 0
    summary = {
        "p": p,
        "pairs": pairs,
        "steps": steps,
        "dt": cfg.dt,
        "initial": [{"x": a.x, "regime": a.regime}, {"x": b.x, "regime": b.regime}],
        "burn_in": burn_in,
        "roundoff_floor": floor,
        "fit_window": {"k_start": int(start), "k_stop": int(stop)},
        "gamma_hat": None if fit is None else -fit.slope,
        # rate of |D_k| itself when |D_k| decays geometrically
        "gamma_hat_per_p": None if fit is None else -fit.slope / p,
        "slope": None if fit is None else fit.slope,
        "intercept": None if fit is None else fit.intercept,
        "r2": None if fit is None else fit.r2,
        "note": note,
        "chains_met_fraction": float(np.mean(met)),
        "mean_tau_steps": float(np.mean(tau[met])) if met.any() else None,
        "failed_pairs": res.failed,
    }
    io.write_json(d / "summary.json", summary, prov)
    return summary


# ------------------------------------------------------ wasserstein order


def loglog_slope(dts, values):
    x, y = np.log(dts), np.log(values)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, _), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(slope)


def run_wasserstein_order(cfg):
    sec = cfg.section("order")
    dts = [float(v) for v in sec.get("dts", [])]
    if len(dts) < 3:
        raise ConfigError("field 'order.dts' needs at least 3 step sizes")
    if len(set(dts)) < 2:
        raise ConfigError("field 'order.dts' has a single distinct value: the log-log fit is degenerate")
    dt_ref = float(sec.get("dt_ref", min(dts) / 4))
    if dt_ref > min(dts) / 4 * (1 + 1e-12):
        raise ConfigError(f"field 'order.dt_ref' = {dt_ref} must be <= min(order.dts)/4")
    c = cfg.model.constants
    if c is not None and not cfg.allow_unstable and max(dts) >= 1.0 / (c.n_max + 2):
        raise ConfigError(f"field 'order.dts' has a step >= 1/(n_M+2) = {1.0 / (c.n_max + 2):.6g}")
    T = float(sec["horizon"])
    M = int(sec.get("paths", cfg.paths))
    coupled = bool(sec["coupled"])
    ic = cfg.initial[0]
    p = float(cfg.section("wasserstein")["p"])

    def substeps(dt):
        if not coupled:
            return 1
        m = round(dt / dt_ref)
        if m < 1 or abs(m * dt_ref - dt) > 1e-9 * dt:
            raise ConfigError(f"field 'order.dts': {dt} is not an integer multiple of dt_ref = {dt_ref}")
        return m

    def terminal(dt, tag):
        res = run_ensemble(cfg.model, cfg.generator, ic.x, ic.regime, dt, [T], M, cfg.seed, cfg.workers,
                           cfg.solver, tag=tag, substeps=substeps(dt), allow_unstable=cfg.allow_unstable)
        return res.snapshots[0]

    ref = terminal(dt_ref, 0)
    levels = [terminal(dt, 0 if coupled else i + 1) for i, dt in enumerate(dts)]
    ws = [_bootstrap(cfg, s, ref) for s in levels]
    independent = noise_floor(cfg, ref)
    means = np.array([w.mean for w in ws])
    sds = np.array([w.sd for w in ws])
    per_resample = np.array([w.values for w in ws])  # (levels, resamples)
    slopes = [loglog_slope(dts, per_resample[:, b]) for b in range(per_resample.shape[1])
              if np.all(per_resample[:, b] > 0)]
    slope = loglog_slope(dts, means) if np.all(means > 0) else None
    # paired estimates share paths with the reference, so their resolution is
    # the resample spread, not the W_p between independent same-law samples
    floor = float(sds.max()) if coupled else independent.mean
    near_floor = bool(np.any(means <= 2 * floor))
    lo, hi = float(sec["min_slope"]), float(sec["max_slope"])
    if slope is not None and lo <= slope <= hi:
        verdict = "in-band"
    elif near_floor or slope is None:
        verdict = "noise-floor-limited"
    else:
        verdict = "out-of-band"
    warnings = []
    if near_floor:
        warnings.append("some W_p estimates are within 2x the noise floor; the fit is unreliable")
    d = _outdir(cfg, "wasserstein_order")
    prov = _prov(cfg)
    io.write_csv(d / "order.csv", ["dt", "w_mean", "w_sd", "substeps"],
                 [(dt, w.mean, w.sd, substeps(dt)) for dt, w in zip(dts, ws)], prov)
    summary = {
        "p": p,
        "dts": dts,
        "dt_ref": dt_ref,
        "horizon": T,
        "paths": M,
        "coupled": coupled,
        "w_mean": means,
        "w_sd": sds,
        "slope": slope,
        "slope_sd": float(np.std(slopes, ddof=1)) if len(slopes) > 1 else None,
        "expected_rate": p / 2,
        "band": [lo, hi],
        "noise_floor": floor,
        "noise_floor_kind": "max resample sd (paired)" if coupled else "independent half-ensembles",
        "noise_floor_independent": independent.mean,
        "noise_floor_independent_sd": independent.sd,
        "warnings": warnings,
        "verdict": verdict,
        "protocol": ("each step size is run to the horizon from the same initial data; with coupled = true "
                     "all runs share Brownian and chain paths at resolution dt_ref, so the W_p estimates "
                     "are paired path by path"),
    }
    io.write_json(d / "summary.json", summary, prov)
    return summary


COMMANDS = {
    "check": run_check,
    "simulate": run_simulate,
    "invariant": run_invariant,
    "initial-independence": run_initial_independence,
    "coupling-decay": run_coupling_decay,
    "wasserstein-order": run_wasserstein_order,
}
