"""Experiment driver: scenario configs in, CSV reportstable out.

Scenario files are INI-style with strict parsing (unknown sections or keys
are errors).  Every scenario declares a pipeline, the discretisation and
operator parameters, and a [checks] section of assertions evaluated on the
pipeline's metrics; the process exits 0 when all checks pass, 1 when any
fails, 2 on usage/config errors.  All numeric output is formatted with
repr-precision so identical configs and seeds produce byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import boundary_ops as bops
from . import population as pop
from . import resolvent as res
from . import semigroup as sg
from . import spectral_probe as probe
from .discretization import DensityField, build_grids, norm_p, write_field_csv
from .phase_space import Ball, PopulationTriangle, Slab, regularity_tau0


class ConfigError(ValueError):
    pass


_ALLOWED = {
    "meta": {"name", "description", "pipeline"},
    "geometry": {"kind", "half_width", "speed_min", "speed_max", "dim",
                 "radius", "l1", "l2"},
    "grid": {"nx", "nv", "n_dir", "n_boundary", "cutoff", "speed_rule", "dt",
             "n_age", "n_length"},
    "operator": {"kind", "alpha", "theta0", "normalization", "scale", "c",
                 "kernel", "kernel_csv", "reflection"},
    "run": {"p", "p_list", "t_final", "engine", "record_every", "seed",
            "lambdas", "eps_points", "initial", "chord_times", "ns",
            "mortality", "write_fields", "laplace_dt", "rate_tol",
            "bounce_cap"},
    "checks": None,     # free-form metric assertions
}

_PIPELINES = ("regularity", "criterion", "propagate", "growth", "resolvent",
              "balance", "probe-blowup", "probe-voigt", "renormalization",
              "criteria-agreement", "population")


def load_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in cp.sections():
        if section not in _ALLOWED:
            raise ConfigError(f"unknown section [{section}] in {path}")
        allowed = _ALLOWED[section]
        if allowed is None:
            continue
        for key in cp[section]:
            if key not in allowed:
                raise ConfigError(f"unknown key '{key}' in [{section}] of {path}")
    if "meta" not in cp or "pipeline" not in cp["meta"]:
        raise ConfigError(f"{path}: [meta] pipeline is required")
    if cp["meta"]["pipeline"] not in _PIPELINES:
        raise ConfigError(f"{path}: unknown pipeline '{cp['meta']['pipeline']}'")
    return cp


def _floats(text):
    return [float(x) for x in text.replace(",", " ").split()]


def _geometry(cp):
    g = cp["geometry"]
    kind = g.get("kind", "slab")
    if kind == "slab":
        return Slab(g.getfloat("half_width", 1.0),
                    speeds=(g.getfloat("speed_min", -1.0),
                            g.getfloat("speed_max", 1.0)))
    if kind == "ball":
        return Ball(g.getint("dim", 2), g.getfloat("radius", 1.0),
                    speeds=(g.getfloat("speed_min", 1.0),
                            g.getfloat("speed_max", 1.0)))
    if kind == "triangle":
        return PopulationTriangle(g.getfloat("l1", 0.0), g.getfloat("l2", 1.0))
    raise ConfigError(f"unknown geometry kind '{kind}'")


def _grids(cp, space):
    g = cp["grid"] if "grid" in cp else {}
    kw = dict(nx=int(g.get("nx", 64)), nv=int(g.get("nv", 32)))
    if isinstance(space, PopulationTriangle):
        kw = dict(nx=int(g.get("n_age", g.get("nx", 64))),
                  nv=int(g.get("n_length", g.get("nv", 48))))
    if isinstance(space, Ball):
        kw["n_dir"] = int(g.get("n_dir", 64))
        kw["n_boundary"] = int(g.get("n_boundary", kw["n_dir"]))
    if "cutoff" in g:
        kw["tangential_cutoff"] = float(g["cutoff"])
    if "speed_rule" in g:
        kw["speed_rule"] = g["speed_rule"]
    return build_grids(space, **kw)


def _operator(cp, tin, tout):
    o = cp["operator"]
    kind = o.get("kind", "zero")
    alpha = o.getfloat("alpha", 1.0)
    if kind == "zero":
        return bops.ZeroOperator(tin, tout)
    if kind == "specular":
        return bops.specular_reflection(tin, tout, scale=alpha)
    if kind == "bounce-back":
        return bops.bounce_back(tin, tout, scale=alpha)
    if kind == "transmission":
        return bops.transmission(tin, tout, scale=alpha)
    if kind == "diffuse":
        return bops.maxwell_diffuse(tin, tout, theta0=o.getfloat("theta0", 1.0),
                                    normalization=o.get("normalization", "none"),
                                    scale=o.getfloat("scale", 1.0))
    if kind == "maxwell-mix":
        return bops.maxwell_mix(tin, tout, alpha=alpha,
                                theta0=o.getfloat("theta0", 1.0),
                                reflection=o.get("reflection", "specular"),
                                normalization=o.get("normalization", "none"))
    if kind == "birth-law":
        model = _cell_model(cp)
        return pop.birth_operator(model, tin, tout)
    raise ConfigError(f"unknown operator kind '{kind}'")


def _kernel(cp):
    o = cp["operator"]
    name = o.get("kernel", "")
    l2 = cp["geometry"].getfloat("l2", 1.0)
    l1 = cp["geometry"].getfloat("l1", 0.0)
    if name == "mitosis":
        return pop.mitosis_kernel(l2, l1)
    if name == "proportional":
        return pop.proportional_kernel(l2)
    if name == "" and "kernel_csv" in o:
        return _csv_kernel(o["kernel_csv"])
    if name == "":
        return None
    raise ConfigError(f"unknown kernel '{name}'")


def _csv_kernel(path):
    """Tabulated kernel: first row l' values, first column l values."""
    table = np.loadtxt(path, delimiter=",")
    lp, lv, vals = table[0, 1:], table[1:, 0], table[1:, 1:]

    def k(L, Lp):
        i = np.clip(np.searchsorted(lv, np.asarray(L)), 0, len(lv) - 1)
        j = np.clip(np.searchsorted(lp, np.asarray(Lp)), 0, len(lp) - 1)
        return vals[i, j]

    return k


def _cell_model(cp):
    g = cp["geometry"]
    o = cp["operator"] if "operator" in cp else {}
    r = cp["run"] if "run" in cp else {}
    mort = float(r.get("mortality", 0.0)) or None
    return pop.CellModel(g.getfloat("l1", 0.0), g.getfloat("l2", 1.0),
                         mortality=mort, kernel=_kernel(cp),
                         c=float(o.get("c", 0.0)))


def _initial(cp, space):
    name = cp["run"].get("initial", "ones") if "run" in cp else "ones"
    seed = int(cp["run"].get("seed", 0)) if "run" in cp else 0
    if name == "ones":
        return lambda X, V: np.ones(len(X))
    if name == "cos-x":
        a = getattr(space, "half_width", 1.0)
        return lambda X, V: np.cos(np.pi * X[:, 0] / (2 * a))
    if name == "speed-squared":
        return lambda X, V: np.sum(V * V, axis=1)
    if name == "random":
        rng = np.random.default_rng(seed)
        cache = {}

        def f(X, V):
            key = (len(X), float(X[0, 0]) if len(X) else 0.0)
            if key not in cache:
                cache[key] = rng.random(len(X))
            return cache[key]

        return f
    raise ConfigError(f"unknown initial datum '{name}'")


def _dt(cp):
    if "grid" in cp and "dt" in cp["grid"] and cp["grid"]["dt"] != "auto":
        return float(cp["grid"]["dt"])
    return None


# ---------------------------------------------------------------------------
# pipelines: each returns (metrics dict, extra csv tables)
# ---------------------------------------------------------------------------

def _pipe_regularity(cp, out_dir, workers):
    space = _geometry(cp)
    phase, tin, tout = _grids(cp, space)
    tau0 = regularity_tau0(space, tout)
    return {"tau0": tau0, "tau_min": float(tout.sojourn.min()),
            "tau_all_at_least": float(tout.sojourn.min())}, {}


def _pipe_criterion(cp, out_dir, workers):
    space = _geometry(cp)
    phase, tin, tout = _grids(cp, space)
    H = _operator(cp, tin, tout)
    p = float(cp["run"].get("p", 1)) if "run" in cp else 1.0
    n_eps = int(cp["run"].get("eps_points", 20)) if "run" in cp else 20
    crit = bops.criterion_epsilon0(H, p=p, n_eps=n_eps, workers=workers)
    metrics = {"epsilon0": crit.epsilon0, "holds": crit.holds,
               "full_norm": crit.full_norm,
               "small_eps_limit": crit.small_eps_limit,
               "growth_exponent": crit.growth_exponent}
    tables = {"profile.csv": [("eps", "truncated_norm"), *crit.profile]}
    return metrics, tables


def _make_run(cp, space, grids, H, p, checks_engine=None):
    phase, tin, tout = grids
    r = cp["run"] if "run" in cp else {}
    return sg.SemigroupRun(
        space=space, phase=phase, trace_in=tin, trace_out=tout, H=H,
        initial=_initial(cp, space), p=p,
        t_final=float(r.get("t_final", 5.0)), dt=_dt(cp),
        record_every=int(r.get("record_every", 1)),
        bounce_cap=int(r.get("bounce_cap", 100_000)))


def _pipe_propagate(cp, out_dir, workers):
    space = _geometry(cp)
    grids = _grids(cp, space)
    H = _operator(cp, grids[1], grids[2])
    r = cp["run"]
    ps = _floats(r.get("p_list", r.get("p", "1")))
    engine = r.get("engine", "march")
    metrics, table = {}, None
    for p in ps:
        run = _make_run(cp, space, grids, H, p)
        rec = sg.propagate_billiard(run) if engine == "billiard" else sg.propagate(run)
        key = f"p{p:g}"
        n0 = rec.norms[0]
        metrics[f"conservation_error_{key}"] = float(
            np.max(np.abs(rec.norms - n0)) / n0) if n0 else math.inf
        growth_steps = np.diff(rec.norms) / np.maximum(rec.norms[:-1], 1e-300)
        metrics[f"max_step_growth_{key}"] = float(growth_steps.max()) \
            if len(growth_steps) else 0.0
        metrics[f"final_norm_{key}"] = float(rec.norms[-1])
        metrics[f"flagged_fraction_{key}"] = rec.flagged_fraction
        if table is None:
            table = [("t",), *[(t,) for t in rec.times]]
        table[0] = (*table[0], f"norm_{key}")
        for i, nv in enumerate(rec.norms):
            table[i + 1] = (*table[i + 1], nv)
        if r.get("write_fields", "false") == "true":
            f = DensityField(grids[0], rec.snapshots.get(rec.times[-1],
                             np.zeros(len(grids[0]))))
            write_field_csv(f, Path(out_dir) / f"field_{key}.csv")
    return metrics, {"record.csv": table}


def _pipe_growth(cp, out_dir, workers):
    space = _geometry(cp)
    grids = _grids(cp, space)
    H = _operator(cp, grids[1], grids[2])
    p = float(cp["run"].get("p", 1))
    crit = bops.criterion_epsilon0(H, p=p, workers=workers)
    run = _make_run(cp, space, grids, H, p)
    engine = cp["run"].get("engine", "billiard")
    rec = sg.propagate_billiard(run) if engine == "billiard" else sg.propagate(run)
    rate = sg.growth_rate(rec)
    metrics = {"epsilon0": crit.epsilon0, "holds": crit.holds,
               "full_norm": crit.full_norm,
               "bound_exponent": crit.growth_exponent,
               "growth_rate": rate,
               "rate_within_bound": rate <= crit.growth_exponent * 1.05 + 1e-9}
    table = [("t", "norm"), *zip(rec.times.tolist(), rec.norms.tolist())]
    return metrics, {"record.csv": table}


def _pipe_resolvent(cp, out_dir, workers):
    space = _geometry(cp)
    grids = _grids(cp, space)
    phase, tin, tout = grids
    H = _operator(cp, tin, tout)
    r = cp["run"]
    lambdas = _floats(r.get("lambdas", "1.0 2.0"))
    engine = r.get("engine", "billiard")
    ops = res.ResolventOperators(space, phase, tin, tout)
    init = _initial(cp, space)
    phi = init(phase.positions, phase.velocities)
    run = _make_run(cp, space, grids, H, 1.0)
    lap = sg.laplace_transform(run, lambdas, engine=engine,
                               dt_sample=float(r.get("laplace_dt", 0.05)))
    metrics, rows = {}, [("lambda", "laplace_rel_err", "neumann_terms")]
    worst = 0.0
    for lam in lambdas:
        psi, info = ops.resolvent_apply(H, phi, lam)
        d = norm_p(DensityField(phase, lap[lam] - psi), 1) \
            / norm_p(DensityField(phase, psi), 1)
        worst = max(worst, d)
        rows.append((lam, d, info.terms))
    metrics["laplace_rel_err_max"] = worst
    return metrics, {"laplace.csv": rows}


def _pipe_balance(cp, out_dir, workers):
    lam = float(cp["run"].get("lambdas", "2.0").split()[0]) if "run" in cp else 2.0
    rows = [("case", "relative_residual", "expanding", "lower_bound_holds")]
    worst = 0.0
    lower_ok = True

    s = Slab(1.0)
    ph, ti, to = build_grids(s, nx=1200, nv=60)
    ops = res.ResolventOperators(s, ph, ti, to)
    phi = np.cos(np.pi * ph.positions[:, 0] / 2.0)
    for label, H in (("slab-absorbing", bops.ZeroOperator(ti, to)),
                     ("slab-diffuse", bops.maxwell_diffuse(
                         ti, to, normalization="grid", scale=0.9))):
        rep = res.batty_balance(ops, H, phi, lam)
        rows.append((label, rep.relative_residual, rep.expanding,
                     rep.lower_bound_holds))
        worst = max(worst, rep.relative_residual)
        lower_ok = lower_ok and rep.lower_bound_holds

    tsp = PopulationTriangle(0.3, 1.0)
    pht, tit, tot = build_grids(tsp, nx=300, nv=160)
    opst = res.ResolventOperators(tsp, pht, tit, tot)
    model = pop.CellModel(0.3, 1.0, kernel=pop.mitosis_kernel(1.0, 0.3))
    Hm = pop.birth_operator(model, tit, tot)
    rep = res.batty_balance(opst, Hm, np.ones(len(pht)), lam)
    rows.append(("triangle-mitosis", rep.relative_residual, rep.expanding,
                 rep.lower_bound_holds))
    worst = max(worst, rep.relative_residual)
    lower_ok = lower_ok and rep.lower_bound_holds and rep.expanding
    return {"balance_residual_max": worst, "lower_bound_holds": lower_ok}, \
        {"balance.csv": rows}


def _pipe_probe_blowup(cp, out_dir, workers):
    space = _geometry(cp)
    r = cp["run"]
    alpha = cp["operator"].getfloat("alpha", 2.0)
    cts = _floats(r.get("chord_times", "0.8 0.4 0.2"))
    beams = [probe.beam_for_chord_time(space, ct,
                                       rate_tol=float(r.get("rate_tol", 0.04)))
             for ct in cts]
    rows = probe.blowup_experiment(space, alpha, beams)
    table = [("half_angle", "chord_time", "predicted_rate", "measured_rate")]
    table += [(x.half_angle, x.chord_time, x.predicted_rate, x.measured_rate)
              for x in rows]
    rates = [x.measured_rate for x in rows]
    rel = [abs(x.measured_rate - x.predicted_rate) / x.predicted_rate for x in rows]
    f0 = math.log(alpha) / (2 * space.radius / space.max_speed())
    metrics = {"rates_monotone": all(b > a for a, b in zip(rates, rates[1:])),
               "rate_rel_err_max": max(rel),
               "diameter_rate": f0}
    return metrics, {"blowup.csv": table}


def _pipe_probe_voigt(cp, out_dir, workers):
    ns = _floats(cp["run"].get("ns", "10 100 10000"))
    rows = probe.voigt_demo(ns)
    table = [("n", "bulk_distance", "streaming_norm", "trace_norm", "trace_norm_exact")]
    table += [(x.n, x.bulk_distance, x.streaming_norm, x.trace_norm,
               x.trace_norm_exact) for x in rows]
    rel = [abs(x.trace_norm - x.trace_norm_exact) / x.trace_norm_exact for x in rows]
    traces = [x.trace_norm for x in rows]
    metrics = {"trace_rel_err_max": max(rel),
               "traces_increasing": all(b > a for a, b in zip(traces, traces[1:])),
               "streaming_norm_max": max(x.streaming_norm for x in rows)}
    return metrics, {"voigt.csv": table}


def _pipe_renormalization(cp, out_dir, workers):
    space = _geometry(cp)
    grids = _grids(cp, space)
    H = _operator(cp, grids[1], grids[2])
    p = float(cp["run"].get("p", 1))
    crit = bops.criterion_epsilon0(H, p=p, workers=workers)
    q, eps_star, val = sg.pick_q(H, crit, p=p)
    run = _make_run(cp, space, grids, H, p)
    direct = sg.propagate(run)
    conj = sg.renormalized_propagate(run, q)
    err = float(np.max(np.abs(direct.norms - conj.norms)
                       / np.maximum(direct.norms, 1e-300)))
    metrics = {"q": q, "damped_norm": conj.meta["damped_norm"],
               "damped_contractive": conj.meta["damped_norm"] < 1.0,
               "conjugacy_rel_err": err}
    table = [("t", "direct_norm", "conjugated_norm"),
             *zip(direct.times.tolist(), direct.norms.tolist(),
                  conj.norms.tolist())]
    return metrics, {"conjugacy.csv": table}


def _pipe_criteria_agreement(cp, out_dir, workers):
    rows = [("case", "analytic_holds", "profile_holds", "agree")]
    metrics = {}

    b = Ball(2, 1.0, speeds=(1.0, 1.0))
    _, tib, tob = build_grids(b, nx=8, n_dir=32, n_boundary=32)
    cases = [
        ("maxwell-a0.5", bops.maxwell_mix(tib, tob, alpha=0.5),
         lambda H: bops.maxwell_criterion_p1(H), 1),
        ("maxwell-a1.0", bops.maxwell_mix(tib, tob, alpha=1.0),
         lambda H: bops.maxwell_criterion_p1(H), 1),
        ("maxwell-p2", bops.maxwell_mix(tib, tob, alpha=0.5),
         lambda H: bops.maxwell_criterion_pq(H, 2.0), 2),
    ]
    tsp = PopulationTriangle(0.0, 1.0)
    _, tit, tot = build_grids(tsp, nx=16, nv=200)
    lr_hold = pop.birth_operator(
        pop.CellModel(0.0, 1.0, kernel=pop.proportional_kernel(1.0), c=0.3), tit, tot)
    lr_fail = pop.birth_operator(
        pop.CellModel(0.0, 1.0, kernel=pop.mitosis_kernel(1.0)), tit, tot)
    cases += [
        ("lr-proportional", lr_hold, lambda H: bops.nonlocal_criterion_l1(H), 1),
        ("lr-constant", lr_fail, lambda H: bops.nonlocal_criterion_l1(H), 1),
    ]
    agree_all = True
    for label, H, evaluator, p in cases:
        v = evaluator(H)
        direct = bops.criterion_epsilon0(H, p=p, workers=workers)
        agree = v.holds == direct.holds
        agree_all = agree_all and agree
        rows.append((label, v.holds, direct.holds, agree))

    s2 = Slab(0.5, speeds=(-8.0, 8.0))
    _, ti2, to2 = build_grids(s2, nx=4, nv=4000, tangential_cutoff=1e-3)
    D = bops.maxwell_diffuse(ti2, to2, theta0=1.0)
    half = bops.operator_norm(D, 1)
    metrics.update(agreement=agree_all, half_flux=half,
                   half_flux_err=abs(half - bops.maxwellian_half_flux(1.0)))
    return metrics, {"criteria.csv": rows}


def _pipe_population(cp, out_dir, workers):
    model = _cell_model(cp)
    r = cp["run"]
    verdict = pop.cell_wellposedness(model)
    rec = pop.cell_propagate(model, _initial(cp, model.space()),
                             t_final=float(r.get("t_final", 3.0)), dt=_dt(cp),
                             n_age=int(cp["grid"].get("n_age", 64)),
                             n_length=int(cp["grid"].get("n_length", 48)))
    metrics = {"holds": verdict.holds, "route_regular": verdict.route == "regular",
               "tau0": verdict.tau0, "kernel_limit": verdict.kernel_limit,
               "final_norm": float(rec.norms[-1]),
               "min_value_recorded": float(min(np.min(rec.norms), 0.0))}
    if len(rec.times) >= 20 and np.all(rec.norms[-10:] > 0):
        metrics["growth_rate"] = sg.growth_rate(rec)
    table = [("t", "norm"), *zip(rec.times.tolist(), rec.norms.tolist())]
    return metrics, {"record.csv": table}


_PIPE_FNS = {
    "regularity": _pipe_regularity,
    "criterion": _pipe_criterion,
    "propagate": _pipe_propagate,
    "growth": _pipe_growth,
    "resolvent": _pipe_resolvent,
    "balance": _pipe_balance,
    "probe-blowup": _pipe_probe_blowup,
    "probe-voigt": _pipe_probe_voigt,
    "renormalization": _pipe_renormalization,
    "criteria-agreement": _pipe_criteria_agreement,
    "population": _pipe_population,
}


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def evaluate_checks(cp, metrics):
    """Assertions of the form ``metric = op value [tol]``.

    Ops: le, lt, ge, gt, approx (relative), approx_abs, is_true, is_false.
    """
    rows = []
    if "checks" not in cp:
        return rows
    for key, spec in cp["checks"].items():
        parts = spec.split()
        op = parts[0]
        if key not in metrics:
            rows.append((key, op, spec, math.nan, False))
            continue
        val = metrics[key]
        ok = False
        target = parts[1] if len(parts) > 1 else ""
        if op == "le":
            ok = val <= float(parts[1])
        elif op == "lt":
            ok = val < float(parts[1])
        elif op == "ge":
            ok = val >= float(parts[1])
        elif op == "gt":
            ok = val > float(parts[1])
        elif op == "approx":
            t, tol = float(parts[1]), float(parts[2])
            ok = abs(val - t) <= tol * max(abs(t), 1e-300)
        elif op == "approx_abs":
            t, tol = float(parts[1]), float(parts[2])
            ok = abs(val - t) <= tol
        elif op == "is_true":
            ok = bool(val)
        elif op == "is_false":
            ok = not bool(val)
        else:
            raise ConfigError(f"unknown check op '{op}' for '{key}'")
        rows.append((key, op, target, val, bool(ok)))
    return rows


def _fmt(x):
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in rows:
            w.writerow([_fmt(c) for c in row])


# ---------------------------------------------------------------------------
# scenario bundle and entry points
# ---------------------------------------------------------------------------

def bundled_scenarios():
    """Name -> path of the shipped scenario configs."""
    root = Path(__file__).parent / "scenarios"
    return {p.stem: p for p in sorted(root.glob("*.cfg"))}


def run_scenario(config_path, out_dir=None, workers: int = 1,
                 seed: int | None = None) -> int:
    cp = load_config(config_path)
    if seed is not None:
        if "run" not in cp:
            cp.add_section("run")
        cp["run"]["seed"] = str(seed)
    name = cp["meta"].get("name", Path(config_path).stem)
    out = Path(out_dir or f"results/{name}")
    out.mkdir(parents=True, exist_ok=True)
    pipeline = cp["meta"]["pipeline"]
    metrics, tables = _PIPE_FNS[pipeline](cp, out, workers)
    for fname, rows in tables.items():
        if rows:
            _write_csv(out / fname, rows)
    checks = evaluate_checks(cp, metrics)
    summary = [("metric", "op", "target", "value", "pass")]
    for key in sorted(metrics):
        summary.append((key, "", "", metrics[key], ""))
    for row in checks:
        summary.append(row)
    _write_csv(out / "summary.csv", summary)
    failed = [c for c in checks if not c[4]]
    for key, op, target, val, ok in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {key} {op} {target} "
              f"(value {_fmt(val)})")
    return 1 if failed else 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="freestream",
        description="transport-semigroup experiments: run scenario configs, "
                    "list the bundled ones, or validate a config")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run a scenario config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out-dir", default=None)
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    sub.add_parser("list", help="list bundled scenarios")
    p_val = sub.add_parser("validate", help="parse and check a config")
    p_val.add_argument("--config", required=True)

    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0

    if args.cmd == "list":
        for name, path in bundled_scenarios().items():
            cp = load_config(path)
            print(f"{name}: {cp['meta'].get('description', '')}")
        return 0
    if args.cmd == "validate":
        try:
            load_config(args.config)
        except (ConfigError, configparser.Error) as e:
            print(f"config error: {e}", file=sys.stderr)
            return 2
        print("ok")
        return 0
    # run
    path = args.config
    if not Path(path).exists() and path in bundled_scenarios():
        path = bundled_scenarios()[path]
    try:
        load_config(path)
    except (ConfigError, configparser.Error) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return run_scenario(path, out_dir=args.out_dir, workers=args.workers,
                        seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())
