"""Experiment manifests: JSON documents naming an experiment kind, its numeric
parameters and the function descriptors it uses.

    {"kind": "kolmogorov",
     "params": {"eps": 0.3, "T": 0.05, "n_g": 64, "pde_dt": 1e-4, "n_paths": 10000, "seed": 1},
     "fiber": {"s": [0.35, 0.32, 0.305, 0.015, 0.01], "x": [0.1, 0.45, 0.8, 0.3, 0.6]},
     "drift": {"name": "mean_field_sine", "M": 1.0, "eps": 0.3},
     "terminal": {"name": "heavy_energy", "eps": 0.3},
     "output": "runs/kolmogorov"}

Each runner returns (result dict, passed flag).
"""
from __future__ import annotations

import math
from typing import Any, Callable

import numpy as np

from . import acceptance, pde
from .control import (
    QuadraticBallLagrangian,
    TrigPotential,
    VerificationConfig,
    hjb_value,
    verification_experiment,
)
from .cylinder import (
    Cosine,
    CylinderFunction,
    InnerFunction,
    Quadratic,
    TruncatedFunctional,
    constant,
    cylinder,
    fourier_energy,
    ibp_residual,
    identity,
    square,
)
from .measures import (
    DEFAULT_MASS_TOL,
    TailError,
    WeightSequence,
    mecke_battery,
    mecke_test,
    sample_df_batch,
    truncation_index,
)
from .particles import (
    ConstantDrift,
    MeanFieldSine,
    ParticleEnsemble,
    PeriodicForce,
    SimulationParams,
    ZeroDrift,
    estimate_terminal,
    importance_sampled_terminal,
    invariance_test,
    ito_residual,
)
from .rng import RNGStream, _U64 as U64
from .stats import combined_stderr

KINDS = ("sample", "mecke", "invariance", "ibp", "ito", "kolmogorov", "girsanov", "hjb", "control-verify",
         "stability-ladder")
K = 3.0


class ConfigError(ValueError):
    """Invalid manifest; the message names the offending field."""


def _get(section: dict, key: str, default=None, kind: type | tuple = (int, float), where: str = "params",
         check: Callable[[Any], bool] | None = None, rule: str = ""):
    if key not in section:
        if default is None:
            raise ConfigError(f"{where}.{key}: required field missing")
        return default
    val = section[key]
    if kind is not None and not isinstance(val, kind) or isinstance(val, bool) and kind != bool:
        raise ConfigError(f"{where}.{key}: expected {kind}, got {type(val).__name__}")
    if check is not None and not check(val):
        raise ConfigError(f"{where}.{key}: value {val!r} out of range ({rule})")
    return val


def _pos(v):
    return v > 0


# ---- descriptors


def parse_inner(desc: dict, where: str) -> InnerFunction:
    try:
        return InnerFunction(k=tuple(desc.get("k", [1])), amplitude=float(desc.get("amplitude", 1.0)),
                             phase=float(desc.get("phase", 0.0)), cutoff=desc.get("cutoff", "smooth"),
                             eps=float(desc.get("eps", 0.0)), power=int(desc.get("power", 0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_outer(desc: dict, arity: int, where: str):
    name = desc.get("name")
    if name == "identity":
        return identity(arity, int(desc.get("index", 0)))
    if name == "constant":
        return constant(float(desc.get("c", 0.0)), arity)
    if name == "square":
        return square(arity)
    if name == "quadratic":
        return Quadratic(tuple(desc.get("b", [0.0] * arity)), desc.get("A"), float(desc.get("c", 0.0)))
    if name == "cosine":
        return Cosine(tuple(desc["w"]), float(desc.get("amplitude", 1.0)), float(desc.get("phase", 0.0)))
    raise ConfigError(f"{where}.name: unknown outer function {name!r}")


def parse_functional(desc: dict, where: str):
    if not isinstance(desc, dict):
        raise ConfigError(f"{where}: expected an object")
    name = desc.get("name")
    if name == "fourier_energy":
        return fourier_energy(int(desc.get("d", 1)))
    if name == "heavy_energy":
        return acceptance.heavy_energy(float(_get(desc, "eps", where=where)))
    if name == "cos_mean_sq":
        return acceptance.ladder_functional()
    if name == "truncated":
        return TruncatedFunctional(parse_functional(desc["base"], where + ".base"), float(_get(desc, "eps", where=where)))
    if "inners" in desc:
        inners = [parse_inner(d, f"{where}.inners[{j}]") for j, d in enumerate(desc["inners"])]
        if not inners:
            raise ConfigError(f"{where}.inners: need at least one inner function")
        outer = parse_outer(desc.get("outer", {"name": "identity"}), len(inners), where + ".outer")
        try:
            return CylinderFunction(outer, tuple(inners), desc.get("label", ""))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}.name: unknown functional {name!r}")


def parse_drift(desc: dict | None, where: str = "drift"):
    if desc is None:
        return ZeroDrift()
    name = desc.get("name")
    if name == "zero":
        return ZeroDrift()
    if name == "constant":
        return ConstantDrift(tuple(desc.get("c", [1.0])))
    if name == "mean_field_sine":
        return MeanFieldSine(M=float(desc.get("M", 1.0)), eps=float(_get(desc, "eps", where=where)))
    if name == "periodic_force":
        return PeriodicForce(M=float(desc.get("M", 1.0)), center=float(desc.get("center", 0.0)))
    raise ConfigError(f"{where}.name: unknown drift {name!r}")


def parse_lagrangian(desc: dict | None, where: str = "lagrangian"):
    desc = desc or {"name": "quadratic_ball", "R": 2.0, "terms": [[0.2, [1], 0.0]]}
    if desc.get("name") != "quadratic_ball":
        raise ConfigError(f"{where}.name: only 'quadratic_ball' is configurable from manifests")
    R = _get(desc, "R", where=where, check=lambda v: v >= 0, rule=">= 0")
    terms = tuple((float(a), tuple(k), float(ph)) for a, k, ph in desc.get("terms", []))
    return QuadraticBallLagrangian(R=float(R), d=int(desc.get("d", 1)),
                                   potential=TrigPotential(float(desc.get("c0", 0.0)), terms))


def parse_fiber(m: dict) -> ParticleEnsemble:
    fib = m.get("fiber")
    if not isinstance(fib, dict):
        raise ConfigError("fiber: required object {s, x} missing")
    try:
        s = np.asarray(fib["s"], dtype=float)
        x = np.asarray(fib["x"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"fiber: need numeric lists s and x ({exc})") from exc
    tail = float(fib.get("tail", max(0.0, 1.0 - s.sum())))
    try:
        w = WeightSequence(s, tail)
    except ValueError as exc:
        raise ConfigError(f"fiber.s: {exc}") from exc
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if len(x) != len(s):
        raise ConfigError("fiber.x: one position per weight required")
    return ParticleEnsemble(w, x)


def _seed(p: dict) -> int:
    return _get(p, "seed", 0, int, check=lambda v: 0 <= v <= U64, rule="u64")


def _sim(p: dict) -> SimulationParams:
    try:
        return SimulationParams(T=float(_get(p, "T", check=_pos, rule="> 0")), t0=float(p.get("t0", 0.0)),
                                dt=float(_get(p, "dt", 1e-3, check=_pos, rule="> 0")),
                                truncation_eps=float(_get(p, "eps", check=lambda v: 0 < v <= 1, rule="(0, 1]")),
                                n_paths=int(_get(p, "n_paths", 10_000, int, check=_pos, rule="> 0")),
                                seed=_seed(p))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from exc


def _require_compat(obj, eps: float, field: str) -> None:
    if obj.compat_eps < eps:
        raise ConfigError(f"{field}: compat_eps {obj.compat_eps} is below the truncation eps {eps}"
                          " (precondition: functional must be eps-compatible)")


# ---- runners


def run_sample(m, p, workers):
    n = _get(p, "n", 10, int, check=_pos, rule="> 0")
    d = _get(p, "d", 1, int, check=_pos, rule="> 0")
    tol = float(_get(p, "mass_tol", DEFAULT_MASS_TOL, check=lambda v: 0 < v < 1, rule="(0, 1)"))
    batch = sample_df_batch(RNGStream(_seed(p)).generator(), n, d, tol)
    recs = [batch.measure(i).to_record() for i in range(n)]
    return {"measures": recs, "n": n}, True


def run_mecke(m, p, workers):
    n = _get(p, "n", 100_000, int, check=lambda v: v >= 100, rule=">= 100")
    rows = []
    for j, (name, u, bound, exact) in enumerate(mecke_battery()):
        r = mecke_test(u, n, RNGStream(_seed(p), 10 + j), bound=bound, workers=workers)
        se = combined_stderr(r["stderr_lhs"], r["stderr_rhs"])
        rows.append(dict(r, name=name, exact=exact, diff=abs(r["lhs"] - r["rhs"]), combined_stderr=se,
                         passed=abs(r["lhs"] - r["rhs"]) <= K * se))
    return {"rows": rows}, all(r["passed"] for r in rows)


def _functional_list(m, key, default):
    if key not in m:
        return default
    return [parse_functional(d, f"{key}[{j}]") for j, d in enumerate(m[key])]


def run_invariance(m, p, workers):
    n = _get(p, "n", 20_000, int, check=_pos, rule="> 0")
    times = p.get("t", [0.1, 0.5])
    times = times if isinstance(times, list) else [times]
    if not times or any(not isinstance(t, (int, float)) or t <= 0 for t in times):
        raise ConfigError("params.t: times must be positive numbers")
    f = InnerFunction(k=(1,), cutoff="smooth", eps=0.05)
    fns = _functional_list(m, "functions", [cylinder(identity(), f, name="chi_cos"),
                                            cylinder(square(1), f, name="chi_cos_sq")])
    rows = []
    for j, t in enumerate(times):
        rows += invariance_test(fns, float(t), n, RNGStream(_seed(p), 20 + j), d=int(p.get("d", 1)), workers=workers)
    return {"rows": rows}, all(r["mean_pass"] and r["var_pass"] for r in rows)


def run_ibp(m, p, workers):
    n = _get(p, "n", 100_000, int, check=lambda v: v >= 100, rule=">= 100")
    if "pairs" in m:
        pairs = [(f"pair{j}", parse_functional(a, f"pairs[{j}][0]"), parse_functional(b, f"pairs[{j}][1]"))
                 for j, (a, b) in enumerate(m["pairs"])]
    else:
        pairs = acceptance.ibp_pairs()
    rows = []
    for j, (name, u, v) in enumerate(pairs):
        if v.threshold <= 0:
            raise ConfigError(f"pairs[{j}][1]: v must have a positive support threshold")
        r = ibp_residual(u, v, n, RNGStream(_seed(p), 50 + j), workers=workers)
        rows.append(dict(r, name=name, passed=abs(r["residual"]) <= K * r["combined_stderr"]))
    return {"rows": rows}, all(r["passed"] for r in rows)


def run_ito(m, p, workers):
    init = parse_fiber(m)
    u = parse_functional(m.get("function", {"inners": [{"k": [1], "cutoff": "smooth", "eps": 0.1}]}), "function")
    if u.threshold <= 0:
        raise ConfigError("function: Ito residual needs a positive support threshold")
    T = float(_get(p, "T", check=_pos, rule="> 0"))
    dt = float(_get(p, "dt", 1e-3, check=_pos, rule="> 0"))
    n = _get(p, "n_paths", 10_000, int, check=_pos, rule="> 0")
    try:
        r = ito_residual(u, init, T, n, RNGStream(_seed(p), 60), dt=dt, workers=workers)
    except TailError as exc:
        raise ConfigError(f"function: {exc}") from exc
    return r, abs(r["residual"]) <= K * r["stderr"]


def _terminal_and_drift(m, sim):
    g = parse_functional(m.get("terminal", {"name": "heavy_energy", "eps": sim.truncation_eps}), "terminal")
    drift = parse_drift(m.get("drift"))
    _require_compat(drift, sim.truncation_eps, "drift")
    _require_compat(g, sim.truncation_eps, "terminal")
    return g, drift


def run_kolmogorov(m, p, workers):
    init = parse_fiber(m)
    sim = _sim(p)
    g, drift = _terminal_and_drift(m, sim)
    if init.weights.tail > 0 and sim.truncation_eps <= init.weights.tail:
        raise ConfigError("params.eps: truncation eps must exceed the fiber tail mass")
    n_g = _get(p, "n_g", 64, int, check=lambda v: v >= 8, rule=">= 8")
    pde_dt = float(_get(p, "pde_dt", 1e-4, check=_pos, rule="> 0"))
    N = max(truncation_index(sim.truncation_eps, init.weights), 1)
    try:
        grid = pde.TensorGrid(init.d, N, n_g)
        sol = pde.solve_linear_backward(pde.FiberProblem(init.weights, N, g, T=sim.T, t0=sim.t0, drift=drift),
                                        grid, pde_dt, stride=int(p.get("stride", 0)),
                                        scheme=p.get("scheme", "upwind"))
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from exc
    v = float(pde.interpolate(sol.initial, init.positions[None, :N], grid)[0])
    b = m.get("budget", "calibrate")
    if b == "calibrate":
        cal = pde.calibrate_budget(init.weights.weights[:N], n_g, pde_dt, sim.T - sim.t0, d=init.d)
    else:
        cal = pde.ErrorBudget(float(_get(b, "C_grid", where="budget")), float(_get(b, "C_dt", where="budget")))
    budget = cal(grid.h, pde_dt, sol.terminal_max - sol.terminal_min)
    mc = estimate_terminal(g, init, drift, sim, workers=workers)
    if "snapshot" in m:
        pde.save_snapshot(m["snapshot"], sol.grid_function(0), {"mode": "linear"})
    ok = abs(v - mc["mean"]) <= K * mc["stderr"] + budget
    return {"v_pde": v, "mc": mc, "budget": budget, "calibration": cal.to_dict(), "N": N, "n_g": n_g,
            "pde_dt": pde_dt, "max_principle_violation": sol.max_principle_violation}, ok


def run_girsanov(m, p, workers):
    init = parse_fiber(m)
    sim = _sim(p)
    g, drift = _terminal_and_drift(m, sim)
    direct = estimate_terminal(g, init, drift, sim, workers=workers)
    weighted = importance_sampled_terminal(g, init, drift, sim, workers=workers)
    se = combined_stderr(direct["stderr"], weighted["stderr"])
    ok = abs(direct["mean"] - weighted["mean"]) <= K * se and \
        abs(weighted["weight_mean"] - 1) <= K * weighted["weight_stderr"]
    bound = 2 * math.exp((sim.T - sim.t0) * drift.bound**2)
    return {"direct": direct, "importance": weighted, "combined_stderr": se,
            "second_moment_bound": bound}, ok


def _control_inputs(m, p):
    init = parse_fiber(m)
    sim = _sim(p)
    L = parse_lagrangian(m.get("lagrangian"))
    G = parse_functional(m.get("terminal", {"inners": [{"k": [1], "cutoff": "step", "eps": sim.truncation_eps}],
                                            "outer": {"name": "quadratic", "b": [3.0]}}), "terminal")
    F = parse_functional(m["running"], "running") if "running" in m else None
    _require_compat(G, sim.truncation_eps, "terminal")
    if F is not None:
        _require_compat(F, sim.truncation_eps, "running")
    return init, sim, L, G, F


def run_hjb(m, p, workers):
    init, sim, L, G, F = _control_inputs(m, p)
    n_g = _get(p, "n_g", 64, int, check=lambda v: v >= 8, rule=">= 8")
    pde_dt = float(_get(p, "pde_dt", 1e-4, check=_pos, rule="> 0"))
    N = max(truncation_index(sim.truncation_eps, init.weights), 1)
    try:
        v, sol = hjb_value(L, F, G, init.weights, N, init.positions, sim.T, sim.t0, n_g, pde_dt,
                           p.get("scheme", "central"))
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from exc
    if "snapshot" in m:
        pde.save_snapshot(m["snapshot"], sol.grid_function(0), {"mode": "hjb"})
    return {"v_pde": v, "N": N, "n_g": n_g, "pde_dt": pde_dt}, True


def run_control_verify(m, p, workers):
    init, sim, L, G, F = _control_inputs(m, p)
    cfg = VerificationConfig(n_g=_get(p, "n_g", 64, int, check=lambda v: v >= 8, rule=">= 8"),
                             pde_dt=float(_get(p, "pde_dt", 1e-4, check=_pos, rule="> 0")),
                             scheme=p.get("scheme", "central"))
    try:
        rep = verification_experiment(L, F, G, init, sim, cfg, workers=workers)
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from exc
    zero = next(c for c in rep["candidates"] if c["name"] == "zero")
    rep["zero_margin"] = zero["cost"] - rep["v_pde"]
    rep["rows"] = rep["candidates"]
    return rep, rep["pass"]


def run_stability_ladder(m, p, workers):
    ladder = p.get("ladder", [0.4, 0.3, 0.2])
    if len(ladder) < 2 or any(not 0 < e <= 1 for e in ladder):
        raise ConfigError("params.ladder: need >= 2 truncation levels in (0, 1]")
    g = parse_functional(m.get("function", {"name": "cos_mean_sq"}), "function")
    n_f = _get(p, "n_fibers", 200, int, check=_pos, rule="> 0")
    r = pde.stability_ladder(lambda e: TruncatedFunctional(g, e), ladder, n_f, RNGStream(_seed(p), 100),
                             float(_get(p, "T", 0.05, check=_pos, rule="> 0")),
                             n_g=_get(p, "n_g", 16, int, check=lambda v: v >= 8, rule=">= 8"),
                             dt=float(_get(p, "dt", 1e-3, check=_pos, rule="> 0")))
    gaps = r["gaps"]
    mono = all(b["gap"] <= a["gap"] + K * combined_stderr(a["stderr"], b["stderr"]) for a, b in zip(gaps, gaps[1:]))
    return {"rows": gaps, "n": r["n"], "skipped": r["skipped"]}, mono


RUNNERS = {
    "sample": run_sample,
    "mecke": run_mecke,
    "invariance": run_invariance,
    "ibp": run_ibp,
    "ito": run_ito,
    "kolmogorov": run_kolmogorov,
    "girsanov": run_girsanov,
    "hjb": run_hjb,
    "control-verify": run_control_verify,
    "stability-ladder": run_stability_ladder,
}


def validate(manifest: Any) -> dict:
    if not isinstance(manifest, dict):
        raise ConfigError("manifest: top level must be a JSON object")
    kind = manifest.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind: unknown experiment kind {kind!r} (expected one of {', '.join(KINDS)})")
    params = manifest.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("params: must be an object")
    return params


def execute(manifest: dict, seed: int | None = None, workers: int = 1) -> tuple[dict, bool]:
    params = dict(validate(manifest))
    if seed is not None:
        params["seed"] = seed
    return RUNNERS[manifest["kind"]](manifest, params, workers)
