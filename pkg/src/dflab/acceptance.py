"""Acceptance suite: identity, oracle and property checks at desk scale with pinned seeds.

Each criterion returns a dict with name, measured, target, tolerance, pass and
details; ``run`` prints one line per criterion.
"""
from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import pde
from .control import QuadraticBallLagrangian, TrigPotential, VerificationConfig, ZeroHamiltonian, verification_experiment
from .cylinder import (
    InnerFunction,
    TruncatedFunctional,
    constant,
    cylinder,
    ibp_residual,
    identity,
    square,
    Cosine,
    Quadratic,
)
from .measures import (
    WeightSequence,
    conditional_truncate,
    mecke_battery,
    mecke_test,
    sample_pd_batch,
    total_variation,
    tv_tail_bound,
)
from .particles import (
    MeanFieldSine,
    ParticleEnsemble,
    SimulationParams,
    ZeroDrift,
    estimate_terminal,
    heat_oracle_linear,
    importance_sampled_terminal,
    invariance_test,
    ito_residual,
)
from .rng import RNGStream
from .stats import combined_stderr, estimate

SEED = 20240611
K = 3.0


def _row(name, measured, target, tolerance, ok, **details) -> dict:
    return {"name": name, "measured": measured, "target": target, "tolerance": tolerance, "pass": bool(ok),
            "details": details}


def heavy_energy(eps: float):
    """|sum_{s_i >= eps} s_i exp(2 pi i x_i)|^2, compatible at eps."""
    return cylinder(
        square(2),
        InnerFunction(k=(1,), cutoff="step", eps=eps),
        InnerFunction(k=(1,), cutoff="step", eps=eps, phase=-math.pi / 2),
        name="heavy_energy",
    )


# ---- 1


def tail_mass(seed: int = SEED, n: int = 100_000, workers: int = 1) -> dict:
    gen = RNGStream(seed, 1).generator()
    masses, tails = sample_pd_batch(gen, n)
    rows = []
    for eps in (0.05, 0.1, 0.2):
        vals = np.sum(np.where(masses < eps, masses, 0.0), axis=1) + tails
        e = estimate(vals)
        rows.append({"eps": eps, "mean": e.mean, "stderr": e.stderr, "pass": abs(e.mean - eps) <= K * e.stderr})
    worst = max(rows, key=lambda r: abs(r["mean"] - r["eps"]) / r["stderr"])
    return _row("tail-mass", worst["mean"], worst["eps"], f"{K}*stderr={K * worst['stderr']:.2e}",
                all(r["pass"] for r in rows), rows=rows)


# ---- 2


def mecke(seed: int = SEED, n: int = 100_000, workers: int = 1) -> dict:
    rows = []
    for j, (name, u, bound, exact) in enumerate(mecke_battery()):
        r = mecke_test(u, n, RNGStream(seed, 10 + j), bound=bound, workers=workers)
        se = combined_stderr(r["stderr_lhs"], r["stderr_rhs"])
        rows.append(dict(r, name=name, exact=exact, combined_stderr=se,
                         pass_=abs(r["lhs"] - r["rhs"]) <= K * se))
    worst = max(rows, key=lambda r: abs(r["lhs"] - r["rhs"]) / r["combined_stderr"])
    return _row("mecke", abs(worst["lhs"] - worst["rhs"]), 0.0, f"{K}*combined stderr",
                all(r["pass_"] for r in rows), rows=rows)


# ---- 3


def invariance(seed: int = SEED, n: int = 20_000, workers: int = 1) -> dict:
    f = InnerFunction(k=(1,), cutoff="smooth", eps=0.05)
    fns = [cylinder(identity(), f, name="chi_cos"), cylinder(square(1), f, name="chi_cos_sq")]
    rows = []
    for j, t in enumerate((0.1, 0.5)):
        rows += invariance_test(fns, t, n, RNGStream(seed, 20 + j), workers=workers)
    ok = all(r["mean_pass"] and r["var_pass"] for r in rows)
    z = max(max(abs(r["mean_t"] - r["mean_0"]) / r["mean_stderr"], abs(r["var_t"] - r["var_0"]) / r["var_stderr"])
            for r in rows)
    return _row("invariance", z, 0.0, f"{K} (in stderr units)", ok, rows=rows)


# ---- 4

HEAT_FIBERS = [
    ((0.5, 0.3, 0.15, 0.05), (0.1, 0.45, 0.8, 0.3)),
    ((0.6, 0.25, 0.1, 0.05), (0.0, 0.2, 0.55, 0.9)),
]


def heat_oracle(seed: int = SEED, n: int = 10_000, workers: int = 1, dt: float = 0.01) -> dict:
    f = InnerFunction(k=(1,), cutoff="smooth", eps=0.05)
    u = cylinder(identity(), f)
    rows = []
    for j, (s, x) in enumerate(HEAT_FIBERS):
        w = WeightSequence(np.array(s))
        x0 = np.array(x).reshape(-1, 1)
        params = SimulationParams(T=dt, dt=dt, truncation_eps=0.05, n_paths=n, seed=seed + 40 + j)
        r = estimate_terminal(u, ParticleEnsemble(w, x0), ZeroDrift(), params, workers=workers)
        exact = heat_oracle_linear(w.weights, x0, f.mass_factor(w.weights), (1,), dt)
        rows.append({"s": s, "x": x, "mc": r["mean"], "stderr": r["stderr"], "oracle": exact,
                     "pass": abs(r["mean"] - exact) <= K * r["stderr"]})
    worst = max(rows, key=lambda r: abs(r["mc"] - r["oracle"]) / r["stderr"])
    return _row("heat-oracle", worst["mc"], worst["oracle"], f"{K}*stderr={K * worst['stderr']:.2e}",
                all(r["pass"] for r in rows), rows=rows)


# ---- 5


def ibp_pairs():
    f = InnerFunction(k=(1,), cutoff="smooth", eps=0.05)
    g = InnerFunction(k=(2,), cutoff="smooth", eps=0.1, phase=0.4, power=1)
    h = InnerFunction(k=(1,), cutoff="step", eps=0.2, phase=-math.pi / 2)
    u1 = cylinder(identity(), f, name="chi_cos")
    return [
        ("chi_cos,chi_cos", u1, u1),
        ("const,chi_cos", cylinder(constant(2.5), f, name="const"), u1),
        ("quad,cosine", cylinder(Quadratic((0.5, 1.0), ((1.0, 0.3), (0.3, -0.5))), f, g),
         cylinder(Cosine((1.5, -2.0), phase=0.2), g, h)),
    ]


def ibp(seed: int = SEED, n: int = 100_000, workers: int = 1) -> dict:
    rows = []
    for j, (name, u, v) in enumerate(ibp_pairs()):
        r = ibp_residual(u, v, n, RNGStream(seed, 50 + j), workers=workers)
        rows.append(dict(r, name=name, pass_=abs(r["residual"]) <= K * r["combined_stderr"]))
    worst = max(rows, key=lambda r: abs(r["residual"]) / max(r["combined_stderr"], 1e-300))
    return _row("ibp", worst["residual"], 0.0, f"{K}*combined stderr={K * worst['combined_stderr']:.2e}",
                all(r["pass_"] for r in rows), rows=rows)


# ---- 6

ITO_FIBER = ((0.5, 0.3, 0.15, 0.05), (0.23, 0.27, 0.7, 0.1))


def ito(seed: int = SEED, n: int = 10_000, workers: int = 1, dt: float = 1e-3, horizon: float = 0.05) -> dict:
    f = InnerFunction(k=(1,), cutoff="smooth", eps=0.1)
    u = cylinder(identity(), f)
    s, x = ITO_FIBER
    w = WeightSequence(np.array(s))
    x0 = np.array(x).reshape(-1, 1)
    r = ito_residual(u, ParticleEnsemble(w, x0), horizon, n, RNGStream(seed, 60), dt=dt, workers=workers)
    oracle_T = heat_oracle_linear(w.weights, x0, f.mass_factor(w.weights), (1,), horizon)
    ok = abs(r["residual"]) <= K * r["stderr"]
    return _row("ito", r["residual"], 0.0, f"{K}*stderr={K * r['stderr']:.2e}", ok,
                oracle_E_uT=oracle_T, oracle_E_int_Lc=oracle_T - r["u0"], **r)


# ---- 7

DRIFT_FIBER = ((0.5, 0.3, 0.15, 0.05), (0.1, 0.45, 0.8, 0.3))


def girsanov(seed: int = SEED, n: int = 10_000, workers: int = 1) -> dict:
    s, x = DRIFT_FIBER
    init = ParticleEnsemble(WeightSequence(np.array(s)), np.array(x).reshape(-1, 1))
    eps = 0.1
    g = heavy_energy(eps)
    drift = MeanFieldSine(M=1.0, eps=eps)
    params = SimulationParams(T=0.1, dt=1e-3, truncation_eps=eps, n_paths=n, seed=seed + 70)
    direct = estimate_terminal(g, init, drift, params, workers=workers)
    weighted = importance_sampled_terminal(g, init, drift, params, workers=workers)
    se = combined_stderr(direct["stderr"], weighted["stderr"])
    agree = abs(direct["mean"] - weighted["mean"]) <= K * se
    mart = abs(weighted["weight_mean"] - 1.0) <= K * weighted["weight_stderr"]
    second = weighted["weight_second_moment"] <= 2.0 * math.exp(params.T * drift.bound**2)
    return _row("girsanov", direct["mean"] - weighted["mean"], 0.0, f"{K}*combined stderr={K * se:.2e}",
                agree and mart, direct=direct, importance=weighted, martingale_pass=mart,
                second_moment_bound_pass=second)


# ---- 8

KOLMOGOROV_FIBER = ((0.35, 0.32, 0.305, 0.015, 0.01), (0.1, 0.45, 0.8, 0.3, 0.6))


def kolmogorov(seed: int = SEED, n: int = 10_000, workers: int = 1, n_g: int = 64, pde_dt: float = 1e-4,
               mc_dt: float = 5e-4, horizon: float = 0.05) -> dict:
    eps = 0.3
    s, x = KOLMOGOROV_FIBER
    w = WeightSequence(np.array(s))
    x0 = np.array(x).reshape(-1, 1)
    g = heavy_energy(eps)
    drift = MeanFieldSine(M=1.0, eps=eps)
    from .measures import truncation_index

    N = truncation_index(eps, w)
    grid = pde.TensorGrid(1, N, n_g)
    sol = pde.solve_linear_backward(pde.FiberProblem(w, N, g, T=horizon, drift=drift), grid, pde_dt)
    v = float(pde.interpolate(sol.initial, x0[None, :N], grid)[0])
    calib = pde.calibrate_budget(w.weights[:N], n_g, pde_dt, horizon)
    osc = sol.terminal_max - sol.terminal_min
    budget = calib(grid.h, pde_dt, osc)
    params = SimulationParams(T=horizon, dt=mc_dt, truncation_eps=eps, n_paths=n, seed=seed + 80)
    mc = estimate_terminal(g, ParticleEnsemble(w, x0), drift, params, workers=workers)
    ok = abs(v - mc["mean"]) <= K * mc["stderr"] + budget
    return _row("kolmogorov", v, mc["mean"], f"{K}*stderr+budget={K * mc['stderr'] + budget:.2e}", ok,
                N=N, budget=budget, calibration=calib.to_dict(), mc=mc,
                max_principle_violation=sol.max_principle_violation)


# ---- 9

CONTROL_FIBER = ((0.5, 0.3, 0.12, 0.08), (0.15, 0.8, 0.3, 0.6))


def control_problem(kappa: float = 3.0, R: float = 2.0, eps: float = 0.25):
    G = cylinder(Quadratic((kappa,)), InnerFunction(k=(1,), cutoff="step", eps=eps), name="terminal")
    L = QuadraticBallLagrangian(R=R, potential=TrigPotential(0.0, ((0.2, (1,), 0.0),)))
    return L, G


def hjb_verify(seed: int = SEED, n: int = 10_000, workers: int = 1, horizon: float = 0.2) -> dict:
    eps = 0.25
    L, G = control_problem(eps=eps)
    s, x = CONTROL_FIBER
    init = ParticleEnsemble(WeightSequence(np.array(s)), np.array(x).reshape(-1, 1))
    params = SimulationParams(T=horizon, dt=1e-3, truncation_eps=eps, n_paths=n, seed=seed + 90)
    rep = verification_experiment(L, None, G, init, params, VerificationConfig(n_g=64, pde_dt=1e-4), workers=workers)
    zero = next(c for c in rep["candidates"] if c["name"] == "zero")
    zero_margin = zero["cost"] - rep["v_pde"] > K * zero["stderr"]
    opt = next(c for c in rep["candidates"] if c["name"] == "optimal")
    return _row("hjb-verify", opt["cost"], rep["v_pde"], f"{K}*stderr+budget={K * opt['stderr'] + rep['budget']:.2e}",
                rep["pass"] and zero_margin, zero_margin_pass=zero_margin, report=rep)


# ---- 10


def ladder_functional():
    """(int cos(2 pi x^1) dmu)^2, weakly continuous."""
    return cylinder(square(1), InnerFunction(k=(1,), cutoff="none"), name="cos_mean_sq")


def stability_ladder(seed: int = SEED, n_fibers: int = 200, workers: int = 1, horizon: float = 0.05) -> dict:
    ladder = (0.4, 0.3, 0.2)
    g = ladder_functional()
    r = pde.stability_ladder(lambda e: TruncatedFunctional(g, e), ladder, n_fibers, RNGStream(seed, 100),
                             horizon, n_g=16, dt=1e-3)
    gaps = r["gaps"]
    finite = all(math.isfinite(x["gap"]) for x in gaps)
    mono = all(b["gap"] <= a["gap"] + K * combined_stderr(a["stderr"], b["stderr"]) for a, b in zip(gaps, gaps[1:]))
    tv_ok, worst = True, -math.inf
    for mu in r["fibers"]:
        for eps in ladder:
            lhs = total_variation(mu, conditional_truncate(mu, eps))
            rhs = tv_tail_bound(mu, eps)
            worst = max(worst, lhs - rhs)
            tv_ok &= lhs <= rhs + 1e-12
    return _row("stability-ladder", [x["gap"] for x in gaps], "non-increasing", f"{K}*combined stderr",
                finite and mono and tv_ok and r["skipped"] == 0, gaps=gaps, skipped=r["skipped"],
                tv_bound_pass=tv_ok, tv_worst_excess=worst, n=r["n"])


# ---- 11


def solver_selftest(seed: int = SEED, n: int = 0, workers: int = 1) -> dict:
    s = [0.5, 0.3]
    errs = [pde.heat_oracle_error(s, ng, dt, 0.05) for ng, dt in ((16, 4e-4), (32, 1e-4), (64, 2.5e-5))]
    ratios = [abs(errs[j] / errs[j + 1]) for j in range(2)]
    ratio_ok = all(3.0 <= r <= 5.0 for r in ratios)

    w = WeightSequence(np.array([0.4, 0.35, 0.25]))
    g = heavy_energy(0.2)
    grid = pde.TensorGrid(1, 3, 16)
    heat = pde.solve_linear_backward(pde.FiberProblem(w, 3, g, T=0.05), grid, 1e-3, stride=1)
    hjb = pde.solve_hjb(pde.FiberProblem(w, 3, g, T=0.05, hamiltonian=ZeroHamiltonian()), grid, 1e-3, stride=1)
    bitwise = all(np.array_equal(a, b) for a, b in zip(heat.values, hjb.values))

    violations = [heat.max_principle_violation]
    for M, sd in ((1.0, 0), (3.0, 1), (8.0, 2)):
        sol = pde.solve_linear_backward(pde.FiberProblem(w, 3, g, T=0.05, drift=MeanFieldSine(M=M, eps=0.2)),
                                        grid, 1e-3)
        violations.append(sol.max_principle_violation)
    mp_ok = max(violations) <= 1e-12
    return _row("solver-selftest", ratios, "[3, 5]", "bitwise; max-principle 1e-12", ratio_ok and bitwise and mp_ok,
                errors=errs, bitwise_pass=bitwise, max_principle_violation=max(violations))


CRITERIA: dict[str, Callable[..., dict]] = {
    "tail-mass": tail_mass,
    "mecke": mecke,
    "invariance": invariance,
    "heat-oracle": heat_oracle,
    "ibp": ibp,
    "ito": ito,
    "girsanov": girsanov,
    "kolmogorov": kolmogorov,
    "hjb-verify": hjb_verify,
    "stability-ladder": stability_ladder,
    "solver-selftest": solver_selftest,
}


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def format_row(i: int, row: dict) -> str:
    status = "PASS" if row["pass"] else "FAIL"
    return (f"[{status}] {i:>2} {row['name']:<17} measured={_fmt(row['measured'])} target={_fmt(row['target'])}"
            f" tol={row['tolerance']} ({row.get('seconds', 0):.1f}s)")


def run(names=None, seed: int = SEED, workers: int = 1, echo: bool = True) -> list[dict]:
    names = list(CRITERIA) if not names or names == ["all"] else names
    unknown = [n for n in names if n not in CRITERIA]
    if unknown:
        raise KeyError(f"unknown criteria: {', '.join(unknown)}")
    rows = []
    for name in names:
        t = time.perf_counter()
        row = CRITERIA[name](seed=seed, workers=workers)
        row["seconds"] = time.perf_counter() - t
        rows.append(row)
        if echo:
            print(format_row(list(CRITERIA).index(name) + 1, row), flush=True)
    return rows
