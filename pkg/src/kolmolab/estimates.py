"""Quantitative estimate checks: maximum principle, pointwise
domination by the scalar operator, the weighted gradient bound, and the
scalar-component representation formula.

All sup norms are taken on an interior probe box (half the domain by
default) to keep artificial-boundary pollution out of the constants;
every result records that restriction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evolve import _Stepper, _time_ladder, evolve
from .grids import Grid, GridFunction, gradient
from .operators import scalar_comparison

__all__ = ["EstimateResult", "max_principle_check", "pointwise_check",
           "weighted_gradient_check", "representation_residual"]


@dataclass
class EstimateResult:
    name: str
    measured: float
    bound: float = None  # None when the theory asserts existence only
    refinement_trend: list = field(default_factory=list)
    verdict: str = "PASS"  # PASS / FAIL / INCONCLUSIVE
    notes: dict = field(default_factory=dict)

    @property
    def margin(self):
        return None if self.bound is None else self.bound - self.measured

    def as_dict(self):
        return {"name": self.name, "measured": self.measured,
                "bound": self.bound, "margin": self.margin,
                "refinement_trend": self.refinement_trend,
                "verdict": self.verdict, "notes": self.notes}


def _bound_verdict(measured, bound, trend):
    ok = measured <= bound * 1.01
    if len(trend) >= 2:
        ok = ok and trend[-1] <= trend[0] * (1 + 1e-9)
    return "PASS" if ok else "FAIL"


def max_principle_check(spec, f: GridFunction, s, t, epsilon, kappa0,
                        dt_list=(4e-3, 2e-3), probe_L=None):
    """Measured growth of the sup norm against exp(eps kappa0 (t-s))."""
    probe_L = probe_L if probe_L is not None else f.grid.L / 2
    fnorm = f.sup_norm()
    trend = []
    for dt in dt_list:
        u = evolve(spec, f, s, t, dt)
        trend.append(u.sup_norm(probe_L) / fnorm)
    measured = trend[-1]
    bound = float(np.exp(epsilon * kappa0 * (t - s)))
    return EstimateResult(
        "max_principle", measured, bound, trend,
        _bound_verdict(measured, bound, trend),
        {"epsilon": epsilon, "kappa0": kappa0, "probe_L": probe_L})


def pointwise_check(spec, f: GridFunction, s, T, HJ, n_t=4, dt=2e-3,
                    probe_L=None, floor=1e-14):
    """Sup over probe nodes and intermediate times of
    |u(t,x)|^2 / (G(t,s)|f|^2)(x) against exp(2 H_J (T-s))."""
    probe_L = probe_L if probe_L is not None else f.grid.L / 2
    mask = f.grid.interior_mask(probe_L)
    sc = scalar_comparison(spec)
    f2 = GridFunction(f.grid, 1, np.sum(f.values ** 2, axis=0)[None, :],
                      bc=f.bc)
    check_times = np.linspace(s, T, n_t + 1)[1:]
    measured = 0.0
    floored_frac = 0.0
    uv, gv = f, f2
    prev = s
    for tk in check_times:
        uv = evolve(spec, uv, prev, tk, dt)
        gv = evolve(sc, gv, prev, tk, dt)
        prev = tk
        num = np.sum(uv.values ** 2, axis=0)[mask]
        den = gv.values[0, mask]
        floored = den < floor
        floored_frac = max(floored_frac, np.mean(floored))
        ratio = num / np.maximum(den, floor)
        measured = max(measured, float(np.max(ratio[~floored]))
                       if np.any(~floored) else 0.0)
    bound = float(np.exp(2 * HJ * (T - s)))
    verdict = _bound_verdict(measured, bound, [])
    if floored_frac > 0.01:
        verdict = "INCONCLUSIVE"
    return EstimateResult(
        "pointwise_domination", measured, bound, [],
        verdict, {"HJ": HJ, "floored_fraction": float(floored_frac),
                  "probe_L": probe_L})


def _weighted_grad_sup(spec, weight, u: GridFunction, t, mask):
    grad = gradient(u)  # (m, d, N)
    pts = u.grid.points()
    Mv = weight.M_at(t, pts)  # (d, d, N)
    # (M (J_x u)^T)_{a m} = sum_d M_{a d} D_d u_m
    wg = np.einsum("adN,mdN->amN", Mv, grad)
    return float(np.max(np.sqrt(np.sum(wg[:, :, mask] ** 2, axis=(0, 1)))))


def weighted_gradient_check(spec, weight, f_fn, s, T, t_list, grid_pair,
                            dt=2e-3, probe_L=None, bc="dirichlet"):
    """sqrt(t-s) * sup |M (J_x u)^T| / sup|f| measured on two grid
    resolutions; the theory asserts existence of the constant, so the
    acceptance is finiteness plus refinement stability (<= 5% drift)."""
    trend = []
    for grid in grid_pair:
        probe = probe_L if probe_L is not None else grid.L / 2
        mask = grid.interior_mask(probe)
        f = GridFunction.from_callable(grid, spec.m, f_fn, bc=bc)
        fnorm = f.sup_norm()
        best = 0.0
        u, prev = f, s
        for t in sorted(t_list):
            u = evolve(spec, u, prev, t, dt)
            prev = t
            val = np.sqrt(t - s) * _weighted_grad_sup(
                spec, weight, u, t, mask) / fnorm
            best = max(best, val)
        trend.append(best)
    measured = trend[-1]
    drift = abs(trend[-1] - trend[0]) / max(abs(trend[0]), 1e-300)
    if drift > 0.20:
        verdict = "INCONCLUSIVE"
    elif np.isfinite(measured) and drift <= 0.05:
        verdict = "PASS"
    else:
        verdict = "FAIL"
    return EstimateResult("weighted_gradient", measured, None, trend,
                          verdict, {"drift": drift, "t_list": list(t_list)})


def representation_residual(spec, f: GridFunction, kbar, s, t, dt,
                            probe_L=None):
    """Defect of the scalar-component representation

        (G_vec(t,s)f)_kbar = G(t,s) f_kbar + int_s^t G(t,r) (S r) dr,
        (S r) = sum_i <row_kbar Btilde_i, D_i G_vec(r,s)f>
              + <row_kbar C, G_vec(r,s)f>,

    with the r-integral realized by stepping the inhomogeneous scalar
    problem alongside the vector solve on the same ladder."""
    grid = f.grid
    probe_L = probe_L if probe_L is not None else grid.L / 2
    mask = grid.interior_mask(probe_L)
    pts = grid.points()
    sc = scalar_comparison(spec)

    vec_step = _Stepper(spec, grid, f.bc)
    sca_step = _Stepper(sc, grid, f.bc)
    times = _time_ladder(s, t, dt)
    u = f.values.copy()
    v = f.values[kbar:kbar + 1].copy()  # scalar transport of f_kbar
    w = np.zeros_like(v)  # integral term
    for l in range(1, len(times)):
        step = times[l] - times[l - 1]
        # left-endpoint quadrature: source from the previous level, so
        # the defect is a genuine O(dt) time-integration error
        ug = gradient(GridFunction(grid, spec.m, u, bc=f.bc))
        Btv = spec.Btilde_at(times[l - 1], pts)  # (d, m, m, N)
        Cv = spec.C_at(times[l - 1], pts)
        src = np.einsum("ikN,kiN->N", Btv[:, kbar, :, :], ug) \
            + np.einsum("kN,kN->N", Cv[kbar], u)
        u = vec_step.step(u, times[l], step)
        v = sca_step.step(v, times[l], step)
        w = sca_step.step(w + step * src[None, :], times[l], step)
    resid = u[kbar] - v[0] - w[0]
    return float(np.max(np.abs(resid[mask])))
