"""Finite-control stochastic game layer: pointwise best-response
selection for the per-player Hamiltonians and the Nash-deviation test.

Player i's Hamiltonian coordinate at a sample (x, z) is

    Htilde_i(u) = <z^i, r(t, x, u)> + h_i(x, u)

with z^i the i-th row of the gradient matrix z.  The selector iterates
pure best responses over the finite control products; ties break
lexicographically (first minimizer wins) so the table is deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .fbsde import cost, girsanov_weights, simulate_forward

__all__ = ["GameError", "minimax_select", "equilibrium_strategy",
           "nash_check", "write_nash_csv"]


class GameError(RuntimeError):
    pass


def _htilde(ds, t, x, z, u_vals, i):
    """Player i's Hamiltonian at every sample; u_vals is (players, K)."""
    r = ds.r_at(t, x, u_vals)  # (d, K)
    out = np.einsum("dK,dK->K", z[i], r)
    if ds.h is not None:
        out = out + np.asarray(ds.h(x, u_vals))[i]
    return out


def minimax_select(ds, t, x, z, max_sweeps=64):
    """Pure-strategy best-response fixed point at each sample.

    x is (d, K), z is (players, d, K).  Returns (players, K) control
    values.  Samples that cycle without reaching a fixed point raise an
    explicit error rather than picking silently."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    players = ds.n_players
    if players == 0:
        raise GameError("no control sets declared")
    K = x.shape[1]
    sets = [np.asarray(V, dtype=float) for V in ds.controls]
    idx = np.zeros((players, K), dtype=int)  # lexicographic start
    settled = np.zeros(K, dtype=bool)
    for _ in range(max_sweeps):
        changed = np.zeros(K, dtype=bool)
        for i in range(players):
            vals = np.stack([sets[j][idx[j]] for j in range(players)])
            best = np.full(K, np.inf)
            pick = np.zeros(K, dtype=int)
            for a, v in enumerate(sets[i]):
                vals[i] = v
                ham = _htilde(ds, t, x, z, vals, i)
                # strict improvement only: first minimizer wins ties
                better = ham < best - 1e-14
                pick[better] = a
                best[better] = ham[better]
            changed |= pick != idx[i]
            idx[i] = pick
        settled = ~changed
        if np.all(settled):
            break
    if not np.all(settled):
        bad = np.flatnonzero(~settled)
        raise GameError(
            f"best-response cycle at {len(bad)} of {K} samples "
            f"(first indices {bad[:5].tolist()}); no pure fixed point")
    return np.stack([sets[j][idx[j]] for j in range(players)])


def equilibrium_strategy(ds, sol=None):
    """Path strategy feeding minimax_select with z = G (J_x u)^T along
    paths; sol=None plays the zero-gradient game (z = 0)."""
    players = ds.n_players

    def strategy(t, X, l):
        pts = X.T  # (d, N)
        N = pts.shape[1]
        if sol is None:
            z = np.zeros((players, ds.d, N))
        else:
            gr = sol.grad_eval(t, pts)  # (m, d, N)
            Gv = ds.G_at(t, pts)
            z = np.einsum("idN,mdN->miN", Gv, gr)
            if z.shape[0] < players:
                raise GameError("solution has fewer components than "
                                "players")
            z = z[:players]
        return minimax_select(ds, t, pts, z).T  # (N, players)

    return strategy


def _deviation_strategy(base, player, value):
    def strategy(t, X, l):
        u = np.asarray(base(t, X, l), dtype=float).copy()
        u[:, player] = value
        return u
    return strategy


def _paired_payoffs(ds, batch, i):
    """Per-path weighted payoff for player i (no averaging)."""
    N, steps = batch.N, batch.steps
    running = np.zeros(N)
    if ds.h is not None:
        for l in range(steps):
            pts = batch.X[:, l, :].T
            u = None if batch.controls is None else batch.controls[:, l, :].T
            running += batch.h_step * np.asarray(ds.h(pts, u))[i]
    terminal = np.asarray(ds.g(batch.X[:, -1, :].T))[i]
    return batch.rho * (running + terminal)


def nash_check(ds, sol, x0, t, T, h_step, N, seed, deviations=None):
    """Deviation test for the best-response strategy profile.

    For every player and every constant deviation the cost difference
    dJ = J_i(deviation) - J_i(equilibrium) is estimated on paired paths;
    the profile passes when dJ >= -3 stderr throughout."""
    base = simulate_forward(ds, x0, t, T, h_step, N, seed)
    eq = equilibrium_strategy(ds, sol)
    batch_eq = girsanov_weights(ds, base, eq)
    players = ds.n_players
    if deviations is None:
        deviations = [list(V) for V in ds.controls]
    rows = []
    verdict = True
    for i in range(players):
        pay_eq = _paired_payoffs(ds, batch_eq, i)
        for v in deviations[i]:
            batch_dev = girsanov_weights(
                ds, base, _deviation_strategy(eq, i, v))
            pay_dev = _paired_payoffs(ds, batch_dev, i)
            diff = pay_dev - pay_eq
            dJ = float(np.mean(diff))
            stderr = float(np.std(diff, ddof=1) / np.sqrt(N)) if N > 1 \
                else 0.0
            ok = dJ >= -3 * stderr
            verdict = verdict and ok
            rows.append({"player": i, "deviation": float(v), "dJ": dJ,
                         "stderr": stderr, "pass": ok})
    J_eq = [cost(ds, batch_eq, i) for i in range(players)]
    return {"verdict": verdict, "rows": rows, "J_equilibrium": J_eq,
            "N": N, "seed": seed, "h_step": h_step}


def write_nash_csv(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["player", "deviation", "dJ", "stderr"])
        for row in report["rows"]:
            writer.writerow([row["player"] + 1, f"{row['deviation']:.12g}",
                             f"{row['dJ']:.15g}", f"{row['stderr']:.15g}"])
