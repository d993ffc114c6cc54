"""Monte-Carlo side of the operator: forward diffusion paths, the
identification Y = u(tau, X_tau), Z = G (J_x u)^T along paths, the
backward-equation residual, exponential-martingale reweighting for
controlled drifts, and weighted cost functionals.

Path generation uses a counter-based generator keyed per path so the
ensemble is schedule independent: path p always consumes the stream
Philox(key=(seed, p)) no matter how the batch is partitioned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .semilinear import sqrtQ_at

__all__ = ["FbsdeError", "DiffusionSpec", "PathBatch", "YZProcess",
           "simulate_forward", "identify_yz", "bsde_residual",
           "girsanov_weights", "cost", "write_kpb", "read_kpb"]

_EXPLODE = 1e9


class FbsdeError(RuntimeError):
    pass


@dataclass
class DiffusionSpec:
    """Forward diffusion dX = b dtau + G dW tied to an operator spec.

    G defaults to sqrt(2 Q) so that Q = G^2 / 2 holds by construction;
    an explicit G_fn(t, pts) -> (d, d, N) may be supplied instead and is
    then checked against Q.  r = r1(t, x) + r2(x, u) is the controlled
    drift direction, h the running cost per player, g the terminal cost.
    """

    op: object  # OperatorSpec supplying b, Q, Btilde
    g: object  # terminal cost callable pts (d,N) -> (m,N)
    G_fn: object = None
    r1: tuple = None  # d CoeffExprs, state-feedback part of r
    r2: object = None  # callable (pts, u (players,N)) -> (d,N)
    controls: tuple = ()  # per-player finite sets of control values
    h: object = None  # running cost callable (pts, u) -> (players,N)
    r_bound: float = None

    @property
    def d(self):
        return self.op.d

    @property
    def n_players(self):
        return len(self.controls)

    def G_at(self, t, pts):
        if self.G_fn is not None:
            return np.asarray(self.G_fn(t, pts), dtype=float)
        return np.sqrt(2.0) * sqrtQ_at(self.op, t, pts)

    def r_at(self, t, pts, u=None):
        """(d, N) controlled drift direction."""
        N = pts.shape[1]
        out = np.zeros((self.d, N))
        if self.r1 is not None:
            for i, e in enumerate(self.r1):
                out[i] += e(t, pts)
        if self.r2 is not None and u is not None:
            out += np.asarray(self.r2(pts, u), dtype=float)
        return out

    def check_q(self, box, t_list=(0.0, 0.5), n_samples=64, tol=1e-10,
                seed=0):
        """Verify Q = G^2 / 2 entrywise at random samples."""
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-box, box, (self.d, n_samples))
        worst = 0.0
        for t in t_list:
            G = self.G_at(t, pts)
            Q = self.op.Q_at(t, pts)
            GG = 0.5 * np.einsum("abN,bcN->acN", G, G)
            worst = max(worst, float(np.max(np.abs(GG - Q))))
        if worst > tol:
            raise FbsdeError(
                f"G does not reproduce the diffusion matrix: |G^2/2 - Q| "
                f"= {worst:.3e} > {tol:g}")
        return worst


@dataclass
class PathBatch:
    N: int
    h_step: float
    t0: float
    times: np.ndarray  # (steps + 1,)
    X: np.ndarray  # (N, steps + 1, d)
    dW: np.ndarray  # (N, steps, d)
    seed: int
    rho: np.ndarray = None  # (N,)
    controls: np.ndarray = None  # (N, steps, players)
    exploded: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    @property
    def steps(self):
        return self.dW.shape[1]

    @property
    def d(self):
        return self.X.shape[2]


@dataclass
class YZProcess:
    Y: np.ndarray  # (N, steps + 1, m)
    Z: np.ndarray  # (N, steps + 1, m, d), Z[n,l,k,i] = (G (J_x u)^T)_{ik}
    source: object  # the MildSolution sampled
    valid: np.ndarray  # (N,) bool, paths that stayed inside the box
    n_excluded: int = 0


def _path_normals(seed, p, steps, d):
    gen = np.random.Generator(np.random.Philox(key=[seed, p]))
    return gen.standard_normal((steps, d))


def simulate_forward(ds: DiffusionSpec, x0, t, T, h_step, N, seed):
    """Euler-Maruyama ensemble of the forward diffusion."""
    d = ds.d
    steps = int(round((T - t) / h_step))
    if steps < 1 or abs(steps * h_step - (T - t)) > 1e-10 * max(1.0, T - t):
        raise FbsdeError("h_step must divide the horizon T - t")
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (d,))
    times = t + h_step * np.arange(steps + 1)
    sqh = np.sqrt(h_step)
    dW = np.empty((N, steps, d))
    for p in range(N):
        dW[p] = sqh * _path_normals(seed, p, steps, d)
    X = np.empty((N, steps + 1, d))
    X[:, 0, :] = x0
    alive = np.ones(N, dtype=bool)
    for l in range(steps):
        pts = X[:, l, :].T  # (d, N)
        bv = ds.op.b_at(times[l], pts)  # (d, N)
        Gv = ds.G_at(times[l], pts)  # (d, d, N)
        noise = np.einsum("abN,Nb->Na", Gv, dW[:, l, :])
        nxt = X[:, l, :] + h_step * bv.T + noise
        blown = np.max(np.abs(nxt), axis=1) > _EXPLODE
        alive &= ~blown
        # freeze exploded paths at their last finite state
        nxt[~alive] = X[~alive, l, :]
        X[:, l + 1, :] = nxt
    return PathBatch(N=N, h_step=float(h_step), t0=float(t), times=times,
                     X=X, dW=dW, seed=int(seed),
                     rho=np.ones(N),
                     exploded=np.flatnonzero(~alive))


def identify_yz(sol, ds: DiffusionSpec, batch: PathBatch,
                max_escape_frac=0.05):
    """Sample Y = u(tau, X_tau) and Z = G (J_x u)^T along the paths."""
    grid = sol.grid
    N, steps = batch.N, batch.steps
    m = sol.m
    inside = np.max(np.abs(batch.X), axis=(1, 2)) < grid.L
    inside &= np.isin(np.arange(N), batch.exploded, invert=True)
    n_excluded = int(N - np.sum(inside))
    if n_excluded > max_escape_frac * N:
        raise FbsdeError(
            f"{n_excluded}/{N} paths escaped the box [-{grid.L}, {grid.L}]"
            f"^d; enlarge L before identifying Y and Z")
    Y = np.zeros((N, steps + 1, m))
    Z = np.zeros((N, steps + 1, m, ds.d))
    for l in range(steps + 1):
        tl = batch.times[l]
        pts = batch.X[:, l, :].T  # (d, N)
        Y[:, l, :] = sol.eval(tl, pts).T
        gr = sol.grad_eval(tl, pts)  # (m, d, N)
        Gv = ds.G_at(tl, pts)  # (d, d, N)
        Z[:, l, :, :] = np.einsum("idN,mdN->Nmi", Gv, gr)
    # terminal condition holds exactly by construction
    Y[:, -1, :] = ds.g(batch.X[:, -1, :].T).T
    return YZProcess(Y=Y, Z=Z, source=sol, valid=inside,
                     n_excluded=n_excluded)


def _hamiltonian_drift(ds: DiffusionSpec, nl, t, pts, Z_l):
    """H(t, x, z) for the backward drift: the coupling term
    sum_i Btilde_i (G^{-1} z)_i minus the semilinear source evaluated at
    the sqrt(Q)-scaled gradient z / sqrt(2)."""
    N = pts.shape[1]
    m = Z_l.shape[1]
    Gv = np.moveaxis(ds.G_at(t, pts), 2, 0)  # (N, d, d)
    Du = np.linalg.solve(Gv, np.moveaxis(Z_l, 1, 2))  # (N, d, m): D_i u_k
    Btv = ds.op.Btilde_at(t, pts)  # (d, m, m, N)
    H = np.einsum("ijkN,Nik->Nj", Btv, Du)
    if nl is not None:
        # spatial-first layout z[i, k, N] expected by the source, scaled
        # down to the sqrt(Q)-weighted gradient since Q = G^2 / 2
        z_semi = Z_l.transpose(2, 1, 0) / np.sqrt(2.0)
        H -= nl(pts, z_semi).T
    return H  # (N, m)


def bsde_residual(yz: YZProcess, ds: DiffusionSpec, nl, batch: PathBatch):
    """L2 norm of R = Y_t + sum Z dW - g(X_T) - sum H h over valid paths,
    with the per-time partial-residual profile."""
    N, steps = batch.N, batch.steps
    m = yz.Y.shape[2]
    R = yz.Y[:, 0, :] - yz.Y[:, -1, :]
    profile = np.zeros(steps)
    for l in range(steps):
        pts = batch.X[:, l, :].T
        H = _hamiltonian_drift(ds, nl, batch.times[l], pts, yz.Z[:, l])
        R += np.einsum("Nmi,Ni->Nm", yz.Z[:, l], batch.dW[:, l, :])
        R -= batch.h_step * H
        profile[l] = float(np.sqrt(np.mean(
            np.sum(R[yz.valid] ** 2, axis=1))))
    resid = float(np.sqrt(np.mean(np.sum(R[yz.valid] ** 2, axis=1))))
    return resid, profile


def girsanov_weights(ds: DiffusionSpec, batch: PathBatch, strategy):
    """Attach exponential-martingale weights for the controlled drift.

    strategy(t, X (N,d), step_index) -> (N, players) control values or
    None for the uncontrolled base measure.  rho = exp(sum <r, dW>
    - 1/2 sum |r|^2 h)."""
    N, steps = batch.N, batch.steps
    log_rho = np.zeros(N)
    players = ds.n_players
    ctrl = np.zeros((N, steps, players)) if players else None
    sup_r = 0.0
    for l in range(steps):
        pts = batch.X[:, l, :].T
        u = None
        if strategy is not None:
            u = np.asarray(strategy(batch.times[l], batch.X[:, l, :], l),
                           dtype=float)
            if ctrl is not None:
                ctrl[:, l, :] = u.reshape(N, players)
            u = u.reshape(N, players).T  # (players, N)
        r = ds.r_at(batch.times[l], pts, u)  # (d, N)
        sup_r = max(sup_r, float(np.max(np.sqrt(np.sum(r ** 2, axis=0)))))
        log_rho += np.einsum("dN,Nd->N", r, batch.dW[:, l, :])
        log_rho -= 0.5 * batch.h_step * np.sum(r ** 2, axis=0)
    out = PathBatch(N=N, h_step=batch.h_step, t0=batch.t0,
                    times=batch.times, X=batch.X, dW=batch.dW,
                    seed=batch.seed, rho=np.exp(log_rho), controls=ctrl,
                    exploded=batch.exploded)
    if ds.r_bound is not None and sup_r > ds.r_bound:
        out.r_warning = (f"sup |r| = {sup_r:.3g} exceeds the audited "
                         f"bound {ds.r_bound:g}")
    return out


def cost(ds: DiffusionSpec, batch: PathBatch, i):
    """Weighted Monte-Carlo estimate of player i's cost with its
    standard error and an effective-sample-size degeneracy flag."""
    N, steps = batch.N, batch.steps
    running = np.zeros(N)
    if ds.h is not None:
        for l in range(steps):
            pts = batch.X[:, l, :].T
            u = None if batch.controls is None else batch.controls[:, l, :].T
            running += batch.h_step * np.asarray(ds.h(pts, u))[i]
    terminal = np.asarray(ds.g(batch.X[:, -1, :].T))[i]
    payoff = batch.rho * (running + terminal)
    est = float(np.mean(payoff))
    stderr = float(np.std(payoff, ddof=1) / np.sqrt(N)) if N > 1 else 0.0
    ess = float(np.sum(batch.rho) ** 2 / np.sum(batch.rho ** 2))
    return {"J": est, "stderr": stderr, "ess": ess,
            "degenerate": bool(ess < N / 100)}


_KPB_HEADER = "<4siiiiddq"  # magic, d, N, steps, players, h_step, t0, seed


def write_kpb(path, batch: PathBatch):
    players = 0 if batch.controls is None else batch.controls.shape[2]
    with open(path, "wb") as fh:
        fh.write(struct.pack(_KPB_HEADER, b"KPB1", batch.d, batch.N,
                             batch.steps, players, batch.h_step, batch.t0,
                             batch.seed))
        fh.write(np.ascontiguousarray(batch.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.dW, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.rho, dtype="<f8").tobytes())
        if players:
            fh.write(np.ascontiguousarray(batch.controls,
                                          dtype="<f8").tobytes())
        ex = np.ascontiguousarray(batch.exploded, dtype="<i8")
        fh.write(struct.pack("<q", len(ex)))
        fh.write(ex.tobytes())


def read_kpb(path):
    with open(path, "rb") as fh:
        raw = fh.read(struct.calcsize(_KPB_HEADER))
        magic, d, N, steps, players, h_step, t0, seed = struct.unpack(
            _KPB_HEADER, raw)
        if magic != b"KPB1":
            raise FbsdeError(f"not a path-batch file: magic {magic!r}")

        def arr(shape):
            n = int(np.prod(shape))
            return np.frombuffer(fh.read(8 * n),
                                 dtype="<f8").reshape(shape).copy()

        X = arr((N, steps + 1, d))
        dW = arr((N, steps, d))
        rho = arr((N,))
        controls = arr((N, steps, players)) if players else None
        (n_ex,) = struct.unpack("<q", fh.read(8))
        exploded = np.frombuffer(fh.read(8 * n_ex), dtype="<i8").copy()
    times = t0 + h_step * np.arange(steps + 1)
    return PathBatch(N=N, h_step=h_step, t0=t0, times=times, X=X, dW=dW,
                     seed=seed, rho=rho, controls=controls,
                     exploded=exploded)
