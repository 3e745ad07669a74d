"""Monte Carlo paths of ``(X, N)`` with Euler steps and thinned marks.

Within a step the coefficients are evaluated at the left end time and the
continuous part at the left end state.
Diffusion jumps and regime switches are drawn by thinning. The candidate
count is Poisson with rate ``F_max * mass + Lambda_max * (k - 1)``, and
each candidate is accepted with the ratio of its actual intensity to that
bound, evaluated at the state reached so far inside the step.  The same
piecewise-constant state is used to integrate each mark's compensator
exactly, so that ``count - compensator`` is a martingale for the simulated
process itself.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .model import apply_generator

CHUNK_SIZE = 8192
Z_THRESHOLD = 4.0

JUMP, SWITCH = 0, 1


@dataclass(eq=False)
class PathBundle:
    """Simulated paths on a time grid.

    ``counts`` and ``compensator`` have one column per mark (jump atoms first,
    then one per regime).  Events are stored flat, sorted by path then time.
    """

    grid: np.ndarray
    x_paths: np.ndarray       # (n, M+1, d)
    regimes: np.ndarray       # (n, M+1)
    event_path: np.ndarray
    event_time: np.ndarray
    event_kind: np.ndarray    # JUMP or SWITCH
    event_index: np.ndarray   # atom index or target regime
    event_from: np.ndarray    # regime before the event
    counts: np.ndarray
    compensator: np.ndarray
    seed: int
    jump_form: str = "compensated"
    dB: Optional[np.ndarray] = None
    thinning: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.x_paths.shape[0]

    def event_log(self, path):
        """``[(time, ("jump", atom) | ("regime", j)), ...]`` for one path."""
        sel = np.flatnonzero(self.event_path == path)
        kinds = ("jump", "regime")
        return [(float(self.event_time[e]), (kinds[self.event_kind[e]], int(self.event_index[e]))) for e in sel]

    def to_csv(self, path):
        """Path dump with columns ``path, t, x_1..x_d, regime``."""
        n, M1, d = self.x_paths.shape
        header = "path,t," + ",".join(f"x_{l + 1}" for l in range(d)) + ",regime\n"
        with open(path, "w", newline="") as fh:
            fh.write(header)
            for p in range(n):
                for m in range(M1):
                    xs = ",".join(repr(float(v)) for v in self.x_paths[p, m])
                    fh.write(f"{p},{float(self.grid[m])!r},{xs},{int(self.regimes[p, m])}\n")


def _grid(model, grid):
    if np.isscalar(grid):
        M = int(grid)
        if M < 1:
            raise ConfigurationError("need at least one time step")
        return np.linspace(0.0, model.T, M + 1)
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
        raise ConfigurationError("time grid must be strictly increasing with at least two points")
    return g


def _by_regime(N, k):
    return [(i, np.flatnonzero(N == i)) for i in range(k)]


def _mark_rates(model, t, X, N):
    """``zeta * rho`` per path and mark at the current state; shape ``(n, A + k)``."""
    A, k = model.n_atoms, model.k
    out = np.zeros((len(X), A + k))
    lam = model.switch_rates(t, X) if k > 1 else None
    for i, idx in _by_regime(N, k):
        if idx.size == 0:
            continue
        for a, atom in enumerate(model.jump_atoms):
            out[idx, a] = model.intensity(t, X[idx], i, a) * atom.mass
        if lam is not None:
            out[idx, A:] = lam[idx, i, :]
            out[idx, A + i] = 0.0
    return out


def _simulate_chunk(model, grid, n, rng, x0, i0, jump_form, record_db):
    d, k, A = model.d, model.k, model.n_atoms
    M = len(grid) - 1
    masses = model.masses
    r_jump = model.f_max * model.total_mass
    r_switch = model.lambda_max * (k - 1)
    rate = r_jump + r_switch
    mass_cdf = np.cumsum(masses) / masses.sum() if A else None

    X = np.empty((n, M + 1, d))
    N = np.empty((n, M + 1), dtype=np.int64)
    X[:, 0] = x0
    N[:, 0] = i0
    counts = np.zeros((n, A + k), dtype=np.int64)
    comp = np.zeros((n, A + k))
    dB_all = np.empty((n, M, d)) if record_db else None
    ev = {key: [] for key in ("path", "time", "kind", "index", "from")}
    stats = {"jump_candidates": 0, "jump_accepted": 0, "jump_expected": 0.0,
             "switch_candidates": 0, "switch_accepted": 0, "switch_expected": 0.0}

    for m in range(M):
        t, dt = grid[m], grid[m + 1] - grid[m]
        x_left, n_left = X[:, m], N[:, m]
        dB = rng.normal(0.0, np.sqrt(dt), (n, d))
        if record_db:
            dB_all[:, m] = dB
        cont = np.empty((n, d))
        for i, idx in _by_regime(n_left, k):
            if idx.size == 0:
                continue
            xi = x_left[idx]
            drift = model.drift(t, xi, i) if jump_form == "compensated" else model.compensated_drift(t, xi, i)
            cont[idx] = drift * dt + np.einsum("nlq,nq->nl", model.dispersion(t, xi, i), dB[idx])
            if jump_form == "compensated":
                for a, atom in enumerate(model.jump_atoms):
                    cont[idx] -= model.jump_size(t, xi, i, a) * (model.intensity(t, xi, i, a) * atom.mass * dt)[:, None]

        Y = x_left.copy()
        Ncur = n_left.copy()
        prev = np.zeros(n)
        n_cand = rng.poisson(rate * dt, n) if rate > 0 else np.zeros(n, dtype=np.int64)
        busy = np.flatnonzero(n_cand > 0)
        if busy.size:
            kmax = int(n_cand[busy].max())
            offs = rng.random((busy.size, kmax)) * dt
            offs[np.arange(kmax)[None, :] >= n_cand[busy][:, None]] = np.inf
            offs.sort(axis=1)
            for r in range(kmax):
                live = np.isfinite(offs[:, r])
                p = busy[live]
                s = offs[live, r]
                comp[p] += _mark_rates(model, t, Y[p], Ncur[p]) * (s - prev[p])[:, None]
                prev[p] = s
                u = rng.random(p.size) * rate
                v = rng.random(p.size)
                is_jump = u < r_jump
                jp = p[is_jump]
                if jp.size:
                    atom = np.searchsorted(mass_cdf, rng.random(jp.size), side="right")
                    atom = np.minimum(atom, A - 1)
                    accept = np.zeros(jp.size, dtype=bool)
                    shift = np.zeros((jp.size, d))
                    for i, gi in _by_regime(Ncur[jp], k):
                        for a in range(A):
                            sel = gi[atom[gi] == a]
                            if sel.size == 0:
                                continue
                            fval = model.intensity(t, Y[jp[sel]], i, a)
                            stats["jump_expected"] += float(np.sum(fval) / model.f_max)
                            accept[sel] = v[is_jump][sel] * model.f_max < fval
                            shift[sel] = model.jump_size(t, Y[jp[sel]], i, a)
                    stats["jump_candidates"] += int(jp.size)
                    stats["jump_accepted"] += int(accept.sum())
                    acc = jp[accept]
                    Y[acc] += shift[accept]
                    np.add.at(counts, (acc, atom[accept]), 1)
                    ev["path"].append(acc)
                    ev["time"].append(t + s[is_jump][accept])
                    ev["kind"].append(np.full(acc.size, JUMP))
                    ev["index"].append(atom[accept])
                    ev["from"].append(Ncur[acc])
                sp = p[~is_jump]
                if sp.size:
                    target = (Ncur[sp] + 1 + rng.integers(0, k - 1, sp.size)) % k
                    lam = model.switch_rates(t, Y[sp])
                    lval = lam[np.arange(sp.size), Ncur[sp], target]
                    stats["switch_expected"] += float(np.sum(lval) / model.lambda_max)
                    accept = v[~is_jump] * model.lambda_max < lval
                    stats["switch_candidates"] += int(sp.size)
                    stats["switch_accepted"] += int(accept.sum())
                    acc = sp[accept]
                    np.add.at(counts, (acc, A + target[accept]), 1)
                    ev["path"].append(acc)
                    ev["time"].append(t + s[~is_jump][accept])
                    ev["kind"].append(np.full(acc.size, SWITCH))
                    ev["index"].append(target[accept])
                    ev["from"].append(Ncur[acc])
                    Ncur[acc] = target[accept]
        comp += _mark_rates(model, t, Y, Ncur) * (dt - prev)[:, None]
        X[:, m + 1] = Y + cont
        N[:, m + 1] = Ncur

    if not np.all(np.isfinite(X)):
        raise ConfigurationError("simulated state is not finite; reduce the time step")
    events = {key: (np.concatenate(v) if v else np.zeros(0)) for key, v in ev.items()}
    return X, N, counts, comp, dB_all, events, stats


def simulate_paths(model, grid, n_paths, seed, *, x0=None, i0=None, threads=1, jump_form="compensated",
                   record_increments=False, chunk_size=CHUNK_SIZE):
    """Simulate ``n_paths`` paths of ``(X, N)`` on ``grid``.

    Parameters
    ----------
    grid : int or array
        Number of uniform steps on ``[0, T]`` or an explicit increasing grid.
    seed : int
        Paths are generated in fixed chunks of ``chunk_size``, chunk ``c``
        drawing from ``SeedSequence([seed, c])``; results do not depend on
        ``threads``.
    jump_form : {"compensated", "drift_adjusted"}
        ``"compensated"`` uses ``b`` and subtracts the jump compensator each
        step; ``"drift_adjusted"`` uses ``b - sum delta f m`` directly.  The two
        are algebraically identical.
    """
    if n_paths < 1:
        raise ConfigurationError("n_paths must be at least 1")
    if jump_form not in ("compensated", "drift_adjusted"):
        raise ConfigurationError(f"unknown jump form '{jump_form}'")
    g = _grid(model, grid)
    rate = model.f_max * model.total_mass + model.lambda_max * (model.k - 1)
    if np.max(np.diff(g)) * rate > 1.0:
        raise ConfigurationError("thinning step too coarse: dt * (F_max * mass + Lambda_max * (k - 1)) > 1")
    x0 = model.x0 if x0 is None else np.asarray(x0, dtype=float).reshape(model.d)
    i0 = model.i0 if i0 is None else int(i0)

    bounds = [(c, lo, min(lo + chunk_size, n_paths)) for c, lo in enumerate(range(0, n_paths, chunk_size))]

    def work(item):
        c, lo, hi = item
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), c]))
        return _simulate_chunk(model, g, hi - lo, rng, x0, i0, jump_form, record_increments)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]

    X = np.concatenate([p[0] for p in parts])
    N = np.concatenate([p[1] for p in parts])
    counts = np.concatenate([p[2] for p in parts])
    comp = np.concatenate([p[3] for p in parts])
    dB = np.concatenate([p[4] for p in parts]) if record_increments else None
    ev = {key: [] for key in parts[0][5]}
    for (c, lo, _), p in zip(bounds, parts):
        for key, arr in p[5].items():
            ev[key].append(arr + lo if key == "path" else arr)
    ev = {key: np.concatenate(v) for key, v in ev.items()}
    order = np.lexsort((ev["time"], ev["path"]))
    stats = {key: sum(p[6][key] for p in parts) for key in parts[0][6]}
    return PathBundle(
        grid=g, x_paths=X, regimes=N,
        event_path=ev["path"][order].astype(np.int64), event_time=ev["time"][order].astype(float),
        event_kind=ev["kind"][order].astype(np.int64), event_index=ev["index"][order].astype(np.int64),
        event_from=ev["from"][order].astype(np.int64),
        counts=counts, compensator=comp, seed=int(seed), jump_form=jump_form, dB=dB, thinning=stats,
    )


def _z(diff):
    n = diff.shape[0]
    mean = diff.mean(axis=0)
    sd = diff.std(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, mean / (sd / np.sqrt(n)), np.where(mean == 0, 0.0, np.inf))
    return mean, sd, z


def compensator_check(bundle, model, threshold=Z_THRESHOLD, min_paths=1000):
    """z-scores of ``count - compensator`` for each mark and for all marks together.

    Passes iff every ``|z| <= threshold``.  Fewer than ``min_paths`` paths
    only triggers a warning.
    """
    if bundle.n_paths < min_paths:
        warnings.warn(f"only {bundle.n_paths} paths; z-scores are rough", RuntimeWarning, stacklevel=2)
    diff = bundle.counts - bundle.compensator
    names = [f"jump[{a}]" for a in range(model.n_atoms)] + [f"regime[{j}]" for j in range(model.k)]
    diff_all = np.concatenate([diff, diff.sum(axis=1, keepdims=True)], axis=1)
    names.append("all")
    mean, sd, z = _z(diff_all)
    marks = [
        {"mark": nm, "mean_count": float(c), "mean_compensator": float(q), "z": float(zz)}
        for nm, c, q, zz in zip(names, np.append(bundle.counts.mean(0), bundle.counts.sum(1).mean()),
                                np.append(bundle.compensator.mean(0), bundle.compensator.sum(1).mean()), z)
    ]
    th = bundle.thinning
    acc = []
    for cls in ("jump", "switch"):
        ncand = th.get(f"{cls}_candidates", 0)
        if ncand:
            expected = th[f"{cls}_expected"]
            # accepted ~ sum of independent Bernoulli(f / F_max)
            var = max(expected * (1 - expected / ncand), 1e-300)
            acc.append({"class": cls, "candidates": ncand, "accepted": th[f"{cls}_accepted"], "expected": expected,
                        "z": float((th[f"{cls}_accepted"] - expected) / np.sqrt(var))})
    worst = max([abs(m["z"]) for m in marks] + [abs(a["z"]) for a in acc] + [0.0])
    return {"name": "compensator", "status": "PASS" if worst <= threshold else "FAIL", "n_paths": bundle.n_paths,
            "worst_abs_z": worst, "marks": marks, "acceptance": acc}


def regime_transition_check(bundle, rate, threshold=Z_THRESHOLD):
    """Two regimes with symmetric switching ``rate``: ``P(N_T != N_0) = (1 - exp(-2 rate T)) / 2``."""
    T = bundle.grid[-1] - bundle.grid[0]
    p = 0.5 * (1.0 - np.exp(-2.0 * rate * T))
    phat = float(np.mean(bundle.regimes[:, -1] != bundle.regimes[:, 0]))
    se = np.sqrt(p * (1 - p) / bundle.n_paths)
    z = (phat - p) / se if se > 0 else 0.0
    return {"name": "regime_transition", "status": "PASS" if abs(z) <= threshold else "FAIL",
            "empirical": phat, "closed_form": float(p), "z": float(z)}


def _eval(u, t, X, N, k):
    out = np.empty(len(X))
    for i, idx in _by_regime(N, k):
        if idx.size:
            out[idx] = u.value(t, X[idx], i)
    return out


def generator_weak_error(model, u, t, x, i, dt_list, n_paths=400_000, seed=0, threads=1,
                         control_variate=True, noise_factor=3.0, min_order=0.9):
    """One-step weak error ``|E[u(t+dt, X, N)] - u - G u dt|`` for each ``dt``.

    The Monte Carlo mean subtracts the mean-zero martingale part of the step,
    ``grad u . sigma dB`` plus ``(count - compensator)`` weighted by the jump of
    ``u`` across each mark at the starting point.  The reported order is the
    slope of ``log(error / dt)`` against ``log dt`` over the step sizes whose
    error exceeds ``noise_factor`` standard errors.
    """
    x = np.asarray(x, dtype=float).reshape(model.d)
    pt = x[None, :]
    u0 = float(u.value(t, pt, i)[0])
    gu = apply_generator(model, u, t, x, i)
    grad = u.grad(t, pt, i)[0]
    sig = model.dispersion(t, pt, i)[0]
    weights = np.zeros(model.n_atoms + model.k)
    for a in range(model.n_atoms):
        weights[a] = u.value(t, pt + model.jump_size(t, pt, i, a), i)[0] - u0
    for j in range(model.k):
        if j != i:
            weights[model.n_atoms + j] = u.value(t, pt, j)[0] - u0

    rows = []
    for idx, dt in enumerate(dt_list):
        b = simulate_paths(model, np.array([t, t + dt]), n_paths, np.random.SeedSequence([int(seed), idx]).generate_state(1)[0],
                           x0=x, i0=i, threads=threads, record_increments=True)
        vals = _eval(u, t + dt, b.x_paths[:, 1], b.regimes[:, 1], model.k)
        sample = vals - u0 - gu * dt
        if control_variate:
            sample = sample - b.dB[:, 0] @ (sig.T @ grad) - (b.counts - b.compensator) @ weights
        mean = float(sample.mean())
        se = float(sample.std(ddof=1) / np.sqrt(n_paths))
        rows.append({"dt": float(dt), "error": abs(mean), "std_error": se, "normalized": abs(mean) / dt,
                     "resolved": abs(mean) > noise_factor * se})

    if all(r["error"] == 0.0 for r in rows):
        return {"name": "generator_weak_error", "status": "PASS", "exact": True, "order": None, "rows": rows}
    good = [r for r in rows if r["resolved"]]
    if len(good) < 2:
        return {"name": "generator_weak_error", "status": "INCONCLUSIVE", "exact": False, "order": None, "rows": rows}
    slope = float(np.polyfit(np.log([r["dt"] for r in good]), np.log([r["normalized"] for r in good]), 1)[0])
    return {"name": "generator_weak_error", "status": "PASS" if slope >= min_order else "FAIL", "exact": False,
            "order": slope, "rows": rows}


def moment_report(bundle, p):
    """Mean over paths of ``sup_t |X_t|^p`` on the grid."""
    if not p >= 2:
        raise ValueError("p must be at least 2")
    norms = np.linalg.norm(bundle.x_paths, axis=2)
    return float(np.mean(np.max(norms, axis=1) ** p))
