"""Verification instruments: norms, a priori reports, adjoint oracle, comparison.

Every expectation here is taken exactly over the chain (forward laws or
backward dynamic programs); nothing is sampled.  Norms are reported squared,
as they enter the a priori bounds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .chain import STAY
from .data import resolve_tau
from .errors import PreconditionError
from .solver import _backward

# ---------------------------------------------------------------------------
# chain expectations


def expected_running_max(chain, W, n_levels=256):
    """``E[max_m W_m(s_m)]`` for a nonnegative field ``W`` of shape ``(M+1, S)``.

    Computes ``P(max >= c)`` on a threshold grid by a backward killing DP.
    Returns ``(estimate, lower, upper)``; the three coincide when every
    reachable value of ``W`` is a threshold.
    """
    W = np.asarray(W, dtype=float)
    if np.any(W < 0):
        raise ValueError("running maximum is defined here for nonnegative fields")
    pi = chain.distributions()
    vals = np.unique(W[pi > 0])
    vals = vals[vals > 0]
    if vals.size == 0:
        return 0.0, 0.0, 0.0
    exact = vals.size <= n_levels
    if exact:
        levels = vals
    else:
        # half evenly spaced (bounds the bracket), half quantiles (resolves clusters)
        half = n_levels // 2
        levels = np.unique(np.concatenate([
            np.linspace(vals[0], vals[-1], half),
            np.quantile(vals, np.linspace(0.0, 1.0, n_levels - half)),
        ]))
    H = (W[chain.M][:, None] >= levels[None, :]).astype(float)
    for m in range(chain.M - 1, -1, -1):
        H = np.where(W[m][:, None] >= levels[None, :], 1.0, chain.kernel(m) @ H)
    p = np.clip(H[chain.s0], 0.0, 1.0)
    widths = np.diff(np.concatenate([[0.0], levels]))
    lower = float(np.sum(widths * p))
    upper = float(np.sum(widths * np.concatenate([[1.0], p[:-1]])))
    if exact:
        return lower, lower, lower
    return 0.5 * (lower + upper), lower, upper


def accumulated_second_moment(chain, inc):
    """``E[(sum_m inc_m(s_m))^2]`` for per-step increments of shape ``(M, S)``."""
    F = np.zeros(chain.n_states)
    G = np.zeros(chain.n_states)
    for m in range(chain.M - 1, -1, -1):
        P = chain.kernel(m)
        EF, EG = P @ F, P @ G
        G = inc[m] ** 2 + 2.0 * inc[m] * EF + EG
        F = inc[m] + EF
    return float(G[chain.s0])


def _time_integral(chain, pi, density):
    """``E[sum_m density_m(s_m) dt]``."""
    return float(np.sum(pi[: chain.M] * density) * chain.dt)


def _v_density(chain, Vt, Wt):
    """``|V|^2`` per step and state: jump and switch weights are the branch rates."""
    pj = chain.probs[:, :, chain.jump_slice]
    ps = chain.probs[:, :, chain.switch_slice]
    return (np.sum(Vt**2 * pj, axis=2) + np.sum(Wt**2 * ps, axis=2)) / chain.dt


# ---------------------------------------------------------------------------
# norms


@dataclass
class NormReport:
    """Squared norms of a solution and of its data.

    ``L_s2`` and ``L_h2`` are the two admissible sizes of the lower barrier;
    ``data_size`` uses ``L_s2``.  ``s2_Y_bounds`` brackets ``s2_Y`` when the
    running-maximum DP had to bin the values.
    """

    s2_Y: float
    h2_Z: float
    hmu2_V: float
    s2_Kplus: float
    s2_Kminus: float
    xi2: float = 0.0
    g0_h2: float = 0.0
    L_s2: float = 0.0
    L_h2: float = 0.0
    U_s2: float = 0.0
    Aminus2: float = 0.0
    s2_Y_bounds: tuple = (0.0, 0.0)

    @property
    def solution_size(self):
        return self.s2_Y + self.h2_Z + self.hmu2_V + self.s2_Kplus + self.s2_Kminus

    @property
    def data_size(self):
        return self.xi2 + self.g0_h2 + self.L_s2 + self.U_s2 + self.Aminus2

    def as_dict(self):
        out = asdict(self)
        out["s2_Y_bounds"] = list(self.s2_Y_bounds)
        out["solution_size"] = self.solution_size
        out["data_size"] = self.data_size
        return out


def norms(sol, chain=None, data=None, n_levels=256):
    """Chain-exact norms of ``sol`` and, when ``data`` is given, of its data."""
    ch = sol.chain if chain is None else chain
    if ch.n_states != sol.Y.shape[1]:
        raise ValueError("solution does not live on this chain")
    pi = ch.distributions()
    sY, lo, hi = expected_running_max(ch, sol.Y**2, n_levels)
    rep = NormReport(
        s2_Y=sY, s2_Y_bounds=(lo, hi),
        h2_Z=_time_integral(ch, pi, np.sum(sol.Z**2, axis=2)),
        hmu2_V=_time_integral(ch, pi, _v_density(ch, sol.Vtilde, sol.Wtilde)),
        s2_Kplus=accumulated_second_moment(ch, sol.dKplus),
        s2_Kminus=accumulated_second_moment(ch, sol.dKminus),
    )
    if data is None:
        return rep
    rep.xi2 = float(np.sum(pi[ch.M] * sol.Y[ch.M] ** 2))
    z = np.zeros((ch.n_states, 1))
    v = np.zeros((ch.n_states, ch.n_atoms))
    w = np.zeros((ch.n_states, ch.k))
    g = data.driver_for(ch)
    g0 = np.array([g(m, np.zeros(ch.n_states), z, v, w) for m in range(ch.M)])
    if sol.fixed is not None:
        g0 = np.where(sol.fixed[: ch.M], 0.0, g0)
    rep.g0_h2 = _time_integral(ch, pi, g0**2)
    if sol.lower is not None:
        L2 = np.where(sol.lower_on, sol.lower**2, 0.0)
        rep.L_s2 = expected_running_max(ch, L2, n_levels)[0]
        rep.L_h2 = _time_integral(ch, pi, L2[: ch.M])
        if data.alpha_values is not None:
            alpha = np.where(sol.lower_on[: ch.M], data.alpha_values[: ch.M][:, ch.base_state], 0.0)
            rep.Aminus2 = accumulated_second_moment(ch, alpha * ch.dt)
    if sol.upper is not None:
        rep.U_s2 = expected_running_max(ch, np.where(sol.upper_on, sol.upper**2, 0.0), n_levels)[0]
    return rep


def norms_monte_carlo(sol, n_paths=20_000, seed=0, threshold=4.0, n_levels=256):
    """Compare the chain-exact norms with averages over sampled chain paths.

    Each norm passes when the sample mean lies within ``threshold`` standard
    errors of the exact value (of the bracket, for the binned running maximum).
    """
    from .chain import sample_chain_paths

    ch = sol.chain
    exact = norms(sol, n_levels=n_levels)
    states, _ = sample_chain_paths(ch, n_paths, seed)
    steps = np.arange(ch.M)
    cur = states[:, : ch.M]
    samples = {
        "s2_Y": np.max(sol.Y[np.arange(ch.M + 1), states] ** 2, axis=1),
        "h2_Z": np.sum(np.sum(sol.Z**2, axis=2)[steps, cur], axis=1) * ch.dt,
        "hmu2_V": np.sum(_v_density(ch, sol.Vtilde, sol.Wtilde)[steps, cur], axis=1) * ch.dt,
        "s2_Kplus": np.sum(sol.dKplus[steps, cur], axis=1) ** 2,
        "s2_Kminus": np.sum(sol.dKminus[steps, cur], axis=1) ** 2,
    }
    rows = []
    for key, smp in samples.items():
        mean = float(smp.mean())
        se = float(smp.std(ddof=1) / np.sqrt(n_paths))
        lo, hi = exact.s2_Y_bounds if key == "s2_Y" else (getattr(exact, key),) * 2
        gap = max(lo - mean, mean - hi, 0.0)
        z = gap / se if se > 0 else (0.0 if gap <= 1e-12 * (1.0 + abs(mean)) else np.inf)
        rows.append({"norm": key, "chain": float(getattr(exact, key)), "monte_carlo": mean, "std_error": se, "z": float(z)})
    worst = max(r["z"] for r in rows)
    return {"name": "norms_monte_carlo", "status": "PASS" if worst <= threshold else "FAIL",
            "n_paths": int(n_paths), "worst_abs_z": worst, "rows": rows}


def difference_norms(sol_n, sol_p, data_n=None, data_p=None, n_levels=256):
    """Squared norms of ``sol_n - sol_p`` and of the data differences.

    The ``K`` difference is measured by ``E[(K^n_T - K^p_T)^2]``, a lower
    bound for its running-maximum norm.  Barrier differences are reported
    unsquared, as they enter the error estimate.
    """
    ch = sol_n.chain
    if sol_p.Y.shape != sol_n.Y.shape:
        raise ValueError("solutions live on different chains")
    pi = ch.distributions()
    dY = sol_n.Y - sol_p.Y
    dK = (sol_n.dKplus - sol_n.dKminus) - (sol_p.dKplus - sol_p.dKminus)
    out = {
        "s2_Y": expected_running_max(ch, dY**2, n_levels)[0],
        "h2_Z": _time_integral(ch, pi, np.sum((sol_n.Z - sol_p.Z) ** 2, axis=2)),
        "hmu2_V": _time_integral(ch, pi, _v_density(ch, sol_n.Vtilde - sol_p.Vtilde, sol_n.Wtilde - sol_p.Wtilde)),
        "k_T2": accumulated_second_moment(ch, dK),
    }
    out["total"] = out["s2_Y"] + out["h2_Z"] + out["hmu2_V"] + out["k_T2"]
    data_diff = {"xi2": float(np.sum(pi[ch.M] * dY[ch.M] ** 2)), "g2": 0.0, "L": 0.0, "U": 0.0}
    if data_p is not None:
        g_p = data_p.driver_for(ch)
        diffs = np.empty((ch.M, ch.n_states))
        for m in range(ch.M):
            gp = g_p(m, sol_n.driver_y[m], sol_n.Z[m], sol_n.Vtilde[m], sol_n.Wtilde[m])
            diffs[m] = sol_n.driver_values[m] - gp
        if sol_n.fixed is not None:
            diffs = np.where(sol_n.fixed[: ch.M], 0.0, diffs)
        data_diff["g2"] = _time_integral(ch, pi, diffs**2)
    for key, a, b, on in (("L", sol_n.lower, sol_p.lower, sol_n.lower_on), ("U", sol_n.upper, sol_p.upper, sol_n.upper_on)):
        if a is not None and b is not None:
            data_diff[key] = float(np.sqrt(expected_running_max(ch, np.where(on, (a - b) ** 2, 0.0), n_levels)[0]))
    out["data"] = data_diff
    return out


def apriori_report(sequence, reference=None, trend_slack=0.0, stability_factor=10.0):
    """Bound and error reports along a sequence of ``(data, solution)`` pairs.

    With ``reference`` (a ``(data, solution)`` pair, the ``n = infinity`` limit)
    the trend is measured on the differences to it; otherwise on the
    differences to the last element.  Consecutive pairs ``(n, n+1)`` are
    always reported as well.  The report checks that

    * solution norms stay bounded relative to data norms,
    * difference norms decrease strictly (up to ``trend_slack``) and the last
      is below a tenth of the first,
    * with common barriers, the ratio of difference norms to
      ``xi`` and driver differences stays finite and within
      ``stability_factor`` of itself across the sequence.

    No specific constant in the bounds is asserted.
    """
    if len(sequence) < 2:
        raise ValueError("need at least two elements")
    shape = sequence[0][1].Y.shape
    if any(sol.Y.shape != shape for _, sol in sequence) or (reference is not None and reference[1].Y.shape != shape):
        raise ValueError("all solutions must live on the same chain")
    per_n = [norms(sol, data=data).as_dict() for data, sol in sequence]
    ratios = [r["solution_size"] / r["data_size"] if r["data_size"] > 0 else (0.0 if r["solution_size"] == 0 else np.inf)
              for r in per_n]

    pairs = {}
    if reference is not None:
        trend = [difference_norms(sol, reference[1], data, reference[0]) for data, sol in sequence]
        for a, d in enumerate(trend):
            pairs[f"{a},ref"] = d
    else:
        last_data, last_sol = sequence[-1]
        trend = [difference_norms(sol, last_sol, data, last_data) for data, sol in sequence[:-1]]
        for a, d in enumerate(trend):
            pairs[f"{a},{len(sequence) - 1}"] = d
    for a in range(len(sequence) - 1):
        key = f"{a},{a + 1}"
        if key not in pairs:
            pairs[key] = difference_norms(sequence[a][1], sequence[a + 1][1], sequence[a][0], sequence[a + 1][0])

    totals = [d["total"] for d in trend]
    decreasing = all(totals[j + 1] < totals[j] + trend_slack for j in range(len(totals) - 1))
    shrinks = totals[-1] < totals[0] / 10.0 if totals[0] > 0 else totals[-1] == 0
    common = all(d["data"]["L"] == 0.0 and d["data"]["U"] == 0.0 for d in trend)
    eq23 = []
    for d in trend:
        denom = d["data"]["xi2"] + d["data"]["g2"]
        eq23.append(d["total"] / denom if denom > 0 else (0.0 if d["total"] == 0 else np.inf))
    finite23 = all(np.isfinite(eq23))
    pos = [r for r in eq23 if r > 0]
    stable = finite23 and (not pos or max(pos) <= stability_factor * min(pos))
    bounded = all(np.isfinite(ratios))
    identical = all(d["total"] == 0 for d in trend)
    ok = bounded and (identical or (decreasing and shrinks)) and (not common or stable)
    return {
        "name": "apriori", "status": "PASS" if ok else "FAIL",
        "per_n": per_n, "bound_ratios": ratios, "max_bound_ratio": float(max(ratios)),
        "pairs": pairs, "trend_totals": totals, "strictly_decreasing": decreasing,
        "final_below_tenth": shrinks, "common_barriers": common,
        "common_barrier_ratios": eq23, "common_barrier_ratio_stable": stable,
    }


# ---------------------------------------------------------------------------
# adjoint oracle


def _field(value, shape, name):
    arr = np.asarray(value, dtype=float)
    try:
        return np.broadcast_to(arr, shape).copy()
    except ValueError:
        raise ValueError(f"coefficient '{name}' does not broadcast to {shape}") from None


@dataclass(eq=False)
class AdjointPath:
    """Branchwise multiplicative factors of the discrete adjoint ``Gamma``.

    ``factors[m, s, b]`` multiplies ``Gamma`` when the chain leaves ``s`` along
    branch ``b`` at step ``m``; ``Gamma_0 = 1``.  Each factor has conditional
    mean ``1 + beta dt``, so ``Gamma / prod(1 + beta dt)`` is a chain martingale.
    """

    chain: object
    beta: np.ndarray
    pi: np.ndarray
    kappa: np.ndarray
    eta: np.ndarray
    factors: np.ndarray

    def expected_gamma(self):
        """``E[Gamma_m]`` for every ``m``."""
        ch = self.chain
        rho = np.zeros(ch.n_states)
        rho[ch.s0] = 1.0
        out = [1.0]
        for m in range(ch.M):
            w = rho[:, None] * ch.probs[m] * self.factors[m]
            rho = np.bincount(ch.targets[m].ravel(), weights=w.ravel(), minlength=ch.n_states)
            out.append(float(rho.sum()))
        return np.array(out)

    def path_gamma(self, states, branches):
        """``Gamma`` along chain paths (as returned by ``sample_chain_paths``)."""
        M = self.chain.M
        f = self.factors[np.arange(M), states[:, :M], branches]
        return np.hstack([np.ones((len(states), 1)), np.cumprod(f, axis=1)])


def adjoint_gamma(chain, beta, pi, kappa, eta):
    """Discrete adjoint for the linear driver ``beta y + pi z + kappa sum_e eta_e zeta_e rho_e v_e``.

    ``beta``, ``pi`` and ``kappa`` broadcast to ``(M, S)``; ``eta`` broadcasts
    to ``(M, S, A + k)`` (jump marks first, then one regime mark per regime).

    Branch factors are ``1 + beta dt + pi dt dB/q`` on every branch, plus
    ``kappa eta_e`` on the branch of mark ``e``, minus
    ``kappa sum_e eta_e p_e / p_stay`` on the stay branch, where ``p_e`` is the
    branch probability of mark ``e``.
    """
    M, S, B = chain.targets.shape
    A, k = chain.n_atoms, chain.k
    beta = _field(beta, (M, S), "beta")
    pi = _field(pi, (M, S), "pi")
    kappa = _field(kappa, (M, S), "kappa")
    eta = _field(eta, (M, S, A + k), "eta")
    if np.any(eta < 0):
        raise PreconditionError("mark weight eta must be nonnegative")
    ke = kappa[:, :, None] * eta
    if np.any(ke <= -1.0):
        raise PreconditionError("kappa * eta <= -1 somewhere; positivity of the adjoint is not guaranteed")
    dt = chain.dt
    q = chain.db_var
    with np.errstate(divide="ignore", invalid="ignore"):
        zfac = np.where(q > 0, pi * dt / np.where(q > 0, q, 1.0), 0.0)
    F = 1.0 + beta[:, :, None] * dt + zfac[:, :, None] * chain.db
    F[:, :, chain.jump_slice] += ke[:, :, :A]
    F[:, :, chain.switch_slice] += ke[:, :, A:]
    mark_p = np.concatenate([chain.probs[:, :, chain.jump_slice], chain.probs[:, :, chain.switch_slice]], axis=2)
    comp = kappa * np.sum(eta * mark_p, axis=2)
    p_stay = chain.probs[:, :, STAY]
    if np.any((p_stay <= 0) & (comp != 0)):
        raise PreconditionError("stay branch has no mass to carry the mark compensator")
    with np.errstate(divide="ignore", invalid="ignore"):
        F[:, :, STAY] -= np.where(p_stay > 0, comp / np.where(p_stay > 0, p_stay, 1.0), 0.0)
    live = chain.probs > 0
    if np.any(live & (F <= 0)):
        m, s, b = np.argwhere(live & (F <= 0))[0]
        raise PreconditionError(f"adjoint factor {F[m, s, b]:.3g} <= 0 at step {m}, state {s}, branch {b}; refine the mesh")
    return AdjointPath(chain=chain, beta=beta, pi=pi, kappa=kappa, eta=eta, factors=F)


def linear_driver(chain, beta, pi, kappa, eta):
    """Driver ``g(m, y, z, v, w)`` of the linear problem matched to :func:`adjoint_gamma`."""
    M, S = chain.M, chain.n_states
    A, k = chain.n_atoms, chain.k
    beta = _field(beta, (M, S), "beta")
    pi = _field(pi, (M, S), "pi")
    kappa = _field(kappa, (M, S), "kappa")
    eta = _field(eta, (M, S, chain.n_atoms + chain.k), "eta")
    dt = chain.dt

    def g(m, y, z, v, w):
        r = (np.sum(eta[m, :, :A] * chain.probs[m][:, chain.jump_slice] * v, axis=1)
             + np.sum(eta[m, :, A:] * chain.probs[m][:, chain.switch_slice] * w, axis=1)) / dt
        return beta[m] * y + pi[m] * z[:, 0] + kappa[m] * r

    return g


def linear_representation_check(chain, beta, pi, kappa, eta, dA, xi, tau=None):
    """``|Gamma_0 Y_0 - E[Gamma_tau Y_tau + sum_{m < tau} Gamma_m dA_m]|``.

    Solves the linear problem with increments ``dA`` (shape ``(M, S)``) and
    terminal ``xi`` on the chain, then evaluates the right side with the
    forward ``Gamma``-weighted law killed at ``tau`` (a stopping time
    declaration or a stopping region ``(M+1, S)``).
    """
    M, S = chain.M, chain.n_states
    path = adjoint_gamma(chain, beta, pi, kappa, eta)
    dA = _field(dA, (M, S), "dA")
    xi = _field(xi, (S,), "xi")
    sol = _backward(chain, xi, linear_driver(chain, beta, pi, kappa, eta), increment=dA, kind="BSDE")
    mask = tau if isinstance(tau, np.ndarray) else resolve_tau(tau, chain)
    mask = np.asarray(mask, dtype=bool).copy()
    mask[M] = True
    rho = np.zeros(S)
    rho[chain.s0] = 1.0
    rhs = 0.0
    for m in range(M + 1):
        stop = mask[m]
        rhs += float(np.sum(rho[stop] * sol.Y[m, stop]))
        if m == M:
            break
        live = np.where(stop, 0.0, rho)
        rhs += float(np.sum(live * dA[m]))
        w = live[:, None] * chain.probs[m] * path.factors[m]
        rho = np.bincount(chain.targets[m].ravel(), weights=w.ravel(), minlength=S)
    lhs = sol.Y0
    return {"name": "adjoint_identity", "lhs": lhs, "rhs": rhs, "residual": abs(lhs - rhs),
            "min_factor": float(np.min(np.where(chain.probs > 0, path.factors, np.inf)))}


def random_linear_problem(chain, seed, bound=1.0):
    """Seeded bounded coefficients, increments and terminal value for the adjoint check."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4144]))
    M, S = chain.M, chain.n_states
    marks = chain.n_atoms + chain.k
    return {
        "beta": rng.uniform(-bound, bound, (M, S)),
        # diffusion factors stay positive while |pi| dt |dB| / q < 1; reflected
        # boundary nodes halve q, hence the smaller range
        "pi": rng.uniform(-0.3 * bound, 0.3 * bound, (M, S)),
        "kappa": rng.uniform(-0.5 * bound, 0.5 * bound, (M, S)),
        "eta": rng.uniform(0.0, bound, (M, S, marks)),
        "dA": rng.uniform(-bound, bound, (M, S)) * chain.dt,
        "xi": rng.uniform(-bound, bound, S),
    }


# ---------------------------------------------------------------------------
# comparison


def _witness(chain, m, s):
    return {"m": int(m), "t": float(chain.times[m]), "x": float(chain.state_x[s]),
            "regime": int(chain.state_regime[s]), "layer": int(chain.layer[s])}


def comparison_check(sol, sol_prime, data, data_prime, tol=1e-12, counterexample=False):
    """Check ``Y <= Y'`` after verifying the comparison hypotheses nodewise.

    Hypotheses, in order: the driver of ``data`` is declared nondecreasing in
    ``r``; the chain weights are nonnegative; ``xi <= xi'``;
    ``g(Y', Z', V') <= g'(Y', Z', V')``; ``L <= L'``; ``U <= U'``.  The first
    failure gives ``NOT-APPLICABLE``.  With ``counterexample=True`` the
    monotonicity declaration is not required and the verdict is
    ``INFORMATIONAL`` (ordering is reported, never gated).
    """
    ch = sol.chain
    if sol_prime.chain.n_states != ch.n_states or sol_prime.Y.shape != sol.Y.shape or sol_prime.chain.kind != ch.kind:
        raise ValueError("solutions live on mismatched chains")
    M = ch.M
    hyps = []

    def hyp(name, ok, detail=None):
        hyps.append({"hypothesis": name, "holds": bool(ok), **({"detail": detail} if detail else {})})
        return ok

    checks = []
    if not counterexample:
        checks.append(("driver nondecreasing in r", lambda: (data.monotone_in_r, None)))
    checks.append(("nonnegative chain weights", lambda: (ch.monotone, None)))

    def terminal():
        gap = sol.Y[M] - sol_prime.Y[M]
        return np.all(gap <= tol), f"max excess {float(np.max(gap)):.3e}"

    def driver():
        g = data.driver_for(ch)
        free = np.ones((M, ch.n_states), dtype=bool) if sol_prime.fixed is None else ~sol_prime.fixed[:M]
        worst = 0.0
        for m in range(M):
            gm = g(m, sol_prime.driver_y[m], sol_prime.Z[m], sol_prime.Vtilde[m], sol_prime.Wtilde[m])
            worst = max(worst, float(np.max(np.where(free[m], gm - sol_prime.driver_values[m], -np.inf))))
        return worst <= tol, f"max excess {worst:.3e}"

    def lower_order():
        # an inactive lower barrier is minus infinity
        if sol.lower is None:
            return True, None
        if sol_prime.lower is None:
            return not sol.lower_on.any(), "L' absent while L present"
        ok = ~sol.lower_on | (sol_prime.lower_on & (sol.lower - sol_prime.lower <= tol))
        return bool(np.all(ok)), None

    def upper_order():
        # an inactive upper barrier is plus infinity
        if sol_prime.upper is None:
            return True, None
        if sol.upper is None:
            return not sol_prime.upper_on.any(), "U absent while U' present"
        ok = ~sol_prime.upper_on | (sol.upper_on & (sol.upper - sol_prime.upper <= tol))
        return bool(np.all(ok)), None

    checks += [
        ("xi <= xi'", terminal),
        ("g(Y',Z',V') <= g'(Y',Z',V')", driver),
        ("L <= L'", lower_order),
        ("U <= U'", upper_order),
    ]
    for name, fn in checks:
        ok, detail = fn()
        if not hyp(name, ok, detail) and not counterexample:
            return {"name": "comparison", "status": "NOT-APPLICABLE", "first_violated": name, "hypotheses": hyps}

    diff = sol_prime.Y - sol.Y
    idx = np.unravel_index(np.argmin(diff), diff.shape)
    margin = float(diff[idx])
    held = margin >= -tol
    out = {"name": "comparison", "worst_margin": margin, "witness": _witness(ch, *idx), "hypotheses": hyps,
           "ordering_held": bool(held)}
    out["status"] = "INFORMATIONAL" if counterexample else ("PASS" if held else "FAIL")
    return out
