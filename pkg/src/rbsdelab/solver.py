"""Backward dynamic programming for the reflected problems on a chain.

The explicit step at time index ``m`` is

    Yhat = E[Y_{m+1} | s] + dt * g(t_m, s, E[Y_{m+1} | s], Z_m, V_m)
    Y_m  = median(L, Yhat, U),  dK+ = (L - Yhat)^+,  dK- = (Yhat - U)^+

with each barrier applied only where it is active.  Reflection increments
are stored per step (``dKplus[m]`` is the push over ``[t_m, t_{m+1}]``
booked at the node where it happened); cumulative ``K`` along a chain
path is recovered with :meth:`SolutionQuadruple.path_K`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .chain import _components, augment, generator_residual
from .data import resolve_tau
from .errors import ConfigurationError, InvariantViolation, PreconditionError

IMPLICIT_TOL = 1e-12
IMPLICIT_MAX_ITER = 500
INVARIANT_TOL = 1e-12


@dataclass(eq=False)
class SolutionQuadruple:
    """Solution grids on the states of ``chain`` (base or augmented).

    Arrays indexed by time have ``M+1`` rows for ``Y`` and the barriers and
    ``M`` rows for everything produced by a backward step.
    """

    kind: str
    chain: object
    Y: np.ndarray            # (M+1, S)
    Z: np.ndarray            # (M, S, 1)
    Vtilde: np.ndarray       # (M, S, A)
    Wtilde: np.ndarray       # (M, S, k)
    dKplus: np.ndarray       # (M, S)
    dKminus: np.ndarray      # (M, S)
    cont: np.ndarray         # (M, S) E[Y_{m+1} | s]
    Yhat: np.ndarray         # (M, S) before projection
    driver_y: np.ndarray     # (M, S) y argument the driver saw
    driver_values: np.ndarray  # (M, S)
    lower: Optional[np.ndarray] = None
    lower_on: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    upper_on: Optional[np.ndarray] = None
    fixed: Optional[np.ndarray] = None
    increment: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def Y0(self):
        return float(self.Y[0, self.chain.s0])

    @property
    def contact_lower(self):
        if self.lower is None:
            return np.zeros(self.Y.shape, dtype=bool)
        return self.lower_on & (self.Y == self.lower)

    @property
    def contact_upper(self):
        if self.upper is None:
            return np.zeros(self.Y.shape, dtype=bool)
        return self.upper_on & (self.Y == self.upper)

    def layer_view(self, layer=0):
        """Arrays restricted to one layer of an augmented chain (or the base)."""
        sel = self.chain.layer == layer
        return {
            "Y": self.Y[:, sel], "Z": self.Z[:, sel], "Vtilde": self.Vtilde[:, sel], "Wtilde": self.Wtilde[:, sel],
            "dKplus": self.dKplus[:, sel], "dKminus": self.dKminus[:, sel],
        }

    def path_K(self, states):
        """Cumulative ``(K+, K-)`` along chain paths ``states`` of shape ``(n, M+1)``."""
        M = self.chain.M
        steps = np.arange(M)
        kp = np.cumsum(self.dKplus[steps, states[:, :M]], axis=1)
        km = np.cumsum(self.dKminus[steps, states[:, :M]], axis=1)
        zero = np.zeros((len(states), 1))
        return np.hstack([zero, kp]), np.hstack([zero, km])

    def to_csv(self, path):
        """Write the solution dump (one row per time index and state)."""
        ch = self.chain
        M, S = ch.M, ch.n_states
        pad = np.zeros((1, S))
        Z = np.vstack([self.Z[:, :, 0], pad])
        kp = np.vstack([self.dKplus, pad])
        km = np.vstack([self.dKminus, pad])
        contact = (self.contact_lower | self.contact_upper).astype(int)
        with open(path, "w", newline="") as fh:
            fh.write("m,t,x,regime,layer,Y,Z,Kplus,Kminus,contact_flag\n")
            for m in range(M + 1):
                t = repr(float(ch.times[m]))
                x, y, z, a, b = (arr.tolist() for arr in (ch.state_x, self.Y[m], Z[m], kp[m], km[m]))
                rows = [
                    f"{m},{t},{x[s]!r},{ch.state_regime[s]},{ch.layer[s]},{y[s]!r},{z[s]!r},{a[s]!r},{b[s]!r},{contact[m, s]}\n"
                    for s in range(S)
                ]
                fh.writelines(rows)


def _backward(chain, terminal, driver, *, lower=None, lower_on=None, upper=None, upper_on=None,
              fixed=None, fixed_values=None, increment=None, implicit=False, kind="BSDE"):
    M, S = chain.M, chain.n_states
    A, k = chain.n_atoms, chain.k
    dt = chain.dt
    Y = np.empty((M + 1, S))
    Y[M] = terminal
    if fixed is not None:
        Y[M] = np.where(fixed[M], fixed_values[M], Y[M])
    Z = np.zeros((M, S, 1))
    Vt = np.zeros((M, S, A))
    Wt = np.zeros((M, S, k))
    dKp = np.zeros((M, S))
    dKm = np.zeros((M, S))
    cont = np.zeros((M, S))
    Yhat = np.zeros((M, S))
    dry = np.zeros((M, S))
    drv = np.zeros((M, S))
    iters = 0

    for m in range(M - 1, -1, -1):
        E, z, v, w, _ = _components(chain, m, Y[m + 1])
        y = E
        g = driver(m, y, z[:, None], v, w)
        if implicit:
            for _ in range(IMPLICIT_MAX_ITER):
                y_new = E + dt * g
                done = np.max(np.abs(y_new - y)) <= IMPLICIT_TOL * (1.0 + np.max(np.abs(y_new)))
                y = y_new
                g = driver(m, y, z[:, None], v, w)
                iters += 1
                if done:
                    break
            else:
                raise ConfigurationError("implicit driver iteration did not converge")
        yh = E + dt * g
        if increment is not None:
            yh = yh + increment[m]
        ym = yh.copy()
        if lower is not None:
            below = lower_on[m] & (yh < lower[m])
            dKp[m] = np.where(below, lower[m] - yh, 0.0)
            ym = np.where(below, lower[m], ym)
        if upper is not None:
            above = upper_on[m] & (yh > upper[m])
            dKm[m] = np.where(above, yh - upper[m], 0.0)
            ym = np.where(above, upper[m], ym)
        if fixed is not None:
            fm = fixed[m]
            if fm.any():
                ym = np.where(fm, fixed_values[m], ym)
                yh = np.where(fm, fixed_values[m], yh)
                E = np.where(fm, fixed_values[m], E)
                y = np.where(fm, fixed_values[m], y)
                for arr in (z, g):
                    arr[fm] = 0.0
                v[fm] = 0.0
                w[fm] = 0.0
                dKp[m, fm] = 0.0
                dKm[m, fm] = 0.0
        Y[m], Z[m, :, 0], Vt[m], Wt[m] = ym, z, v, w
        cont[m], Yhat[m], dry[m], drv[m] = E, yh, y, g

    sol = SolutionQuadruple(
        kind=kind, chain=chain, Y=Y, Z=Z, Vtilde=Vt, Wtilde=Wt, dKplus=dKp, dKminus=dKm,
        cont=cont, Yhat=Yhat, driver_y=dry, driver_values=drv,
        lower=lower, lower_on=lower_on, upper=upper, upper_on=upper_on, fixed=fixed, increment=increment,
    )
    sol.diagnostics = check_invariants(sol)
    sol.diagnostics["implicit_iterations"] = iters
    return sol


def check_invariants(sol, tol=INVARIANT_TOL):
    """Verify the reflection invariants; raise :class:`InvariantViolation` if broken.

    Returns the diagnostics dictionary (maximum violations, all ``<= tol``).
    """
    M = sol.chain.M
    Y = sol.Y
    free = np.ones((M, sol.chain.n_states), dtype=bool) if sol.fixed is None else ~sol.fixed[:M]
    diag = {}
    viol = 0.0
    if sol.lower is not None:
        viol = max(viol, float(np.max(np.where(sol.lower_on, sol.lower - Y, 0.0), initial=0.0)))
    if sol.upper is not None:
        viol = max(viol, float(np.max(np.where(sol.upper_on, Y - sol.upper, 0.0), initial=0.0)))
    diag["max_constraint_violation"] = viol
    diag["min_increment"] = float(min(np.min(sol.dKplus, initial=0.0), np.min(sol.dKminus, initial=0.0)))
    diag["max_mutual_singularity"] = float(np.max(np.minimum(sol.dKplus, sol.dKminus), initial=0.0))
    mini = 0.0
    if sol.lower is not None:
        mini = max(mini, float(np.max(np.where(sol.dKplus > 0, np.abs(Y[:M] - sol.lower[:M]), 0.0), initial=0.0)))
    if sol.upper is not None:
        mini = max(mini, float(np.max(np.where(sol.dKminus > 0, np.abs(Y[:M] - sol.upper[:M]), 0.0), initial=0.0)))
    elif np.any(sol.dKminus > 0):
        mini = np.inf
    if sol.lower is None and np.any(sol.dKplus > 0):
        mini = np.inf
    diag["minimality_residual"] = mini
    rhs = sol.cont + sol.chain.dt * sol.driver_values + sol.dKplus - sol.dKminus
    if sol.increment is not None:
        rhs = rhs + sol.increment
    scale = 1.0 + np.abs(Y[:M])
    diag["backward_residual"] = float(np.max(np.where(free, np.abs(Y[:M] - rhs) / scale, 0.0), initial=0.0))
    diag["nodes"] = int(Y.size)
    problems = []
    if viol > tol:
        problems.append(f"barrier constraint violated by {viol:.3e}")
    if diag["min_increment"] < 0:
        problems.append("negative reflection increment")
    if diag["max_mutual_singularity"] > 0:
        problems.append("both reflections active at one node")
    if mini > tol:
        problems.append(f"reflection away from its barrier ({mini:.3e})")
    if diag["backward_residual"] > tol:
        problems.append(f"backward residual {diag['backward_residual']:.3e}")
    if problems:
        raise InvariantViolation("; ".join(problems))
    return diag


def _check_feasible(chain, data):
    if chain is not data.chain and chain.kind == "base":
        if chain.n_states != data.chain.n_states or not np.array_equal(chain.times, data.chain.times):
            raise ConfigurationError("data were assembled on a different chain")
    prod = chain.dt * data.lipschitz
    if prod >= 1.0:
        raise PreconditionError(f"dt * Lipschitz = {prod:.4g} >= 1; refine the time grid")
    return prod


def solve(chain, data, implicit=False):
    """Solve the problem described by ``data`` on ``chain``.

    The two stopping-time kinds are solved on an augmented chain whose
    second layer records that ``tau`` has occurred; the returned solution
    lives on that chain (``sol.chain``).
    """
    dt_lip = _check_feasible(chain, data)
    M, S = chain.M, chain.n_states
    kind = data.kind
    if kind in ("BSDE", "RBSDE", "R2BSDE"):
        on = np.ones((M + 1, S), dtype=bool)
        sol = _backward(
            chain, data.terminal, data.driver_for(chain),
            lower=data.lower, lower_on=on if data.lower is not None else None,
            upper=data.upper, upper_on=on if data.upper is not None else None,
            implicit=implicit, kind=kind,
        )
    elif kind == "TAU-R2BSDE":
        aug = augment(chain, data.stop_mask, "activation")
        upper_on = np.hstack([data.stop_mask, np.ones((M + 1, S), dtype=bool)])
        sol = _backward(
            aug, np.tile(data.terminal, 2), data.driver_for(aug),
            lower=np.tile(data.lower, 2), lower_on=np.ones((M + 1, 2 * S), dtype=bool),
            upper=np.tile(data.upper, 2), upper_on=upper_on, implicit=implicit, kind=kind,
        )
    elif kind == "RBSDE-random-terminal":
        stop_values = np.tile(data.terminal, (M + 1, 1))
        sol = _random_terminal(chain, data, data.stop_mask, stop_values, implicit=implicit)
    else:  # pragma: no cover - assemble rejects unknown kinds
        raise ConfigurationError(f"unknown kind {kind}")
    sol.diagnostics["dt_times_lipschitz"] = dt_lip
    sol.diagnostics["chain_monotone"] = chain.monotone
    return sol


def _random_terminal(chain, data, mask, stop_values, implicit=False):
    """Lower-reflected problem stopped at ``tau`` with value ``stop_values[m, s]`` there."""
    M, S = chain.M, chain.n_states
    aug = augment(chain, mask, "absorbing")
    fixed = np.hstack([mask, np.ones((M + 1, S), dtype=bool)])
    fixed_values = np.tile(stop_values, 2)
    lower_on = np.hstack([np.ones((M + 1, S), dtype=bool), np.zeros((M + 1, S), dtype=bool)])
    return _backward(
        aug, fixed_values[M], data.driver_for(aug),
        lower=np.tile(data.lower, 2), lower_on=lower_on,
        fixed=fixed, fixed_values=fixed_values, implicit=implicit, kind="RBSDE-random-terminal",
    )


def paste_tau(chain, data_r2, tau):
    """Build the ``tau``-activated solution by pasting two simpler solves.

    Solve the doubly reflected problem (hat), then the lower-reflected
    problem stopped at ``tau`` with terminal value ``Yhat_tau`` (bar), and
    glue: bar before ``tau``, hat from ``tau`` on.  Reflection increments
    follow the same split, so cumulative ``K+`` is ``Kbar`` up to ``tau`` and
    continues with the increments of ``Khat``; ``K-`` only grows after ``tau``.
    The result lives on the activation-augmented chain, like a direct
    ``TAU-R2BSDE`` solve.
    """
    if data_r2.kind != "R2BSDE":
        raise PreconditionError("paste_tau needs complete doubly reflected data (kind R2BSDE)")
    dt_lip = _check_feasible(chain, data_r2)
    mask = tau if isinstance(tau, np.ndarray) else resolve_tau(tau, chain)
    M, S = chain.M, chain.n_states
    hat = solve(chain, data_r2)
    bar = _random_terminal(chain, data_r2, mask, hat.Y)

    def glue(hat_arr, bar_arr, steps):
        pre = np.where(mask[:steps, :, None] if hat_arr.ndim == 3 else mask[:steps], hat_arr, bar_arr[:, :S])
        return np.concatenate([pre, hat_arr], axis=1)

    Y = glue(hat.Y, bar.Y, M + 1)
    Z = glue(hat.Z, bar.Z, M)
    Vt = glue(hat.Vtilde, bar.Vtilde, M)
    Wt = glue(hat.Wtilde, bar.Wtilde, M)
    dKp = glue(hat.dKplus, bar.dKplus, M)
    dKm = glue(hat.dKminus, np.zeros_like(bar.dKminus), M)
    cont = glue(hat.cont, bar.cont, M)
    yh = glue(hat.Yhat, bar.Yhat, M)
    dry = glue(hat.driver_y, bar.driver_y, M)
    drv = glue(hat.driver_values, bar.driver_values, M)

    aug = augment(chain, mask, "activation")
    sol = SolutionQuadruple(
        kind="TAU-R2BSDE", chain=aug, Y=Y, Z=Z, Vtilde=Vt, Wtilde=Wt, dKplus=dKp, dKminus=dKm,
        cont=cont, Yhat=yh, driver_y=dry, driver_values=drv,
        lower=np.tile(data_r2.lower, 2), lower_on=np.ones((M + 1, 2 * S), dtype=bool),
        upper=np.tile(data_r2.upper, 2), upper_on=np.hstack([mask, np.ones((M + 1, S), dtype=bool)]),
    )
    sol.diagnostics = check_invariants(sol)
    sol.diagnostics.update(pasted=True, dt_times_lipschitz=dt_lip, chain_monotone=chain.monotone)
    return sol


def _on_states(func, chain, steps):
    out = np.empty((steps, chain.n_states))
    x = chain.state_x[:, None]
    groups = [np.flatnonzero(chain.state_regime == i) for i in range(chain.k)]
    for m in range(steps):
        for i, idx in enumerate(groups):
            out[m, idx] = func(chain.times[m], x[idx], i)
    return out


def kplus_density_check(sol, data):
    """Check ``dK+ / dt <= 1{Y = L} (g^- + alpha) + tol`` at every node.

    ``tol`` is the chain's local error on the barrier generator,
    ``1{phi > c} |(E[phi_{m+1}] - phi_m) / dt - G phi|``, plus a rounding
    allowance proportional to ``|L| / dt``.
    """
    barrier = data.barrier
    if barrier is None or sol.lower is None:
        return {"name": "kplus_density", "status": "NOT-APPLICABLE", "reason": "no alpha density for this lower barrier"}
    ch = sol.chain
    M, dt = ch.M, ch.dt
    phi = _on_states(barrier.phi.value, ch, M + 1)
    gen = _on_states(barrier.a, ch, M)
    above = _on_states(lambda t, x, i: barrier.above_floor(t, x, i).astype(float), ch, M) > 0
    alpha = data.alpha_values[:M][:, ch.base_state]
    resid = np.where(above, generator_residual(ch, phi, gen), 0.0)
    L = sol.lower[:M]
    contact = sol.lower_on[:M] & (sol.Y[:M] == L)
    rate = sol.dKplus / dt
    bound = np.where(contact, np.maximum(-sol.driver_values, 0.0) + alpha, 0.0) + resid
    slack = 1e-13 * (1.0 + np.abs(L)) / dt
    excess = rate - bound - slack
    active = sol.dKplus > 0
    n_viol = int(np.sum(excess > 0))
    if active.any():
        margins = np.where(active, bound - rate, np.inf)
        idx = np.unravel_index(np.argmin(margins), margins.shape)
        worst = float(margins[idx])
    else:
        idx, worst = None, np.inf
    out = {
        "name": "kplus_density", "status": "PASS" if n_viol == 0 else "FAIL", "violations": n_viol,
        "worst_margin": worst, "contact_nodes": int(np.sum(contact)), "pushing_nodes": int(np.sum(active)),
        "max_consistency_tol": float(np.max(resid, initial=0.0)),
    }
    if idx is not None:
        m, s = int(idx[0]), int(idx[1])
        out["witness"] = {"m": m, "t": float(ch.times[m]), "x": float(ch.state_x[s]), "regime": int(ch.state_regime[s]), "layer": int(ch.layer[s])}
    return out
