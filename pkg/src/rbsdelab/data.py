"""Markovian BSDE data: driver, terminal value, obstacles and activation time.

Cost callables follow the vectorised conventions of :mod:`rbsdelab.model`:

=========== ==================================== =========
callable    signature                            returns
=========== ==================================== =========
g_tilde     ``g(t, x, i, u, z, r)``              ``(n,)``
Psi         ``Psi(x, i)``                        ``(n,)``
ell, h      ``ell(t, x, i)``                     ``(n,)``
=========== ==================================== =========

with ``x`` of shape ``(n, d)``, ``u`` ``(n, k)``, ``z`` ``(n, d)`` and ``r``
``(n,)``.  A driver that is not of the Markov form can be supplied directly
as ``driver(t, x, i, y, z, vtilde, wtilde)``; it then replaces ``g_tilde``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DataError
from .model import SmoothFunction, _as_points, apply_generator

KINDS = ("BSDE", "RBSDE", "R2BSDE", "RBSDE-random-terminal", "TAU-R2BSDE")
NO_FLOOR = None  # sentinel for c = -infinity

# slack on the sampled inequalities; obstacles are often equal at T
ORDER_TOL = 1e-12


# ---------------------------------------------------------------------------
# lower barrier built from a smooth system


@dataclass(frozen=True, eq=False)
class LowerBarrier:
    """``L = phi v c`` together with ``a = G phi`` and the density bound ``alpha``.

    Calling the object evaluates ``L``; ``c is None`` means no floor.
    """

    phi: SmoothFunction
    c: Optional[float]
    model: object

    def __call__(self, t, x, i):
        val = self.phi.value(t, x, i)
        return val if self.c is None else np.maximum(val, self.c)

    def a(self, t, x, i):
        return apply_generator(self.model, self.phi, t, _as_points(x, self.model.d), i)

    def above_floor(self, t, x, i):
        val = self.phi.value(t, x, i)
        return np.ones(len(val), dtype=bool) if self.c is None else val > self.c

    def alpha(self, t, x, i):
        a = self.a(t, x, i)
        return np.where(self.above_floor(t, x, i), np.maximum(-a, 0.0), 0.0)


def lower_barrier_from_phi(phi, c, model):
    """Build ``(L, alpha, a)`` for the barrier ``L = max(phi, c)``.

    Parameters
    ----------
    phi : SmoothFunction
        Must carry ``dt``, ``grad`` and ``hess``.
    c : float or None
        Floor level; ``None`` (``NO_FLOOR``) means no floor at all.
    model : ModelSpec

    Returns
    -------
    LowerBarrier
        Callable as ``L``; ``.alpha`` and ``.a`` are the other two functions.
    """
    for attr in ("value", "dt", "grad", "hess"):
        if getattr(phi, attr, None) is None:
            raise ConfigurationError(f"phi is missing its '{attr}' component")
    if c is not None and not np.isfinite(c):
        raise ConfigurationError("use NO_FLOOR (None) instead of an infinite floor")
    return LowerBarrier(phi=phi, c=None if c is None else float(c), model=model)


# ---------------------------------------------------------------------------
# cost functions


@dataclass(frozen=True, eq=False)
class CostFunctions:
    """User cost functions with the declared Lipschitz constant."""

    g_tilde: Optional[Callable] = None
    Psi: Optional[Callable] = None
    ell: Optional[Callable] = None
    h: Optional[Callable] = None
    lipschitz: float = 0.0
    monotone_in_r: bool = True
    driver: Optional[Callable] = None

    def __post_init__(self):
        if self.Psi is None:
            raise ConfigurationError("terminal function Psi is required")
        if (self.g_tilde is None) == (self.driver is None):
            raise ConfigurationError("give exactly one of g_tilde and driver")
        if not (np.isfinite(self.lipschitz) and self.lipschitz >= 0):
            raise ConfigurationError("Lipschitz constant must be finite and nonnegative")

    def replace(self, **changes):
        return replace(self, **changes)


def markov_driver(cost, model, t, x, i, y, z, vtilde, wtilde):
    """Driver ``g`` of the Markovian problem at one regime.

    ``u~_j = y + w~_j`` for ``j != i`` (``u~_i = y``), ``r~ = sum_a v~_a f_a m_a``
    and ``g = g~(t, x, i, u~, z, r~) - sum_{j != i} w~_j lambda_ij``.
    Vectorised over points; scalar inputs for a single point give a float.
    """
    single = np.ndim(x) <= 1
    x = _as_points(x, model.d)
    n = x.shape[0]
    y = np.broadcast_to(np.asarray(y, dtype=float), (n,))
    z = np.broadcast_to(np.asarray(z, dtype=float).reshape(-1, model.d), (n, model.d))
    if model.n_atoms:
        vt = np.broadcast_to(np.asarray(vtilde, dtype=float).reshape(-1, model.n_atoms), (n, model.n_atoms))
    else:
        vt = np.zeros((n, 0))
    wt = np.array(np.broadcast_to(np.asarray(wtilde, dtype=float).reshape(-1, model.k), (n, model.k)))
    for name, arr in (("y", y), ("z", z), ("vtilde", vt), ("wtilde", wt)):
        if not np.all(np.isfinite(arr)):
            raise DataError(f"non-finite driver input '{name}'")
    wt[:, i] = 0.0
    u = y[:, None] + wt
    r = np.zeros(n)
    for a, atom in enumerate(model.jump_atoms):
        r += vt[:, a] * model.intensity(t, x, i, a) * atom.mass
    out = np.asarray(cost.g_tilde(t, x, i, u, z, r), dtype=float) * np.ones(n)
    if model.k > 1:
        lam = model.switch_rates(t, x)
        out = out - np.einsum("nj,nj->n", wt, lam[:, i, :])
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# stopping times


@dataclass(frozen=True)
class DeterministicTau:
    """``tau = time``; must fall on the time grid."""

    time: float


@dataclass(frozen=True, eq=False)
class HittingTau:
    """First time ``t_m`` with ``region(t_m, x, i)`` true (``T`` if never).

    ``region`` returns a boolean ``(n,)`` array; the region is closed on the
    grid, so a path starting inside has ``tau = 0``.
    """

    region: Callable
    description: str = "region"

    @classmethod
    def below(cls, level):
        return cls(lambda t, x, i: x[:, 0] <= level, f"x <= {level:g}")

    @classmethod
    def above(cls, level):
        return cls(lambda t, x, i: x[:, 0] >= level, f"x >= {level:g}")


def resolve_tau(tau_spec, chain):
    """Stopping region ``R[m, s]`` on the base chain; ``R[M]`` is all true."""
    M, S = chain.M, chain.n_states
    mask = np.zeros((M + 1, S), dtype=bool)
    if tau_spec is None or tau_spec == "none":
        mask[M] = True
        return mask
    if isinstance(tau_spec, DeterministicTau):
        m_tau = tau_spec.time / chain.dt
        if abs(m_tau - round(m_tau)) > 1e-9 or not (-1e-9 <= m_tau <= M + 1e-9):
            raise ConfigurationError(f"tau = {tau_spec.time} is not a point of the time grid")
        mask[int(round(m_tau)):] = True
        return mask
    if isinstance(tau_spec, HittingTau):
        xs = chain.nodes[:, None]
        n = chain.n_nodes
        for m, t in enumerate(chain.times):
            for i in range(chain.k):
                hit = np.asarray(tau_spec.region(t, xs, i), dtype=bool)
                if hit.shape != (n,):
                    raise ConfigurationError("hitting region must return one flag per node")
                mask[m, i * n:(i + 1) * n] = hit
        mask[M] = True
        return mask
    raise ConfigurationError(f"cannot resolve stopping time {tau_spec!r} on the chain")


# ---------------------------------------------------------------------------
# assembled problem


@dataclass(eq=False)
class ProblemData:
    """Problem data evaluated on the nodes of a base chain.

    Barrier and density arrays have shape ``(M+1, S)``; ``None`` marks an
    absent barrier.  ``stop_mask`` is the resolved stopping region for the
    two kinds that use one.
    """

    kind: str
    cost: CostFunctions
    model: object
    chain: object
    tau_spec: object
    terminal: np.ndarray
    lower: Optional[np.ndarray]
    upper: Optional[np.ndarray]
    alpha_values: Optional[np.ndarray]
    stop_mask: Optional[np.ndarray]
    checks: dict = field(default_factory=dict)

    @property
    def alpha(self):
        return self.cost.ell.alpha if isinstance(self.cost.ell, LowerBarrier) else None

    @property
    def barrier(self):
        return self.cost.ell if isinstance(self.cost.ell, LowerBarrier) else None

    @property
    def lipschitz(self):
        return self.cost.lipschitz

    @property
    def monotone_in_r(self):
        return self.cost.monotone_in_r

    def driver_for(self, chain_like):
        """Return ``g(m, y, z, vtilde, wtilde)`` evaluated on every state of ``chain_like``."""
        cost, model = self.cost, self.model
        x = chain_like.state_x[:, None]
        groups = [np.flatnonzero(chain_like.state_regime == i) for i in range(model.k)]

        def g(m, y, z, vt, wt):
            t = chain_like.times[m]
            out = np.empty(len(y))
            for i, idx in enumerate(groups):
                if cost.driver is not None:
                    out[idx] = cost.driver(t, x[idx], i, y[idx], z[idx], vt[idx], wt[idx])
                else:
                    out[idx] = markov_driver(cost, model, t, x[idx], i, y[idx], z[idx], vt[idx], wt[idx])
            return out

        return g


def _on_nodes(func, chain, terminal=False):
    """Evaluate ``func(t, x, i)`` (or ``func(x, i)``) on all chain nodes."""
    xs = chain.nodes[:, None]
    n = chain.n_nodes
    if terminal:
        return np.concatenate([np.asarray(func(xs, i), dtype=float) * np.ones(n) for i in range(chain.k)])
    out = np.empty((chain.M + 1, chain.n_states))
    for m, t in enumerate(chain.times):
        for i in range(chain.k):
            out[m, i * n:(i + 1) * n] = np.asarray(func(t, xs, i), dtype=float) * np.ones(n)
    return out


def _witnesses(chain, bad, limit=5):
    out = []
    for m, s in zip(*np.nonzero(bad)):
        out.append({"m": int(m), "t": float(chain.times[m]), "x": float(chain.state_x[s]), "regime": int(chain.state_regime[s])})
        if len(out) >= limit:
            break
    return out


def _check_order(chain, lower, upper, terminal):
    M = chain.M
    if lower is not None and upper is not None:
        bad = lower > upper + ORDER_TOL
        if bad.any():
            wit = _witnesses(chain, bad)
            raise DataError(f"obstacle ordering ell <= h violated (M.2.ii) at {int(bad.sum())} nodes; first: {wit}", wit)
    if lower is not None:
        bad = lower[M] > terminal + ORDER_TOL
        if bad.any():
            wit = _witnesses(chain, np.vstack([np.zeros((M, chain.n_states), bool), bad]))
            raise DataError(f"ell(T) <= Psi violated (M.2.ii) at {int(bad.sum())} nodes; first: {wit}", wit)
    if upper is not None:
        bad = terminal > upper[M] + ORDER_TOL
        if bad.any():
            wit = _witnesses(chain, np.vstack([np.zeros((M, chain.n_states), bool), bad]))
            raise DataError(f"Psi <= h(T) violated (M.2.ii) at {int(bad.sum())} nodes; first: {wit}", wit)


def probe_driver(cost, model, chain, n_probes=10_000, seed=0, scale=None):
    """Spot-check the declared Lipschitz constant and monotonicity in ``r``.

    Probe pairs are drawn at random chain nodes; a violation raises
    :class:`DataError` carrying the witness pair.  Returns the worst observed
    ratio of increment to bound.
    """
    if cost.g_tilde is None:
        return {"probes": 0, "worst_ratio": 0.0, "status": "NOT-APPLICABLE"}
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4C49]))
    d, k = model.d, model.k
    if scale is None:
        scale = 1.0 + float(np.max(np.abs(chain.nodes)))
    m = rng.integers(0, chain.M + 1, n_probes)
    s = rng.integers(0, chain.n_states, n_probes)
    worst = 0.0
    for i in range(k):
        sel = chain.state_regime[s] == i
        if not sel.any():
            continue
        n = int(sel.sum())
        t = chain.times[m[sel]]
        x = chain.state_x[s[sel]][:, None]
        u1, u2 = rng.normal(0, scale, (2, n, k))
        z1, z2 = rng.normal(0, scale, (2, n, d))
        r1, r2 = rng.normal(0, scale, (2, n))
        # time is probed per node; callables take a scalar t, so loop over distinct times
        g1, g2, g3 = np.empty(n), np.empty(n), np.empty(n)
        step = np.abs(rng.normal(0, scale, n))
        for tv in np.unique(t):
            idx = t == tv
            g1[idx] = cost.g_tilde(tv, x[idx], i, u1[idx], z1[idx], r1[idx])
            g2[idx] = cost.g_tilde(tv, x[idx], i, u2[idx], z2[idx], r2[idx])
            g3[idx] = cost.g_tilde(tv, x[idx], i, u1[idx], z1[idx], r1[idx] + step[idx])
        dist = np.linalg.norm(u1 - u2, axis=1) + np.linalg.norm(z1 - z2, axis=1) + np.abs(r1 - r2)
        bound = cost.lipschitz * dist
        excess = np.abs(g1 - g2) - bound * (1 + 1e-12) - 1e-12 * (1 + np.abs(g1))
        if np.any(excess > 0):
            j = int(np.argmax(excess))
            wit = {"t": float(t[j]), "x": float(x[j, 0]), "regime": i, "u": u1[j].tolist(), "u_prime": u2[j].tolist(),
                   "z": z1[j].tolist(), "z_prime": z2[j].tolist(), "r": float(r1[j]), "r_prime": float(r2[j])}
            raise DataError(f"declared Lipschitz constant {cost.lipschitz} violated (M.1.ii) at {wit}", [wit])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(bound > 0, np.abs(g1 - g2) / bound, 0.0)
        worst = max(worst, float(np.max(ratio)))
        if cost.monotone_in_r:
            drop = g1 - g3 - 1e-12 * (1 + np.abs(g1))
            if np.any(drop > 0):
                j = int(np.argmax(drop))
                wit = {"t": float(t[j]), "x": float(x[j, 0]), "regime": i, "r": float(r1[j]), "r_prime": float(r1[j] + step[j])}
                raise DataError(f"driver declared nondecreasing in r but decreases at {wit}", [wit])
    return {"probes": int(n_probes), "worst_ratio": worst, "status": "PASS"}


def _check_growth(barrier, chain):
    xs = chain.nodes[:, None]
    for t in chain.times[:: max(1, chain.M // 10)]:
        for i in range(chain.k):
            vals = [barrier.phi.value(t, xs, i), barrier.a(t, xs, i),
                    np.einsum("nl,nlq->nq", barrier.phi.grad(t, xs, i), barrier.model.dispersion(t, xs, i))]
            if not all(np.all(np.isfinite(v)) for v in vals):
                raise DataError("phi, G phi or its diffusion part is not finite on the grid")


def assemble(kind, cost, model, tau_spec=None, *, chain, probe_seed=0, n_probes=10_000):
    """Assemble and check problem data on the nodes of ``chain``.

    Raises
    ------
    ConfigurationError
        Missing barrier for the requested kind, unknown kind or unresolvable tau.
    DataError
        Obstacle ordering or driver declarations violated on the sampled nodes.
    """
    if kind not in KINDS:
        raise ConfigurationError(f"unknown problem kind '{kind}'; expected one of {KINDS}")
    if chain is None:
        raise ConfigurationError("data are assembled on the nodes of a chain")
    if chain.kind != "base":
        raise ConfigurationError("data must be assembled on a base chain")
    if kind in ("RBSDE", "R2BSDE", "RBSDE-random-terminal", "TAU-R2BSDE") and cost.ell is None:
        raise ConfigurationError(f"kind {kind} needs a lower obstacle ell")
    if kind in ("R2BSDE", "TAU-R2BSDE") and cost.h is None:
        raise ConfigurationError(f"kind {kind} needs an upper obstacle h")
    if kind not in ("RBSDE-random-terminal", "TAU-R2BSDE") and tau_spec not in (None, "none"):
        raise ConfigurationError(f"kind {kind} takes no stopping time")

    terminal = _on_nodes(cost.Psi, chain, terminal=True)
    use_lower = kind != "BSDE"
    use_upper = kind in ("R2BSDE", "TAU-R2BSDE")
    lower = _on_nodes(cost.ell, chain) if use_lower else None
    upper = _on_nodes(cost.h, chain) if use_upper else None
    for name, arr in (("Psi", terminal), ("ell", lower), ("h", upper)):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise DataError(f"{name} is not finite on the chain nodes")
    _check_order(chain, lower, upper, terminal)

    alpha_values = None
    if use_lower and isinstance(cost.ell, LowerBarrier):
        _check_growth(cost.ell, chain)
        alpha_values = _on_nodes(cost.ell.alpha, chain)

    stop_mask = None
    if kind in ("RBSDE-random-terminal", "TAU-R2BSDE"):
        stop_mask = resolve_tau(tau_spec, chain)
    probe = probe_driver(cost, model, chain, n_probes=n_probes, seed=probe_seed)
    return ProblemData(
        kind=kind, cost=cost, model=model, chain=chain, tau_spec=tau_spec, terminal=terminal,
        lower=lower, upper=upper, alpha_values=alpha_values, stop_mask=stop_mask,
        checks={"lipschitz_probe": probe},
    )


def with_kind(data, kind, tau_spec=None):
    """Reassemble the same cost functions as another problem kind."""
    return assemble(kind, data.cost, data.model, tau_spec, chain=data.chain, n_probes=0)


# ---------------------------------------------------------------------------
# built-in cost family for declaration files


def payoff(spec):
    """Regime-independent function of ``x_1`` from a small declarative family.

    ``{"type": "call" | "put", "strike": K}``, ``{"type": "constant", "value": c}``,
    ``{"type": "linear", "slope": a, "intercept": c}``, ``{"type": "floor", "floor": c}``
    (``max(x, c)``); every entry accepts an additive ``"shift"``.
    """
    kind = spec.get("type")
    shift = float(spec.get("shift", 0.0))
    if kind == "call":
        K = float(spec["strike"])
        return lambda x: np.maximum(x[:, 0] - K, 0.0) + shift
    if kind == "put":
        K = float(spec["strike"])
        return lambda x: np.maximum(K - x[:, 0], 0.0) + shift
    if kind == "constant":
        c = float(spec["value"])
        return lambda x: np.full(len(x), c + shift)
    if kind == "linear":
        a, c = float(spec.get("slope", 1.0)), float(spec.get("intercept", 0.0))
        return lambda x: a * x[:, 0] + c + shift
    if kind == "floor":
        c = float(spec["floor"])
        return lambda x: np.maximum(x[:, 0], c) + shift
    raise ConfigurationError(f"unknown payoff type '{kind}'")


def affine_driver(k, const=0.0, own=0.0, u=None, z=None, r=0.0):
    """``g~ = const + own * u_i + u . coef_u + z . coef_z + r * coef_r``.

    Returns ``(g_tilde, lipschitz, monotone_in_r)`` with the smallest
    Lipschitz constant valid for Euclidean norms on each argument.
    """
    cu = np.zeros(k) if u is None else np.asarray(u, dtype=float).reshape(k)
    cz = None if z is None else np.asarray(z, dtype=float).ravel()

    def g_tilde(t, x, i, uu, zz, rr):
        out = const + own * uu[:, i] + uu @ cu + r * rr
        if cz is not None:
            out = out + zz @ cz
        return out

    lip_u = max(float(np.linalg.norm(cu + own * np.eye(k)[i])) for i in range(k))
    lip = max(lip_u, 0.0 if cz is None else float(np.linalg.norm(cz)), abs(float(r)))
    return g_tilde, lip, r >= 0


def cost_from_config(problem, model):
    """Cost functions from the ``problem`` block of a run configuration."""
    drv = problem.get("driver", {"type": "zero"})
    extra = {}
    if drv.get("type") == "zero":
        # g itself vanishes, including the regime-switch term
        extra["driver"] = lambda t, x, i, y, z, vt, wt: np.zeros(len(y))
        lip, mono = 0.0, True
    elif drv.get("type") == "affine":
        g, lip, mono = affine_driver(model.k, drv.get("const", 0.0), drv.get("own", 0.0), drv.get("u"), drv.get("z"), drv.get("r", 0.0))
        extra["g_tilde"] = g
    else:
        raise ConfigurationError(f"unknown driver type '{drv.get('type')}'")
    lip = float(drv.get("lipschitz", lip))

    term = payoff(problem["terminal"])
    Psi = lambda x, i: term(x)

    def obstacle(spec):
        if spec is None:
            return None
        if spec.get("type") == "phi_floor":
            floor = spec.get("floor")
            return lower_barrier_from_phi(SmoothFunction.coordinate(0), None if floor is None else float(floor), model)
        fn = payoff(spec)
        return lambda t, x, i: fn(x)

    return CostFunctions(Psi=Psi, ell=obstacle(problem.get("lower")), h=obstacle(problem.get("upper")),
                         lipschitz=lip, monotone_in_r=bool(mono), **extra)


def tau_from_config(spec):
    if spec is None or spec == "none":
        return None
    if "time" in spec:
        return DeterministicTau(float(spec["time"]))
    if "hit_below" in spec:
        return HittingTau.below(float(spec["hit_below"]))
    if "hit_above" in spec:
        return HittingTau.above(float(spec["hit_above"]))
    raise ConfigurationError(f"unknown tau declaration {spec!r}")


def acceptance_cost(model):
    """Cost functions of the acceptance problem (see the decisions notes).

    ``L = x v 80`` built from ``phi = x``, ``U = L + 30``, ``Psi = x v 80`` and
    ``g~ = -0.05 u_i``.
    """
    g, lip, mono = affine_driver(model.k, own=-0.05)
    ell = lower_barrier_from_phi(SmoothFunction.coordinate(0), 80.0, model)
    return CostFunctions(
        g_tilde=g, Psi=lambda x, i: np.maximum(x[:, 0], 80.0), ell=ell,
        h=lambda t, x, i: np.maximum(x[:, 0], 80.0) + 30.0,
        lipschitz=lip, monotone_in_r=mono,
    )
