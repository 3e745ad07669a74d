"""Locally consistent Markov-chain approximation of ``(X, N)`` for ``d = 1``.

States are ``(node, regime)`` pairs flattened regime-major:
``s = regime * n_nodes + node``.  Each state carries a fixed list of
branches, identical in layout for every state::

    0            stay
    1, 2         diffusion move up / down (span ``k_s`` nodes)
    3 .. 3+A-1   jump to the node nearest ``x + delta(y_a)``
    3+A .. +k    switch to regime ``j`` (probability 0 when ``j`` is the current regime)

Branch probabilities, targets and displacements are stored per time step as
dense ``(M, S, B)`` arrays; the sparse kernel ``P_m`` is derived from them on
demand.  Keeping branches separate (rather than merged matrix entries) is what
lets :func:`martingale_components` read ``Z``, ``V~`` and ``W~`` off a value
vector exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError

MULTI_D_SUPPORTED = False

STAY, UP, DOWN = 0, 1, 2
ROW_TOL = 1e-12


@dataclass
class ConsistencyReport:
    """Local-consistency residuals of a chain, all per unit time."""

    mean_residual: np.ndarray      # (M, S) |E[dX] - b dt| / dt
    variance_residual: np.ndarray  # (M, S) |Var_diff[dX] - a dt| / dt
    snapping_error: np.ndarray     # (M, S, A) |snapped jump - delta|
    boundary_affected: np.ndarray  # (M, S) a target was clipped to the grid
    span: np.ndarray               # (M, S) diffusion span in nodes
    upwind: np.ndarray             # (M, S) drift handled by upwinding
    max_admissible_dt: float       # for the strict nearest-neighbour stencil
    jump_probability_residual: float = 0.0
    switch_probability_residual: float = 0.0

    def summary(self):
        interior = ~self.boundary_affected
        def _max(a, mask=None):
            vals = a if mask is None else a[mask]
            return float(np.max(vals)) if vals.size else 0.0
        return {
            "max_mean_residual": _max(self.mean_residual),
            "max_mean_residual_interior": _max(self.mean_residual, interior),
            "max_variance_residual_interior": _max(self.variance_residual, interior),
            "max_snapping_error": _max(self.snapping_error),
            "boundary_affected_fraction": float(np.mean(self.boundary_affected)),
            "max_span": int(np.max(self.span)),
            "upwind_fraction": float(np.mean(self.upwind)),
            "max_admissible_dt_nearest": float(self.max_admissible_dt),
            "jump_probability_residual": self.jump_probability_residual,
            "switch_probability_residual": self.switch_probability_residual,
        }


@dataclass(eq=False)
class ChainApprox:
    """Finite-state time-grid chain with branch-level transition data.

    Augmented chains (see :func:`augment`) reuse this class with ``2 S``
    states; ``layer`` and ``base_state`` map them back to the base grid.
    """

    model: object
    times: np.ndarray
    nodes: np.ndarray
    k: int
    n_atoms: int
    targets: np.ndarray   # (M, S, B) int
    probs: np.ndarray     # (M, S, B)
    disp: np.ndarray      # (M, S, B) spatial displacement of each branch
    db: np.ndarray        # (M, S, B) centred diffusion increment proxy
    db_var: np.ndarray    # (M, S)   E[db^2]
    s0: int
    state_node: np.ndarray
    state_regime: np.ndarray
    layer: np.ndarray
    base_state: np.ndarray
    report: Optional[ConsistencyReport] = None
    kind: str = "base"
    stop_mask: Optional[np.ndarray] = None
    _kernels: dict = field(default_factory=dict, repr=False)

    @property
    def M(self):
        return len(self.times) - 1

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def n_states(self):
        return len(self.state_node)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def h(self):
        return float(self.nodes[1] - self.nodes[0]) if len(self.nodes) > 1 else 0.0

    @property
    def n_branches(self):
        return self.targets.shape[2]

    @property
    def jump_slice(self):
        return slice(3, 3 + self.n_atoms)

    @property
    def switch_slice(self):
        return slice(3 + self.n_atoms, 3 + self.n_atoms + self.k)

    @cached_property
    def state_x(self):
        return self.nodes[self.state_node]

    @cached_property
    def monotone(self):
        """True when every one-step weight is nonnegative."""
        return bool(np.all(self.probs >= 0.0))

    def state_index(self, node, regime, layer=0):
        return int(layer * self.n_nodes * self.k + regime * self.n_nodes + node)

    def nearest_state(self, x, regime, layer=0):
        node = int(np.clip(np.rint((x - self.nodes[0]) / self.h), 0, self.n_nodes - 1)) if self.h else 0
        return self.state_index(node, regime, layer)

    def kernel(self, m):
        """Sparse transition matrix ``P_m`` (duplicate targets summed)."""
        if m not in self._kernels:
            S, B = self.n_states, self.n_branches
            rows = np.repeat(np.arange(S), B)
            mat = sp.csr_matrix(
                (self.probs[m].ravel(), (rows, self.targets[m].ravel())), shape=(S, S)
            )
            mat.sum_duplicates()
            self._kernels[m] = mat
        return self._kernels[m]

    def forward(self, m, density):
        """Push a (signed) measure over states one step forward."""
        w = density[:, None] * self.probs[m]
        return np.bincount(self.targets[m].ravel(), weights=w.ravel(), minlength=self.n_states)

    def distributions(self):
        """Marginal laws ``pi_m`` of the chain started at ``s0``; shape ``(M+1, S)``."""
        pi = np.zeros((self.M + 1, self.n_states))
        pi[0, self.s0] = 1.0
        for m in range(self.M):
            pi[m + 1] = self.forward(m, pi[m])
        return pi

    def summary(self):
        out = {
            "kind": self.kind, "time_steps": self.M, "dt": self.dt, "nodes": self.n_nodes,
            "bounds": [float(self.nodes[0]), float(self.nodes[-1])], "regimes": self.k,
            "states": self.n_states, "branches": self.n_branches, "monotone": self.monotone,
        }
        if self.report is not None:
            out["consistency"] = self.report.summary()
        return out


def _check_rows(probs):
    if np.any(probs < 0):
        raise ConfigurationError("negative transition probability")
    dev = np.max(np.abs(probs.sum(axis=-1) - 1.0))
    if dev > ROW_TOL:
        raise ConfigurationError(f"transition rows do not sum to one (max deviation {dev:.3e})")


def build_chain(model, time_steps, spatial_bounds, spatial_nodes, span="adaptive", span_fill=2.0 / 3.0):
    """Build the chain on a uniform grid of ``spatial_nodes`` points.

    Parameters
    ----------
    model : ModelSpec
        Must have ``d == 1``.
    time_steps : int
        Number ``M`` of uniform time steps on ``[0, T]``.
    spatial_bounds : (float, float)
        Grid end points; boundary moves are reflected back onto the grid.
    spatial_nodes : int
        Number of grid nodes (at least 2).
    span : {"adaptive", "nearest"}
        ``"nearest"`` is the textbook trinomial stencil and raises when the
        explicit step is infeasible.  ``"adaptive"`` widens the diffusion
        move to ``k_s`` nodes wherever ``a dt / h^2`` is too large, keeping the
        first two local moments exact.
    span_fill : float
        Upper bound on ``a dt / (k_s h)^2`` relative to the probability mass
        left after jumps and switches; keeps the stay branch populated.
    """
    if model.d != 1:
        raise NotImplementedError("only one-dimensional lattices are implemented")
    if span not in ("adaptive", "nearest"):
        raise ConfigurationError(f"unknown span mode '{span}'")
    M = int(time_steps)
    n = int(spatial_nodes)
    if M < 1 or n < 2:
        raise ConfigurationError("need at least one time step and two spatial nodes")
    lo, hi = map(float, spatial_bounds)
    if not hi > lo:
        raise ConfigurationError("spatial bounds must be increasing")

    times = np.linspace(0.0, model.T, M + 1)
    dt = model.T / M
    nodes = np.linspace(lo, hi, n)
    h = nodes[1] - nodes[0]
    k, A = model.k, model.n_atoms
    S, B = n * k, 3 + A + k
    xs = nodes[:, None]

    targets = np.zeros((M, S, B), dtype=np.int64)
    probs = np.zeros((M, S, B))
    disp = np.zeros((M, S, B))
    mean_res = np.zeros((M, S))
    var_res = np.zeros((M, S))
    snap = np.zeros((M, S, A))
    boundary = np.zeros((M, S), dtype=bool)
    spans = np.ones((M, S), dtype=np.int64)
    upwind = np.zeros((M, S), dtype=bool)
    sig = np.zeros((M, S))
    max_dt_nearest = np.inf
    node_idx = np.arange(n)

    for m, t in enumerate(times[:-1]):
        lam = model.switch_rates(t, xs)
        for i in range(k):
            rows = slice(i * n, (i + 1) * n)
            b = model.drift(t, xs, i)[:, 0]
            s = model.dispersion(t, xs, i)[:, 0, 0]
            a = s * s
            mu_c = model.compensated_drift(t, xs, i)[:, 0]
            p_events = np.zeros(n)

            for atom in range(A):
                delta = model.jump_size(t, xs, i, atom)[:, 0]
                pj = model.intensity(t, xs, i, atom) * model.jump_atoms[atom].mass * dt
                raw = (nodes + delta - lo) / h
                tgt = np.rint(raw).astype(np.int64)
                clipped = (tgt < 0) | (tgt > n - 1)
                tgt = np.clip(tgt, 0, n - 1)
                targets[m, rows, 3 + atom] = i * n + tgt
                probs[m, rows, 3 + atom] = pj
                disp[m, rows, 3 + atom] = nodes[tgt] - nodes
                snap[m, rows, atom] = np.abs(nodes[tgt] - nodes - delta)
                boundary[m, rows] |= clipped & (pj > 0)
                p_events += pj

            for j in range(k):
                col = 3 + A + j
                if j == i:
                    targets[m, rows, col] = i * n + node_idx
                    continue
                pj = lam[:, i, j] * dt
                targets[m, rows, col] = j * n + node_idx
                probs[m, rows, col] = pj
                p_events += pj

            if np.any(p_events > 1.0):
                rate = np.max(p_events) / dt
                raise ConfigurationError(
                    f"jump and switch probabilities exceed one; max admissible dt is {1.0 / rate:.6g}"
                )

            rate_nearest = a / h**2 + np.abs(mu_c) / h + p_events / dt
            max_dt_nearest = min(max_dt_nearest, float(1.0 / np.max(rate_nearest)) if np.max(rate_nearest) > 0 else np.inf)

            free = 1.0 - p_events
            if span == "adaptive":
                with np.errstate(divide="ignore", invalid="ignore"):
                    need = np.sqrt(a * dt / (h**2 * span_fill * free))
                kk = np.maximum(1, np.ceil(np.nan_to_num(need, nan=1.0, posinf=1.0) - 1e-12)).astype(np.int64)
            else:
                kk = np.ones(n, dtype=np.int64)
            step = kk * h
            v = a * dt / step**2
            w = mu_c * dt / step
            p_up = 0.5 * (v + w)
            p_dn = 0.5 * (v - w)
            bad = (p_up < 0) | (p_dn < 0)
            p_up = np.where(bad, 0.5 * v + np.maximum(w, 0.0), p_up)
            p_dn = np.where(bad, 0.5 * v + np.maximum(-w, 0.0), p_dn)
            p_stay = free - p_up - p_dn
            if np.any(p_stay < -1e-15):
                worst = int(np.argmin(p_stay))
                raise ConfigurationError(
                    f"negative stencil probability {p_stay[worst]:.3e} at x={nodes[worst]:.6g}, regime {i}; "
                    f"max admissible dt for this stencil is {max_dt_nearest:.6g}"
                )
            p_stay = np.maximum(p_stay, 0.0)

            up = node_idx + kk
            dn = node_idx - kk
            clipped = (up > n - 1) | (dn < 0)
            up = np.clip(up, 0, n - 1)
            dn = np.clip(dn, 0, n - 1)
            targets[m, rows, STAY] = i * n + node_idx
            targets[m, rows, UP] = i * n + up
            targets[m, rows, DOWN] = i * n + dn
            probs[m, rows, STAY] = p_stay
            probs[m, rows, UP] = p_up
            probs[m, rows, DOWN] = p_dn
            disp[m, rows, UP] = nodes[up] - nodes
            disp[m, rows, DOWN] = nodes[dn] - nodes
            boundary[m, rows] |= clipped & (p_up + p_dn > 0)
            spans[m, rows] = kk
            upwind[m, rows] = bad
            sig[m, rows] = s

            pr = probs[m, rows]
            ds = disp[m, rows]
            mean_res[m, rows] = np.abs(np.sum(pr * ds, axis=1) - b * dt) / dt
            dmean = pr[:, UP] * ds[:, UP] + pr[:, DOWN] * ds[:, DOWN]
            dsq = pr[:, UP] * ds[:, UP] ** 2 + pr[:, DOWN] * ds[:, DOWN] ** 2
            var_res[m, rows] = np.abs(dsq - dmean**2 - a * dt) / dt

    _check_rows(probs)

    # centred diffusion increment proxy: displacement / sigma on the two diffusion branches
    c = np.zeros_like(disp)
    # a dispersion this small never moves mass off the stay branch
    live = np.abs(sig) * np.sqrt(dt) > 1e-12 * h
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(live, 1.0 / np.where(live, sig, 1.0), 0.0)
    c[:, :, UP] = disp[:, :, UP] * scale
    c[:, :, DOWN] = disp[:, :, DOWN] * scale
    # centred within the diffusion branches, zero on jump and switch branches,
    # hence orthogonal to the compensated mark indicators
    diff = slice(0, 3)
    p_diff = np.sum(probs[:, :, diff], axis=2, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        centre = np.where(p_diff > 0, np.sum(probs[:, :, diff] * c[:, :, diff], axis=2, keepdims=True) / np.where(p_diff > 0, p_diff, 1.0), 0.0)
    # null branches move like the stay branch, so they share its value
    db = np.where(probs > 0, 0.0, -centre)
    db[:, :, diff] = c[:, :, diff] - centre
    db_var = np.sum(probs * db**2, axis=2)

    report = ConsistencyReport(
        mean_residual=mean_res, variance_residual=var_res, snapping_error=snap,
        boundary_affected=boundary, span=spans, upwind=upwind, max_admissible_dt=max_dt_nearest,
    )
    state_node = np.tile(node_idx, k)
    state_regime = np.repeat(np.arange(k), n)
    s0_node = int(np.clip(np.rint((model.x0[0] - lo) / h), 0, n - 1))
    return ChainApprox(
        model=model, times=times, nodes=nodes, k=k, n_atoms=A,
        targets=targets, probs=probs, disp=disp, db=db, db_var=db_var,
        s0=model.i0 * n + s0_node, state_node=state_node, state_regime=state_regime,
        layer=np.zeros(S, dtype=np.int64), base_state=np.arange(S), report=report,
    )


def _check_values(chain, values):
    values = np.asarray(values, dtype=float)
    if values.shape[0] != chain.n_states:
        raise ValueError(f"values have {values.shape[0]} rows, chain has {chain.n_states} states")
    return values


def conditional_expectation(chain, m, values):
    """``E[values(s_{m+1}) | s_m = s]`` for every state ``s``; exact."""
    values = _check_values(chain, values)
    gathered = values[chain.targets[m]]
    # relative to the stay branch, so constants are reproduced exactly
    stay = gathered[:, STAY]
    rel = gathered - stay[:, None]
    if values.ndim == 1:
        return stay + np.sum(chain.probs[m] * rel, axis=1)
    return stay + np.einsum("sb,sb...->s...", chain.probs[m], rel)


@dataclass
class MartingaleParts:
    """Exact one-step decomposition of ``values(next) - E[values | s]``.

    ``residual`` is the part of the diffusion branches orthogonal to the
    increment proxy; it vanishes for values affine in the displacement and
    is what a trinomial move cannot represent with a single Brownian factor.
    """

    Z: np.ndarray         # (S, 1)
    Vtilde: np.ndarray    # (S, A)
    Wtilde: np.ndarray    # (S, k)
    residual: np.ndarray  # (S, B)
    mean: np.ndarray      # (S,)


def _components(chain, m, values):
    vals = values[chain.targets[m]]
    pr = chain.probs[m]
    mean = conditional_expectation(chain, m, values)
    q = chain.db_var[m]
    # relative to the stay branch: same covariance since E[db] = 0, exact zero for constants
    cov = np.sum(pr * chain.db[m] * (vals - vals[:, STAY:STAY + 1]), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        Z = np.where(q > 0, cov / np.where(q > 0, q, 1.0), 0.0)
    stay = vals[:, STAY]
    Vt = vals[:, chain.jump_slice] - stay[:, None]
    Wt = vals[:, chain.switch_slice] - stay[:, None]
    return mean, Z, Vt, Wt, vals


def elementary_increments(chain, m):
    """Per-branch increments of the chain's elementary martingales.

    Returns ``(db, jumps, switches)`` of shapes ``(S, B)``, ``(S, B, A)`` and
    ``(S, B, k)``: the centred diffusion proxy and the compensated indicators
    of each jump and switch branch.
    """
    S, B = chain.n_states, chain.n_branches
    eye = np.eye(B)
    pr = chain.probs[m]
    jumps = eye[:, chain.jump_slice][None, :, :] - pr[:, None, chain.jump_slice]
    switches = eye[:, chain.switch_slice][None, :, :] - pr[:, None, chain.switch_slice]
    return chain.db[m], np.broadcast_to(jumps, (S, B, chain.n_atoms)), np.broadcast_to(switches, (S, B, chain.k))


def martingale_components(chain, m, values):
    """Read ``(Z, V~, W~)`` off the next-step values at time index ``m``.

    ``Z`` is the regression coefficient of the values on the centred
    diffusion proxy; ``V~`` and ``W~`` are the value jumps across each jump
    or switch branch relative to the stay branch.
    """
    values = _check_values(chain, values)
    mean, Z, Vt, Wt, vals = _components(chain, m, values)
    db, jumps, switches = elementary_increments(chain, m)
    explained = Z[:, None] * db + np.einsum("sba,sa->sb", jumps, Vt) + np.einsum("sbj,sj->sb", switches, Wt)
    residual = vals - mean[:, None] - explained
    return MartingaleParts(Z=Z[:, None], Vtilde=Vt, Wtilde=Wt, residual=residual, mean=mean)


def reconstruct_increments(chain, m, parts):
    """Branchwise ``values(next) - E[values]`` rebuilt from the components."""
    db, jumps, switches = elementary_increments(chain, m)
    return (
        parts.Z[:, 0][:, None] * db
        + np.einsum("sba,sa->sb", jumps, parts.Vtilde)
        + np.einsum("sbj,sj->sb", switches, parts.Wtilde)
        + parts.residual
    )


def augment(chain, stop_mask, mode):
    """Two-layer chain tracking whether a stopping time has occurred.

    ``stop_mask[m, s]`` is the space-time stopping region; the stopping time
    is the first ``m`` with ``stop_mask[m, s_m]`` (and ``stop_mask[M]`` must be
    all true, so that ``tau <= T``).  Layer 0 holds the pre-stopping states,
    layer 1 the post-stopping ones.  A transition from layer 0 lands in
    layer 1 exactly when its target lies in the region at the next step.

    ``mode="activation"``: layer 1 follows the base dynamics (used when an
    upper barrier switches on at ``tau``).  ``mode="absorbing"``: layer 1
    states never move (the solution is frozen after ``tau``).
    """
    if mode not in ("activation", "absorbing"):
        raise ValueError(f"unknown augmentation mode '{mode}'")
    if chain.kind != "base":
        raise ValueError("only base chains can be augmented")
    mask = np.asarray(stop_mask, dtype=bool)
    M, S, B = chain.targets.shape
    if mask.shape != (M + 1, S):
        raise ValueError(f"stop mask must have shape {(M + 1, S)}")
    if not mask[M].all():
        raise ConfigurationError("stopping region must contain every state at the horizon")

    targets = np.empty((M, 2 * S, B), dtype=np.int64)
    probs = np.empty((M, 2 * S, B))
    disp = np.empty((M, 2 * S, B))
    db = np.empty((M, 2 * S, B))
    db_var = np.empty((M, 2 * S))
    self_idx = np.arange(S)
    for m in range(M):
        base_t = chain.targets[m]
        lands = mask[m + 1][base_t]
        if mode == "activation":
            pre_t = base_t + S * (lands | mask[m][:, None])
            post = (base_t + S, chain.probs[m], chain.disp[m], chain.db[m], chain.db_var[m])
        else:
            pre_t = base_t + S * lands
            stay_p = np.zeros((S, B))
            stay_p[:, STAY] = 1.0
            post = (np.repeat((self_idx + S)[:, None], B, axis=1), stay_p, np.zeros((S, B)), np.zeros((S, B)), np.zeros(S))
            frozen = mask[m]
            pre_t = np.where(frozen[:, None], post[0], pre_t)
        targets[m, :S], targets[m, S:] = pre_t, post[0]
        if mode == "absorbing":
            probs[m, :S] = np.where(frozen[:, None], stay_p, chain.probs[m])
            disp[m, :S] = np.where(frozen[:, None], 0.0, chain.disp[m])
            db[m, :S] = np.where(frozen[:, None], 0.0, chain.db[m])
            db_var[m, :S] = np.where(frozen, 0.0, chain.db_var[m])
        else:
            probs[m, :S], disp[m, :S], db[m, :S], db_var[m, :S] = chain.probs[m], chain.disp[m], chain.db[m], chain.db_var[m]
        probs[m, S:], disp[m, S:], db[m, S:], db_var[m, S:] = post[1], post[2], post[3], post[4]

    s0 = chain.s0 + S * int(mask[0, chain.s0])
    return ChainApprox(
        model=chain.model, times=chain.times, nodes=chain.nodes, k=chain.k, n_atoms=chain.n_atoms,
        targets=targets, probs=probs, disp=disp, db=db, db_var=db_var, s0=s0,
        state_node=np.tile(chain.state_node, 2), state_regime=np.tile(chain.state_regime, 2),
        layer=np.repeat([0, 1], S), base_state=np.tile(np.arange(S), 2),
        report=chain.report, kind=mode, stop_mask=mask,
    )


def sample_chain_paths(chain, n_paths, seed):
    """Draw state paths of the chain itself; returns ``(states, branches)``.

    ``states`` has shape ``(n_paths, M+1)``, ``branches`` ``(n_paths, M)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6368]))
    states = np.empty((n_paths, chain.M + 1), dtype=np.int64)
    branches = np.empty((n_paths, chain.M), dtype=np.int64)
    states[:, 0] = chain.s0
    for m in range(chain.M):
        cum = np.cumsum(chain.probs[m][states[:, m]], axis=1)
        u = rng.random(n_paths) * cum[:, -1]
        b = np.minimum(np.sum(cum <= u[:, None], axis=1), chain.n_branches - 1)
        branches[:, m] = b
        states[:, m + 1] = chain.targets[m][states[:, m], b]
    return states, branches


def generator_residual(chain, phi_values, generator_values):
    """``|(E[phi_{m+1}] - phi_m) / dt - G phi|`` per node; shapes ``(M+1, S)`` in, ``(M, S)`` out."""
    M = chain.M
    out = np.empty((M, chain.n_states))
    for m in range(M):
        out[m] = np.abs((conditional_expectation(chain, m, phi_values[m + 1]) - phi_values[m]) / chain.dt - generator_values[m])
    return out
