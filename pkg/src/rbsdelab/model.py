"""Regime-switching jump-diffusion: coefficients, mark space and generator.

Every coefficient callable is vectorised over the spatial argument: ``x`` is
an array of shape ``(n, d)`` and the regime ``i`` is a plain integer in
``range(k)``.  Expected return shapes are

========== ======================= ==============
callable   signature               returns
========== ======================= ==============
b          ``b(t, x, i)``          ``(n, d)``
sigma      ``sigma(t, x, i)``      ``(n, d, d)``
delta      ``delta(t, x, i, y)``   ``(n, d)``
f          ``f(t, x, i, y)``       ``(n,)``
lam        ``lam(t, x)``           ``(n, k, k)``
========== ======================= ==============

Anything broadcastable to those shapes is accepted.  Regimes are numbered
from 0 throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ModelError, ModelEvaluationError

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class JumpAtom:
    """One atom ``mass * Dirac(y)`` of the finite jump measure ``m(dy)``."""

    y: np.ndarray
    mass: float

    def __post_init__(self):
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        object.__setattr__(self, "mass", float(self.mass))


def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, d) if d > 1 or x.size != 1 else x.reshape(1, d)
    if x.shape[-1] != d:
        raise ModelError(f"points must have trailing dimension d={d}, got shape {x.shape}")
    return x


def _checked(name, value, shape):
    try:
        out = np.broadcast_to(np.asarray(value, dtype=float), shape)
    except ValueError as exc:
        raise ModelEvaluationError(name, f"cannot broadcast result to {shape}") from exc
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(name, "non-finite value")
    return out


def _zero_intensity(t, x, i, y):
    return 0.0


def _identity_jump(t, x, i, y):
    return np.broadcast_to(y, x.shape)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Coefficients of a regime-switching jump-diffusion on ``R^d x {0..k-1}``.

    ``f_max`` and ``lambda_max`` are the declared bounds used for thinning; they
    are checked by sampling in :meth:`validate`, never trusted blindly.
    """

    d: int
    k: int
    b: Callable
    sigma: Callable
    T: float
    lam: Optional[Callable] = None
    jump_atoms: tuple = ()
    delta: Callable = _identity_jump
    f: Callable = _zero_intensity
    f_max: float = 0.0
    lambda_max: float = 0.0
    x0: np.ndarray = field(default_factory=lambda: np.zeros(1))
    i0: int = 0
    config: Optional[dict] = None

    def __post_init__(self):
        if self.d < 1 or self.k < 1:
            raise ModelError("need d >= 1 and k >= 1")
        if not self.T > 0:
            raise ModelError("time horizon T must be positive")
        atoms = tuple(a if isinstance(a, JumpAtom) else JumpAtom(*a) for a in self.jump_atoms)
        for a in atoms:
            if not a.mass > 0 or not np.isfinite(a.mass):
                raise ModelError("jump atom masses must be finite and strictly positive")
            if a.y.shape != (self.d,):
                raise ModelError(f"jump atom location must have shape ({self.d},)")
        object.__setattr__(self, "jump_atoms", atoms)
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.size == 1 and self.d > 1:
            x0 = np.full(self.d, x0[0])
        if x0.shape != (self.d,):
            raise ModelError("x0 must have shape (d,)")
        object.__setattr__(self, "x0", x0)
        if not 0 <= self.i0 < self.k:
            raise ModelError("initial regime out of range")
        if self.f_max < 0 or self.lambda_max < 0:
            raise ModelError("declared intensity bounds must be nonnegative")

    @property
    def n_atoms(self):
        return len(self.jump_atoms)

    @property
    def total_mass(self):
        return float(sum(a.mass for a in self.jump_atoms))

    @property
    def masses(self):
        return np.array([a.mass for a in self.jump_atoms], dtype=float)

    # vectorised coefficient access ---------------------------------------

    def drift(self, t, x, i):
        x = _as_points(x, self.d)
        return _checked("b", self.b(t, x, i), (x.shape[0], self.d))

    def dispersion(self, t, x, i):
        x = _as_points(x, self.d)
        return _checked("sigma", self.sigma(t, x, i), (x.shape[0], self.d, self.d))

    def covariance(self, t, x, i):
        s = self.dispersion(t, x, i)
        return np.einsum("nlr,nqr->nlq", s, s)

    def jump_size(self, t, x, i, atom):
        x = _as_points(x, self.d)
        y = self.jump_atoms[atom].y
        return _checked("delta", self.delta(t, x, i, y), (x.shape[0], self.d))

    def intensity(self, t, x, i, atom):
        x = _as_points(x, self.d)
        y = self.jump_atoms[atom].y
        return _checked("f", self.f(t, x, i, y), (x.shape[0],))

    def switch_rates(self, t, x):
        """Intensity matrices ``lambda(t, x)``, shape ``(n, k, k)``."""
        x = _as_points(x, self.d)
        n = x.shape[0]
        if self.lam is None:
            return np.zeros((n, self.k, self.k))
        return _checked("lambda", self.lam(t, x), (n, self.k, self.k))

    def compensated_drift(self, t, x, i):
        """``b - sum_atoms delta * f * mass``: the drift of the raw-jump form."""
        out = self.drift(t, x, i).copy()
        for a, atom in enumerate(self.jump_atoms):
            out -= self.jump_size(t, x, i, a) * (self.intensity(t, x, i, a) * atom.mass)[:, None]
        return out

    # invariants ----------------------------------------------------------

    def validate(self, times=None, points=None):
        """Check the model invariants on sampled ``(t, x, i)``.

        Defaults to ``{0, T/2, T}`` times and a small cloud around ``x0``.
        Raises :class:`ModelError` on the first violation.
        """
        if times is None:
            times = (0.0, 0.5 * self.T, self.T)
        if points is None:
            scale = np.maximum(np.abs(self.x0), 1.0)
            offsets = np.linspace(-1.0, 1.0, 9)[:, None] * scale[None, :]
            points = self.x0[None, :] + offsets
        points = _as_points(points, self.d)
        for t in times:
            lam = self.switch_rates(t, points)
            off = lam.copy()
            idx = np.arange(self.k)
            off[:, idx, idx] = 0.0
            if np.any(off < 0):
                raise ModelError("off-diagonal regime intensities must be nonnegative")
            if np.any(off > self.lambda_max * (1 + 1e-12) + 1e-300):
                raise ModelError(f"regime intensity exceeds declared bound lambda_max={self.lambda_max}")
            if np.any(np.abs(lam.sum(axis=2)) > ROW_SUM_TOL * np.maximum(1.0, off.sum(axis=2))):
                raise ModelError("each row of lambda must sum to zero")
            for i in range(self.k):
                a = self.covariance(t, points, i)
                sym = np.max(np.abs(a - np.swapaxes(a, 1, 2)), initial=0.0)
                if sym > 1e-12 * max(1.0, np.max(np.abs(a))):
                    raise ModelError("covariance sigma sigma^T is not symmetric")
                if np.min(np.linalg.eigvalsh(a)) < -1e-12 * max(1.0, np.max(np.abs(a))):
                    raise ModelError("covariance sigma sigma^T is not positive semidefinite")
                for atom in range(self.n_atoms):
                    fv = self.intensity(t, points, i, atom)
                    if np.any(fv < 0):
                        raise ModelError("jump intensity f must be nonnegative")
                    if np.any(fv > self.f_max * (1 + 1e-12) + 1e-300):
                        raise ModelError(f"jump intensity exceeds declared bound f_max={self.f_max}")
        return True


def zeta_bound(model):
    """Uniform bound ``max(F_max, Lambda_max)`` on the mark intensity."""
    return max(model.f_max, model.lambda_max)


# ---------------------------------------------------------------------------
# mark space


@dataclass(frozen=True)
class Mark:
    """A point of ``E``: either a jump atom ``(y, 0)`` or a regime ``(0_d, j)``."""

    kind: str
    index: int
    y: np.ndarray


class MarkSpace:
    """Disjoint union of the jump atoms and the ``k`` regime marks."""

    def __init__(self, model):
        self.model = model
        zero = np.zeros(model.d)
        jumps = [Mark("jump", a, atom.y) for a, atom in enumerate(model.jump_atoms)]
        regimes = [Mark("regime", j, zero) for j in range(model.k)]
        self.marks = tuple(jumps + regimes)

    def __len__(self):
        return len(self.marks)

    def rho(self, mark):
        if mark.kind == "jump":
            return self.model.jump_atoms[mark.index].mass
        return 1.0

    def zeta(self, t, x, i, mark):
        """Mark intensity at ``(t, x, i)``; shape ``(n,)``."""
        if mark.kind == "jump":
            return self.model.intensity(t, x, i, mark.index)
        lam = self.model.switch_rates(t, x)[:, i, mark.index]
        return lam if mark.index != i else np.zeros_like(lam)

    def intensity_table(self, t, x, i):
        """``zeta * rho`` for every mark, shape ``(n, len(marks))``."""
        return np.stack([self.zeta(t, x, i, m) * self.rho(m) for m in self.marks], axis=1)

    def compensator(self, t, x, i, atoms, regime, duration):
        """Compensator of ``A (+) {regime}`` accrued over ``duration`` at a frozen state.

        ``atoms`` is an iterable of atom indices making up ``A``; ``regime``
        may be ``None`` for a pure jump set.
        """
        x = _as_points(x, self.model.d)
        out = np.zeros(x.shape[0])
        for a in atoms:
            out += self.model.intensity(t, x, i, a) * self.model.jump_atoms[a].mass
        if regime is not None and regime != i:
            out += self.model.switch_rates(t, x)[:, i, regime]
        return out * duration


def build_mark_space(model):
    model.validate()
    return MarkSpace(model)


# ---------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class SmoothFunction:
    """A system ``u(t, x, i)`` together with its partial derivatives.

    All callables take ``(t, x, i)`` with ``x`` of shape ``(n, d)`` and return
    ``(n,)``, ``(n,)``, ``(n, d)`` and ``(n, d, d)`` respectively.
    """

    value: Callable
    dt: Callable
    grad: Callable
    hess: Callable

    @classmethod
    def constant(cls, c):
        return cls(
            value=lambda t, x, i: np.full(len(x), float(c)),
            dt=lambda t, x, i: np.zeros(len(x)),
            grad=lambda t, x, i: np.zeros(x.shape),
            hess=lambda t, x, i: np.zeros(x.shape + x.shape[-1:]),
        )

    @classmethod
    def coordinate(cls, l=0):
        """``u(t, x, i) = x_l``."""

        def grad(t, x, i):
            g = np.zeros(x.shape)
            g[:, l] = 1.0
            return g

        return cls(
            value=lambda t, x, i: x[:, l].copy(),
            dt=lambda t, x, i: np.zeros(len(x)),
            grad=grad,
            hess=lambda t, x, i: np.zeros(x.shape + x.shape[-1:]),
        )

    @classmethod
    def coordinate_squared(cls, l=0, offsets=None):
        """``u(t, x, i) = x_l**2 + offsets[i]``."""
        offsets = None if offsets is None else np.asarray(offsets, dtype=float)

        def value(t, x, i):
            v = x[:, l] ** 2
            return v + offsets[i] if offsets is not None else v

        def grad(t, x, i):
            g = np.zeros(x.shape)
            g[:, l] = 2.0 * x[:, l]
            return g

        def hess(t, x, i):
            h = np.zeros(x.shape + x.shape[-1:])
            h[:, l, l] = 2.0
            return h

        return cls(value=value, dt=lambda t, x, i: np.zeros(len(x)), grad=grad, hess=hess)

    def __add__(self, other):
        return self.combine(1.0, other, 1.0)

    def combine(self, alpha, other, beta):
        """``alpha * self + beta * other``."""
        return SmoothFunction(
            value=lambda t, x, i: alpha * self.value(t, x, i) + beta * other.value(t, x, i),
            dt=lambda t, x, i: alpha * self.dt(t, x, i) + beta * other.dt(t, x, i),
            grad=lambda t, x, i: alpha * self.grad(t, x, i) + beta * other.grad(t, x, i),
            hess=lambda t, x, i: alpha * self.hess(t, x, i) + beta * other.hess(t, x, i),
        )


def apply_generator(model, u, t, x, i):
    """Apply the generator of ``(X, N)`` to ``u`` at ``(t, x, i)``.

    The jump integral is the finite sum over ``model.jump_atoms``.  Returns a
    float for a single point (``x`` of shape ``(d,)``) and an ``(n,)`` array
    otherwise.
    """
    single = np.ndim(x) <= 1
    x = _as_points(x, model.d)
    n = x.shape[0]
    val = _checked("u", u.value(t, x, i), (n,))
    out = _checked("u.dt", u.dt(t, x, i), (n,)).copy()
    grad = _checked("u.grad", u.grad(t, x, i), (n, model.d))
    hess = _checked("u.hess", u.hess(t, x, i), (n, model.d, model.d))

    a = model.covariance(t, x, i)
    out += 0.5 * np.einsum("nlq,nlq->n", a, hess)
    out += np.einsum("nl,nl->n", model.compensated_drift(t, x, i), grad)
    for atom_idx, atom in enumerate(model.jump_atoms):
        shifted = x + model.jump_size(t, x, i, atom_idx)
        jump_val = _checked("u", u.value(t, shifted, i), (n,))
        out += (jump_val - val) * model.intensity(t, x, i, atom_idx) * atom.mass
    if model.k > 1:
        lam = model.switch_rates(t, x)
        for j in range(model.k):
            if j == i:
                continue
            out += lam[:, i, j] * (_checked("u", u.value(t, x, j), (n,)) - val)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# built-in parametric family


def _per_regime(value, k, shape, name):
    arr = np.asarray(value, dtype=float)
    size = int(np.prod(shape)) if shape else 1
    if arr.ndim == 0:
        return np.broadcast_to(arr, (k,) + shape).copy()
    if arr.size == k * size:
        return arr.reshape((k,) + shape)
    if arr.size == size:
        return np.broadcast_to(arr.reshape(shape), (k,) + shape).copy()
    raise ModelError(f"'{name}' has {arr.size} entries, expected {size} or {k * size}")


def parametric_model(d, k, T, x0, i0=0, drift=None, dispersion=None, jumps=(), regime_rates=None):
    """Affine drift, affine dispersion, constant jump sizes and intensities.

    ``b_i(x) = drift.const[i] + drift.linear[i] @ x`` and
    ``sigma_i(x)[l, q] = dispersion.const[i, l, q] + sum_c dispersion.linear[i, l, q, c] x_c``.
    Each jump is ``{"y": [...], "mass": m, "intensity": per-regime f}`` with
    ``delta = y``.  ``regime_rates`` holds the off-diagonal intensities.
    """
    drift = dict(drift or {})
    dispersion = dict(dispersion or {})
    b0 = _per_regime(drift.get("const", 0.0), k, (d,), "drift.const")
    b1 = _per_regime(drift.get("linear", 0.0), k, (d, d), "drift.linear")
    s0 = _per_regime(dispersion.get("const", 0.0), k, (d, d), "dispersion.const")
    s1 = _per_regime(dispersion.get("linear", 0.0), k, (d, d, d), "dispersion.linear")

    atoms = []
    intensities = []
    for spec in jumps:
        atoms.append(JumpAtom(np.asarray(spec["y"], dtype=float).reshape(d), float(spec.get("mass", 1.0))))
        fi = _per_regime(spec.get("intensity", 0.0), k, (), "jumps.intensity")
        if np.any(fi < 0):
            raise ModelError("jump intensities must be nonnegative")
        intensities.append(fi)
    f_table = np.array(intensities).reshape(len(atoms), k)

    rates = np.zeros((k, k)) if regime_rates is None else np.asarray(regime_rates, dtype=float).reshape(k, k).copy()
    np.fill_diagonal(rates, 0.0)
    if np.any(rates < 0):
        raise ModelError("regime_rates must be nonnegative off the diagonal")
    np.fill_diagonal(rates, -rates.sum(axis=1))
    lam_max = float(np.max(rates - np.diag(np.diag(rates)), initial=0.0))
    atom_index = {tuple(a.y): idx for idx, a in enumerate(atoms)}

    def b(t, x, i):
        return b0[i] + x @ b1[i].T

    def sigma(t, x, i):
        return s0[i] + np.einsum("lqc,nc->nlq", s1[i], x)

    def f(t, x, i, y):
        return f_table[atom_index[tuple(y)], i]

    def lam(t, x):
        return rates

    config = {
        "d": d, "k": k, "T": T, "x0": np.asarray(x0, dtype=float).reshape(-1).tolist(), "i0": i0,
        "drift": {"const": b0.tolist(), "linear": b1.tolist()},
        "dispersion": {"const": s0.tolist(), "linear": s1.tolist()},
        "jumps": [{"y": a.y.tolist(), "mass": a.mass, "intensity": f_table[n].tolist()} for n, a in enumerate(atoms)],
        "regime_rates": rates.tolist(),
    }
    return ModelSpec(
        d=d, k=k, b=b, sigma=sigma, T=float(T), lam=lam, jump_atoms=tuple(atoms), f=f,
        f_max=float(np.max(f_table, initial=0.0)), lambda_max=lam_max, x0=x0, i0=i0, config=config,
    )


MODEL_KEYS = {"d", "k", "T", "x0", "i0", "drift", "dispersion", "jumps", "regime_rates"}


def model_from_config(cfg):
    """Build a :func:`parametric_model` from a JSON-compatible mapping."""
    unknown = set(cfg) - MODEL_KEYS
    if unknown:
        raise ModelError(f"unknown model keys: {sorted(unknown)}")
    for key in ("d", "k", "T", "x0"):
        if key not in cfg:
            raise ModelError(f"model block is missing '{key}'")
    model = parametric_model(
        d=int(cfg["d"]), k=int(cfg["k"]), T=float(cfg["T"]), x0=cfg["x0"], i0=int(cfg.get("i0", 0)),
        drift=cfg.get("drift"), dispersion=cfg.get("dispersion"), jumps=cfg.get("jumps", ()),
        regime_rates=cfg.get("regime_rates"),
    )
    model.validate()
    return model


def acceptance_model():
    """Reference model of the acceptance suite.

    ``d=1, k=2``, ``b=(0.03x, 0.01x)``, ``sigma=(0.2x, 0.3x)``, jump atoms at
    ``+-1`` with unit mass and intensity 0.1, switching rates 0.5 both ways,
    ``x0=100``, ``T=1``.
    """
    return parametric_model(
        d=1, k=2, T=1.0, x0=[100.0], i0=0,
        drift={"linear": [0.03, 0.01]},
        dispersion={"linear": [0.2, 0.3]},
        jumps=[{"y": [1.0], "mass": 1.0, "intensity": 0.1}, {"y": [-1.0], "mass": 1.0, "intensity": 0.1}],
        regime_rates=[[0.0, 0.5], [0.5, 0.0]],
    )


def model_summary(model: ModelSpec) -> dict:
    return {
        "d": model.d, "k": model.k, "T": model.T, "n_atoms": model.n_atoms,
        "f_max": model.f_max, "lambda_max": model.lambda_max,
        "x0": model.x0.tolist(), "i0": model.i0,
    }


__all__ = [
    "JumpAtom", "ModelSpec", "Mark", "MarkSpace", "SmoothFunction",
    "apply_generator", "build_mark_space", "parametric_model", "model_from_config",
    "acceptance_model", "zeta_bound", "model_summary",
]
