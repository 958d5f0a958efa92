"""Synchronous versus one-step-delayed optimizers on synthetic smooth objectives.

Every optimizer follows ``theta <- theta - eta * P_t m_t``:

* SGD: ``m_t = g_t``, ``P_t = I``;
* Momentum: ``m_t = beta1 m_{t-1} + (1 - beta1) g_t``, ``P_t = I``;
* AdamType: the same ``m_t``, ``v_t = beta2 v_{t-1} + (1 - beta2) g_t**2`` and
  ``P_t = diag(clip(1 / (sqrt(v_t) + eps), c_min, c_max))``.

A delayed run evaluates the gradient at ``theta_{t - tau(t)}`` and feeds it
into the same recursions. Paired runs share noise draw ``t`` at step ``t``.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np


class DivergenceError(RuntimeError):
    pass


class PreconditionError(ValueError):
    pass


# objectives ------------------------------------------------------------------

@dataclass(frozen=True)
class Objective:
    """Smooth objective with known smoothness constant and lower bound."""

    kind: str
    dimension: int
    smoothness: float
    lower_bound: float
    matrix: Optional[np.ndarray] = None

    @classmethod
    def quadratic(cls, dimension: int = 10, eigen_range: Tuple[float, float] = (0.1, 1.0),
                  seed: int = 0) -> "Objective":
        """F = 0.5 theta^T A theta with A's spectrum spread over ``eigen_range``."""
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dimension, dimension)))
        lo, hi = eigen_range
        eig = np.linspace(lo, hi, dimension) if dimension > 1 else np.array([hi])
        a = (q * eig) @ q.T
        a = 0.5 * (a + a.T)
        return cls("quadratic", dimension, float(hi), 0.0, a)

    @classmethod
    def scalar_quadratic(cls) -> "Objective":
        """F = 0.5 theta^2 in one dimension."""
        return cls("quadratic", 1, 1.0, 0.0, np.eye(1))

    @classmethod
    def smooth_nonconvex(cls, dimension: int = 10) -> "Objective":
        """F = sum(log cosh theta) + 0.05 ||theta||^2; gradient tanh + 0.1 theta, L = 1.1."""
        return cls("smooth_nonconvex", dimension, 1.1, 0.0, None)

    def value(self, theta: np.ndarray) -> float:
        if self.kind == "quadratic":
            return float(0.5 * theta @ (self.matrix.astype(theta.dtype) @ theta))
        # log cosh x = |x| + log1p(exp(-2|x|)) - log 2, stable for large |x|
        ax = np.abs(theta)
        return float(np.sum(ax + np.log1p(np.exp(-2 * ax)) - math.log(2)) + 0.05 * theta @ theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        if self.kind == "quadratic":
            return self.matrix.astype(theta.dtype) @ theta
        return np.tanh(theta) + theta.dtype.type(0.1) * theta

    def evaluate(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        return self.value(theta), self.grad(theta)


def check_smoothness(obj: Objective, samples: int = 2000, seed: int = 0, scale: float = 5.0) -> float:
    """Largest observed ||grad(x) - grad(y)|| / ||x - y|| over random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        x = rng.normal(0, scale, obj.dimension)
        y = x + rng.normal(0, rng.choice([1e-3, 1e-1, 1.0, scale]), obj.dimension)
        num = np.linalg.norm(obj.grad(x) - obj.grad(y))
        den = np.linalg.norm(x - y)
        if den > 0:
            worst = max(worst, float(num / den))
    return worst


# noise -------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean Gaussian gradient noise with E||xi||^2 = variance.

    Each coordinate has variance ``variance / dimension``.
    """

    variance: float
    seed: int = 0

    def draws(self, steps: int, dimension: int) -> np.ndarray:
        if self.variance == 0:
            return np.zeros((steps, dimension))
        rng = np.random.default_rng(self.seed)
        return rng.standard_normal((steps, dimension)) * math.sqrt(self.variance / dimension)


# optimizer -----------------------------------------------------------------------

class OptKind(str, enum.Enum):
    SGD = "SGD"
    MOMENTUM = "Momentum"
    ADAM = "AdamType"


@dataclass(frozen=True)
class OptimizerSpec:
    kind: OptKind
    eta: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    c_min: float = 0.1
    c_max: float = 10.0
    grad_clip: Optional[float] = None  # optional bound G on the stochastic gradient norm

    def with_eta(self, eta: float) -> "OptimizerSpec":
        return OptimizerSpec(self.kind, eta, self.beta1, self.beta2, self.eps, self.c_min, self.c_max,
                             self.grad_clip)


class _State:
    """Momentum and preconditioner recursions for one run."""

    def __init__(self, spec: OptimizerSpec, dimension: int, dtype):
        self.spec = spec
        self.dtype = dtype
        self.m = np.zeros(dimension, dtype=dtype)
        self.v = np.zeros(dimension, dtype=dtype)

    def direction(self, g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return (P_t diagonal, m_t) after absorbing gradient g."""
        s = self.spec
        t = self.dtype.type if hasattr(self.dtype, "type") else np.dtype(self.dtype).type
        if s.grad_clip is not None:
            norm = np.linalg.norm(g)
            if norm > s.grad_clip:
                g = g * t(s.grad_clip / float(norm))
        if s.kind is OptKind.SGD:
            return np.ones_like(g), g
        b1 = t(s.beta1)
        self.m = b1 * self.m + (t(1) - b1) * g
        if s.kind is OptKind.MOMENTUM:
            return np.ones_like(g), self.m
        b2 = t(s.beta2)
        self.v = b2 * self.v + (t(1) - b2) * g * g
        p = t(1) / (np.sqrt(self.v) + t(s.eps))
        p = np.clip(p, t(s.c_min), t(s.c_max))
        return p, self.m


@dataclass
class OptRunTrace:
    iterates: np.ndarray  # (T + 1, p)
    values: np.ndarray  # F(theta_t)
    grad_norm_sq: np.ndarray  # ||grad F(theta_t)||^2
    preconditioners: Optional[np.ndarray] = None  # (T, p) diagonal of P_t
    discrepancy: Optional[np.ndarray] = None  # (T + 1, p)

    @property
    def discrepancy_norms(self) -> Optional[np.ndarray]:
        if self.discrepancy is None:
            return None
        return np.linalg.norm(self.discrepancy.astype(np.float64), axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "F", "grad_norm_sq", "discrepancy_norm"])
        dn = self.discrepancy_norms
        for t in range(len(self.values)):
            w.writerow([t, repr(float(self.values[t])), repr(float(self.grad_norm_sq[t])),
                        "" if dn is None else repr(float(dn[t]))])
        return buf.getvalue()


DelaySchedule = Union[Callable[[int], int], Sequence[int], None]


def default_delay(t: int) -> int:
    return 0 if t == 0 else 1


def _delay_fn(schedule: DelaySchedule) -> Callable[[int], int]:
    if schedule is None:
        return default_delay
    if callable(schedule):
        return schedule
    seq = list(schedule)
    return lambda t: seq[t]


def _run(obj: Objective, noise: NoiseModel, opt: OptimizerSpec, theta0, steps: int,
         delay: Callable[[int], int], dtype=np.float64, draws: Optional[np.ndarray] = None) -> OptRunTrace:
    if opt.eta <= 0:
        raise PreconditionError("step size must be positive")
    p = obj.dimension
    theta = np.array(theta0, dtype=dtype).reshape(p)
    limit = 1e6 * float(np.linalg.norm(theta.astype(np.float64))) + 1e6
    xi = noise.draws(steps, p) if draws is None else draws
    xi = xi.astype(dtype)
    eta = np.dtype(dtype).type(opt.eta)
    state = _State(opt, p, np.dtype(dtype))
    iterates = np.empty((steps + 1, p), dtype=dtype)
    iterates[0] = theta
    precs = np.empty((steps, p), dtype=dtype) if opt.kind is OptKind.ADAM else None
    for t in range(steps):
        tau = delay(t)
        if tau not in (0, 1) or tau > t:
            raise PreconditionError(f"delay at step {t} must be 0 or 1 and not reach before theta_0")
        g = obj.grad(iterates[t - tau]) + xi[t]
        pdiag, m = state.direction(g)
        if precs is not None:
            precs[t] = pdiag
        theta = iterates[t] - eta * pdiag * m
        if not np.all(np.isfinite(theta)) or float(np.linalg.norm(theta.astype(np.float64))) > limit:
            raise DivergenceError(f"iterate norm exceeded {limit:.3g} at step {t + 1}")
        iterates[t + 1] = theta
    values = np.array([obj.value(th.astype(np.float64)) for th in iterates])
    gn = np.array([float(np.sum(obj.grad(th.astype(np.float64)) ** 2)) for th in iterates])
    return OptRunTrace(iterates=iterates, values=values, grad_norm_sq=gn, preconditioners=precs)


def run_sync(obj: Objective, noise: NoiseModel, opt: OptimizerSpec, theta0, T: int,
             dtype=np.float64) -> OptRunTrace:
    """T synchronous steps; returns iterates theta_0 .. theta_T."""
    return _run(obj, noise, opt, theta0, T, lambda t: 0, dtype)


def run_delayed(obj: Objective, noise: NoiseModel, opt: OptimizerSpec, theta0, T: int,
                delay_schedule: DelaySchedule = None, dtype=np.float64,
                sync: Optional[OptRunTrace] = None) -> OptRunTrace:
    """T steps with gradients evaluated at theta_{t - tau(t)}; tau defaults to 1 for t >= 1.

    When ``sync`` is given (a run with the same noise), the discrepancy series
    is attached to the returned trace.
    """
    delay = _delay_fn(delay_schedule)
    if T > 0 and delay(0) != 0:
        raise PreconditionError("delay_schedule(0) must be 0")
    trace = _run(obj, noise, opt, theta0, T, delay, dtype)
    if sync is not None:
        trace.discrepancy = trace.iterates - sync.iterates.astype(trace.iterates.dtype)
    return trace


def run_paired(obj: Objective, noise: NoiseModel, opt: OptimizerSpec, theta0, T: int,
               delay_schedule: DelaySchedule = None, dtype=np.float64) -> Tuple[OptRunTrace, OptRunTrace]:
    sync = run_sync(obj, noise, opt, theta0, T, dtype)
    delayed = run_delayed(obj, noise, opt, theta0, T, delay_schedule, dtype, sync=sync)
    return sync, delayed


# discrepancy scaling ------------------------------------------------------------

@dataclass
class ScalingFit:
    slope: Optional[float]
    residual: Optional[float]
    etas: List[float]
    mean_max_discrepancy: List[float]
    excluded: List[Tuple[float, int]] = field(default_factory=list)
    exact_zero: bool = False

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "residual": self.residual,
            "etas": self.etas,
            "mean_max_discrepancy": self.mean_max_discrepancy,
            "excluded": [list(e) for e in self.excluded],
            "exact_zero": self.exact_zero,
        }


def fit_loglog(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Least-squares slope of log y against log x and the RMS residual (natural log)."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    return float(slope), float(np.sqrt(np.mean(resid ** 2)))


def discrepancy_scaling(obj: Objective, opt: OptimizerSpec, etas: Sequence[float], T: int,
                        seeds: Sequence[int], noise_variance: float = 1.0, theta0=None,
                        delay_schedule: DelaySchedule = None, dtype=np.float64) -> ScalingFit:
    """Fit the exponent k in mean_seeds max_t ||Delta_t|| ~ eta^k."""
    etas = list(etas)
    if len(etas) < 3 or max(etas) / min(etas) < 4:
        raise PreconditionError("need at least 3 step sizes spanning a 4x range")
    if any(e * obj.smoothness > 1 for e in etas):
        raise PreconditionError("every step size must satisfy eta * L <= 1")
    if len(seeds) < 10:
        raise PreconditionError("need at least 10 seeds")
    if theta0 is None:
        theta0 = default_theta0(obj.dimension)
    means, excluded = [], []
    for eta in etas:
        vals = []
        for seed in seeds:
            try:
                _, delayed = run_paired(obj, NoiseModel(noise_variance, seed), opt.with_eta(eta),
                                        theta0, T, delay_schedule, dtype)
            except DivergenceError:
                excluded.append((eta, seed))
                continue
            vals.append(float(np.max(delayed.discrepancy_norms)))
        means.append(float(np.mean(vals)) if vals else float("nan"))
    if all(m == 0 for m in means):
        return ScalingFit(None, None, etas, means, excluded, exact_zero=True)
    usable = [(e, m) for e, m in zip(etas, means) if m > 0 and math.isfinite(m)]
    slope, resid = fit_loglog([e for e, _ in usable], [m for _, m in usable])
    return ScalingFit(slope, resid, etas, means, excluded)


# AdamType settings for the scaling harness. A short second-moment memory keeps
# the preconditioner on the same time scale as the iterates, and eps = 1 bounds
# P by 1 from above, so the clamp [0.1, 1] is enforced without saturating.
SCALING_ADAM = OptimizerSpec(OptKind.ADAM, 0.1, beta1=0.5, beta2=0.9, eps=1.0, c_min=0.1, c_max=1.0)
SCALING_ETAS = (0.2, 0.1, 0.05, 0.025)


def default_theta0(dimension: int) -> np.ndarray:
    """A start well away from the optimum so the drift dominates the noise."""
    return np.full(dimension, 10.0 / math.sqrt(dimension))


# convergence bound ----------------------------------------------------------------

@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    passed: bool
    constant: float
    terms: Dict[str, float]

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "passed": self.passed, "constant": self.constant,
                "terms": self.terms}


def _lead_terms(obj: Objective, noise_variance: float, theta0, eta: float, T: int) -> Tuple[float, float]:
    f0 = obj.value(np.asarray(theta0, float))
    return 2 * (f0 - obj.lower_bound) / (eta * T), eta * obj.smoothness * noise_variance


def _mean_grad_norm(obj, noise_variance, opt, theta0, T, seeds, delayed: bool) -> float:
    vals = []
    for seed in seeds:
        noise = NoiseModel(noise_variance, seed)
        tr = run_delayed(obj, noise, opt, theta0, T) if delayed else run_sync(obj, noise, opt, theta0, T)
        vals.append(float(np.mean(tr.grad_norm_sq[:T])))
    return float(np.mean(vals))


def calibrate_constant(obj: Objective, noise_variance: float, opt: OptimizerSpec, theta0, T: int,
                       etas: Sequence[float], seeds: Sequence[int]) -> float:
    """Ten times the largest eta^2-normalised excess of the synchronous run over the lead terms."""
    worst = 0.0
    for eta in etas:
        lhs = _mean_grad_norm(obj, noise_variance, opt.with_eta(eta), theta0, T, seeds, delayed=False)
        a, b = _lead_terms(obj, noise_variance, theta0, eta, T)
        worst = max(worst, (lhs - a - b) / eta ** 2)
    return 10.0 * worst


DEFAULT_CALIBRATION_ETAS = (0.2, 0.1, 0.05, 0.025)


def check_convergence_bound(obj: Objective, noise_variance: float, opt: OptimizerSpec, theta0, eta: float,
                            T: int, seeds: Sequence[int] = tuple(range(20)), constant: Optional[float] = None,
                            calibration_etas: Sequence[float] = DEFAULT_CALIBRATION_ETAS) -> BoundCheck:
    """Compare the delayed run's average squared gradient norm with the bound."""
    if eta * obj.smoothness > 1:
        raise PreconditionError(f"eta * L = {eta * obj.smoothness:.3g} > 1")
    if len(seeds) < 20:
        raise PreconditionError("need at least 20 seeds")
    if constant is None:
        constant = calibrate_constant(obj, noise_variance, opt, theta0, T, calibration_etas, seeds)
    lhs = _mean_grad_norm(obj, noise_variance, opt.with_eta(eta), theta0, T, seeds, delayed=True)
    a, b = _lead_terms(obj, noise_variance, theta0, eta, T)
    rhs = a + b + constant * eta ** 2
    return BoundCheck(lhs, rhs, lhs <= rhs, constant,
                      {"initial_gap": a, "noise": b, "second_order": constant * eta ** 2})


# Lipschitz recursions ----------------------------------------------------------------

@dataclass
class LipschitzReport:
    momentum_constant: float
    preconditioner_constant: float
    divergences: List[Dict[str, float]]

    @property
    def passed(self) -> bool:
        return math.isfinite(self.momentum_constant) and math.isfinite(self.preconditioner_constant)


def recursion_outputs(opt: OptimizerSpec, grads: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """m_t and diag(P_t) for a given gradient history."""
    state = _State(opt, grads.shape[1], np.dtype(np.float64))
    ms, ps = [], []
    for g in grads:
        p, m = state.direction(g)
        ms.append(m.copy())
        ps.append(p.copy())
    return np.array(ms), np.array(ps)


def check_lipschitz_recursions(opt: OptimizerSpec, perturbation_sizes: Sequence[float], steps: int = 200,
                               dimension: int = 10, seed: int = 0) -> LipschitzReport:
    """Perturb a gradient history and measure how far m_t and P_t move."""
    if opt.kind is not OptKind.ADAM:
        raise PreconditionError("the Lipschitz check targets AdamType recursions")
    rng = np.random.default_rng(seed)
    grads = rng.standard_normal((steps, dimension))
    direction = rng.standard_normal((steps, dimension))
    direction /= np.max(np.linalg.norm(direction, axis=1))
    m0, p0 = recursion_outputs(opt, grads)
    lphi = lpsi = 0.0
    rows = []
    for size in perturbation_sizes:
        delta = size * direction
        m1, p1 = recursion_outputs(opt, grads + delta)
        dg = float(np.max(np.linalg.norm(delta, axis=1)))
        dm = float(np.max(np.linalg.norm(m1 - m0, axis=1)))
        dp = float(np.max(np.max(np.abs(p1 - p0), axis=1)))  # operator norm of a diagonal difference
        rows.append({"size": float(size), "grad": dg, "momentum": dm, "preconditioner": dp})
        if dg > 0:
            lphi = max(lphi, dm / dg)
            lpsi = max(lpsi, dp / dg)
    return LipschitzReport(lphi, lpsi, rows)
