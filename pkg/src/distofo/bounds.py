"""
Closed-form convergence constants and bounds for the distributed controller.

Symbols follow the usual notation: ``N`` agents, consensus depth ``tau``,
step size ``eta``, smoothing ``delta``, regularity constants ``L0`` (Lipschitz),
``L1`` (smoothness), ``m`` (strong convexity), spectral data
``tr[W^(2 tau)]`` and ``tr[(W^tau - 11^T/N)^2]``, and ``E0``, the second
moment of the first combined gradient estimate.

Every public formula has an algebraically rearranged twin in
:func:`factored_constants` used for cross-checking.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BoundError,
    EpsilonTooLarge,
    FixedPointDiverged,
    RequiresStrongConvexityAboveOne,
    StepSizeConditionViolated,
    UnboundedConstraintSet,
)
from .netgraph import WeightMatrix, consensus_deviation
from .objective import LocalObjective
from .plant import SteadyStateMap


@dataclass(frozen=True)
class BoundInputs:
    n: int
    tau: int
    eta: float
    delta: float
    tr_w2tau: float
    tr_dev2: float
    lambda2: float
    L0: float
    L1: float
    m: float
    E0: float = 0.0
    diameter: float | None = None
    epsilon: float | None = None
    weights: WeightMatrix | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_weights(cls, weights: WeightMatrix, tau: int, eta: float, delta: float,
                     L0: float, L1: float, m: float, **kw) -> "BoundInputs":
        tr_w2tau, tr_dev2 = consensus_deviation(weights, tau)
        return cls(weights.n, tau, eta, delta, tr_w2tau, tr_dev2, weights.lambda2,
                   L0, L1, m, weights=weights, **kw)

    @property
    def alpha(self) -> float:
        return 4.0 * self.n / self.delta ** 2 * self.L0 ** 2 * self.eta ** 2 * self.tr_w2tau

    @property
    def step_size_limit(self) -> float:
        """``delta / sqrt(4 N L0^2 tr[W^(2 tau)])``."""
        return self.delta / math.sqrt(4.0 * self.n * self.L0 ** 2 * self.tr_w2tau)

    @property
    def step_size_ok(self) -> bool:
        return 0.0 < self.eta < self.step_size_limit

    def with_tau(self, tau: int) -> "BoundInputs":
        if self.weights is None:
            raise BoundError("changing tau needs the weight matrix")
        tr_w2tau, tr_dev2 = consensus_deviation(self.weights, tau)
        return replace(self, tau=tau, tr_w2tau=tr_w2tau, tr_dev2=tr_dev2)


@dataclass(frozen=True)
class Lemma1Constants:
    alpha: float
    R: float
    R_f: float
    R_e: float


def lemma1_constants(inputs: BoundInputs) -> Lemma1Constants:
    """Second-moment bounds on the combined estimate, the centralized estimate and the consensus error."""
    if not inputs.eta > 0:
        raise StepSizeConditionViolated("eta must be positive")
    alpha = inputs.alpha
    if alpha >= 1.0:
        raise StepSizeConditionViolated(
            f"alpha = {alpha:.6g} >= 1 (eta = {inputs.eta} >= {inputs.step_size_limit:.6g})")
    n, l0, tr = inputs.n, inputs.L0, inputs.tr_w2tau
    init_term = inputs.E0 / alpha if inputs.E0 else 0.0
    r = init_term + 16.0 * l0 ** 2 * tr * (n + 4) ** 2 / (1.0 - alpha)
    r_f = alpha * r / (2.0 * tr) + 8.0 * l0 ** 2 * (n + 4) ** 2
    r_e = inputs.tr_dev2 * r_f
    return Lemma1Constants(alpha, r, r_f, r_e)


def rho_unconstrained(m: float, eta: float) -> float:
    return 1.0 - (m - 1.0) * eta + m * eta ** 2


def rho_constrained(m: float, L1: float, eta: float) -> float:
    arg = 1.0 - 2.0 * m * eta + L1 ** 2 * eta ** 2
    if arg < 0:
        raise BoundError(f"1 - 2 m eta + L1^2 eta^2 = {arg:.6g} < 0")
    return math.sqrt(arg)


@dataclass(frozen=True)
class Theorem1Bound:
    rho: float
    a1: float
    a2: float
    a3: float
    p: float
    limit: float
    init_gap: float
    tau: int
    lemma: Lemma1Constants | None
    degenerate: bool = False

    def curve(self, k) -> np.ndarray:
        """Upper bound on ``E|u_(k+1) - u*|^2`` for ``k >= tau + 1``."""
        k = np.asarray(k, dtype=float)
        return self.rho ** (k - self.tau) * self.init_gap + self.limit


def _eq11(inputs: BoundInputs, lem: Lemma1Constants) -> tuple[float, float, float]:
    m, tau, n = inputs.m, inputs.tau, inputs.n
    r, r_f, r_e = lem.R, lem.R_f, lem.R_e
    a1 = 2.0 * m * tau * r
    a2 = (2.0 * tau * inputs.L0 * math.sqrt(r) + inputs.delta ** 2 * inputs.L1 ** 2 * n
          + 2.0 * tau * r + 4.0 * r_f + m * tau * r + r)
    a3 = r_e + inputs.L1 * inputs.delta ** 2 * n
    return a1, a2, a3


def theorem1_bound(inputs: BoundInputs, init_gap: float = 0.0) -> Theorem1Bound:
    """Unconstrained bound ``rho^(k - tau) E|u_(tau+1) - u*|^2 + p(eta)/(1 - rho)``.

    ``init_gap`` is the measured ``E|u_(tau+1) - u*|^2``.
    """
    if inputs.m <= 1.0:
        raise RequiresStrongConvexityAboveOne(
            f"m = {inputs.m:.6g} <= 1; scale the objectives by ceil(1/m) + 1")
    if inputs.eta == 0.0:
        return Theorem1Bound(1.0, 0.0, 0.0, 0.0, 0.0, math.inf, init_gap, inputs.tau, None, True)
    lem = lemma1_constants(inputs)
    a1, a2, a3 = _eq11(inputs, lem)
    eta = inputs.eta
    p = a1 * eta ** 3 + a2 * eta ** 2 + a3 * eta
    rho = rho_unconstrained(inputs.m, eta)
    gap = eta * (inputs.m - 1.0 - inputs.m * eta)  # 1 - rho without cancellation
    limit = p / gap if gap > 0.0 else math.inf
    return Theorem1Bound(rho, a1, a2, a3, p, limit, init_gap, inputs.tau, lem, rho >= 1.0)


@dataclass(frozen=True)
class Theorem2Bound:
    rho: float
    R_prime: float
    limit: float
    init_gap: float
    tau: int
    eta: float

    def curve(self, k) -> np.ndarray:
        """Upper bound on ``E|u_(k+1) - u*|`` for ``k >= tau + 1``."""
        k = np.asarray(k, dtype=float)
        return self.rho ** (k - self.tau) * self.init_gap + self.limit


def theorem2_bound(inputs: BoundInputs, init_gap: float = 0.0) -> Theorem2Bound:
    """Projected bound ``rho'^(k - tau) E|u_(tau+1) - u*| + eta R'/(1 - rho')``.

    ``init_gap`` is the measured ``E|u_(tau+1) - u*|``.
    """
    if inputs.diameter is None or not math.isfinite(inputs.diameter):
        raise UnboundedConstraintSet("constraint set diameter must be finite")
    if not inputs.step_size_ok:
        raise StepSizeConditionViolated(
            f"eta = {inputs.eta} not in (0, {inputs.step_size_limit:.6g})")
    rho = rho_constrained(inputs.m, inputs.L1, inputs.eta)
    n, l0, tr = inputs.n, inputs.L0, inputs.tr_w2tau
    r_prime = 2.0 * l0 + 4.0 * l0 * math.sqrt(
        tr * (n * inputs.diameter / inputs.delta ** 2 + 4.0 * (n + 4) ** 2))
    x = 2.0 * inputs.m * inputs.eta - inputs.L1 ** 2 * inputs.eta ** 2
    gap = x / (1.0 + rho)  # 1 - sqrt(1 - x) without cancellation
    limit = inputs.eta * r_prime / gap if gap > 0.0 else math.inf
    return Theorem2Bound(rho, r_prime, limit, init_gap, inputs.tau, inputs.eta)


@dataclass(frozen=True)
class CorollarySelection:
    eta: float
    delta: float
    tau: int
    limit: float
    rounds: int
    E0: float


def _corollary_eta(inputs: BoundInputs, eps: float) -> tuple[float, float]:
    """Solve the step-size formula together with ``delta = 2 sqrt(4 N L0^2 tr) eta``."""
    n, l0, l1, m, tr = inputs.n, inputs.L0, inputs.L1, inputs.m, inputs.tr_w2tau
    scale = 2.0 * math.sqrt(4.0 * n * l0 ** 2 * tr)
    eta = delta = 0.0
    for _ in range(200):
        # with this delta, alpha = 1/4 for every eta > 0
        alpha = 0.25
        r = inputs.E0 / alpha + 16.0 * l0 ** 2 * tr * (n + 4) ** 2 / (1.0 - alpha)
        r_f = alpha * r / (2.0 * tr) + 8.0 * l0 ** 2 * (n + 4) ** 2
        a1 = 2.0 * m * inputs.tau * r
        a2 = (2.0 * inputs.tau * l0 * math.sqrt(r) + delta ** 2 * l1 ** 2 * n
              + 2.0 * inputs.tau * r + 4.0 * r_f + m * inputs.tau * r + r)
        denom = 2.0 * a1 + 32.0 * n ** 2 * l1 * l0 ** 2 * tr
        radicand = (a2 + 0.5 * eps * m) ** 2 + denom * (m - 1.0) * eps
        if radicand < 0:
            raise EpsilonTooLarge("negative square-root argument")
        new_eta = (math.sqrt(radicand) - (a2 + 0.5 * m * eps)) / denom
        new_delta = scale * new_eta
        if abs(new_eta - eta) <= 1e-15 * new_eta:
            return new_eta, new_delta
        eta, delta = new_eta, new_delta
    raise FixedPointDiverged("step-size iteration did not settle")


def corollary1_select(eps: float, inputs: BoundInputs,
                      e0_fn: Callable[[float, int], float] | None = None,
                      max_rounds: int = 100) -> CorollarySelection:
    """Pick ``(eta, delta, tau)`` with limiting error below ``eps``.

    ``eta`` and ``delta`` depend on ``tau`` through ``tr[W^(2 tau)]`` and
    ``tau`` on ``eta`` through ``R_f``, so the three are iterated jointly,
    starting at ``tau = 1`` and only ever increasing ``tau``. ``E0`` is held
    at ``inputs.E0`` unless ``e0_fn(delta, tau)`` re-estimates it.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if inputs.m <= 1.0:
        raise RequiresStrongConvexityAboveOne(f"m = {inputs.m:.6g} <= 1")
    n, m = inputs.n, inputs.m
    tau = 1
    current = inputs.with_tau(tau)
    for rounds in range(1, max_rounds + 1):
        eta, delta = _corollary_eta(current, eps)
        if not m - 1.0 - m * eta > 0:
            raise EpsilonTooLarge(f"m - 1 - m eta = {m - 1.0 - m * eta:.6g} <= 0")
        trial = replace(current, eta=eta, delta=delta)
        lem = lemma1_constants(trial)
        lam = current.lambda2
        arg = (m - 1.0 - m * eta) * eps / (2.0 * lem.R_f * (n - 1)) if n > 1 else math.inf
        if n == 1 or lam <= 0.0 or arg >= 1.0:
            tau_min = 1
        else:
            threshold = math.log(arg) / math.log(lam ** 2)
            tau_min = max(1, math.floor(threshold) + 1)
        if tau_min <= tau:
            break
        tau = tau_min
        current = inputs.with_tau(tau)
        if e0_fn is not None:
            current = replace(current, E0=float(e0_fn(delta, tau)))
    else:
        raise FixedPointDiverged(f"tau did not settle in {max_rounds} rounds")

    final = replace(current, eta=eta, delta=delta)
    limit = theorem1_bound(final).limit
    if not limit < eps:
        raise FixedPointDiverged(f"a-posteriori check failed: p/(1-rho) = {limit:.6g} >= {eps}")
    return CorollarySelection(eta, delta, tau, limit, rounds, final.E0)


def factored_constants(inputs: BoundInputs) -> dict[str, float]:
    """All constants through rearranged algebra (cross-check of the direct forms)."""
    n, l0, l1, m, tau = inputs.n, inputs.L0, inputs.L1, inputs.m, inputs.tau
    eta, delta, tr, dev = inputs.eta, inputs.delta, inputs.tr_w2tau, inputs.tr_dev2
    c = (n + 4) ** 2 * l0 ** 2
    alpha = (2.0 * l0 * eta / delta) ** 2 * n * tr
    r = (inputs.E0 * (1.0 - alpha) + 16.0 * c * tr * alpha) / (alpha * (1.0 - alpha))
    r_f = 8.0 * c + (2.0 * n * (l0 * eta / delta) ** 2) * r
    r_e = dev * (8.0 * c + 2.0 * n * (l0 * eta / delta) ** 2 * r)
    a1 = 2.0 * m * tau * r
    a2 = r * (1.0 + tau * (2.0 + m)) + 2.0 * tau * l0 * math.sqrt(r) + 4.0 * r_f \
        + n * (delta * l1) ** 2
    a3 = r_e + n * l1 * delta ** 2
    p = eta * (a3 + eta * (a2 + eta * a1))
    rho = 1.0 - eta * (m - 1.0 - m * eta)
    limit = (a3 + eta * (a2 + eta * a1)) / (m - 1.0 - m * eta)
    out = dict(alpha=alpha, R=r, R_f=r_f, R_e=r_e, a1=a1, a2=a2, a3=a3, p=p, rho=rho,
               limit=limit)
    if inputs.diameter is not None and math.isfinite(inputs.diameter):
        out["rho_prime"] = math.sqrt((1.0 - l1 * eta) ** 2 + 2.0 * eta * (l1 - m))
        out["R_prime"] = 2.0 * l0 * (1.0 + 2.0 * math.sqrt(
            tr * n * inputs.diameter / delta ** 2 + 4.0 * tr * (n + 4) ** 2))
        out["limit_prime"] = out["R_prime"] * (1.0 + out["rho_prime"]) / (2.0 * m - l1 ** 2 * eta)
    return out


@dataclass(frozen=True)
class E0Estimate:
    value: float
    mean: float
    stderr: float
    cell: tuple[int, int]
    samples: int
    method: str = "monte-carlo max over (p, q) + 3 standard errors"


def estimate_E0(plant: SteadyStateMap, objectives: Sequence[LocalObjective],
                weights: WeightMatrix, u0, delta: float, tau: int,
                sample_count: int = 2000, rng: np.random.Generator | None = None) -> E0Estimate:
    """Monte Carlo ``max_(p,q in 1..tau) E|(W^p phi_0 - W^q phi_0^init) * v_0 / delta|^2``.

    ``phi_0`` and ``phi_0^init`` are the local objective vectors at
    ``u0 + delta v_0`` and ``u0 + delta v_0^init`` for independent standard
    normal ``v_0``, ``v_0^init``. Returns the largest cell mean plus three
    standard errors.
    """
    rng = rng or np.random.default_rng(0)
    u0 = np.asarray(u0, dtype=float)
    n = len(u0)

    def local(u):
        y = plant.measure(u)
        return np.array([objectives[i].evaluate(u[i], y[i]) for i in range(n)])

    v0 = rng.standard_normal((sample_count, n))
    v_init = rng.standard_normal((sample_count, n))
    phi0 = np.array([local(u0 + delta * v) for v in v0])
    phi_init = np.array([local(u0 + delta * v) for v in v_init])
    powers = [weights.power(p) for p in range(1, tau + 1)]
    mixed0 = [phi0 @ w.T for w in powers]
    mixed_init = [phi_init @ w.T for w in powers]

    best = (-math.inf, 0.0, (1, 1))
    for p in range(tau):
        for q in range(tau):
            sq = np.sum(((mixed0[p] - mixed_init[q]) * v0 / delta) ** 2, axis=1)
            mean = float(sq.mean())
            if mean > best[0]:
                se = float(sq.std(ddof=1) / math.sqrt(sample_count)) if sample_count > 1 else 0.0
                best = (mean, se, (p + 1, q + 1))
    mean, se, cell = best
    return E0Estimate(mean + 3.0 * se, mean, se, cell, sample_count)


@dataclass
class BoundReport:
    """Everything the bound calculator knows about one parameter set."""

    inputs: dict
    step_size_ok: bool
    step_size_limit: float
    alpha: float | None = None
    R: float | None = None
    R_f: float | None = None
    R_e: float | None = None
    rho: float | None = None
    a1: float | None = None
    a2: float | None = None
    a3: float | None = None
    p: float | None = None
    limit_unconstrained: float | None = None
    eta_eps: float | None = None
    delta_eps: float | None = None
    tau_min: int | None = None
    rho_prime: float | None = None
    R_prime: float | None = None
    limit_constrained: float | None = None
    violations: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def hypotheses_ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, dict):
                for sub, sv in value.items():
                    lines.append(f"{key}.{sub} = {sv}")
            elif isinstance(value, list):
                lines.append(f"{key} = {'; '.join(value) if value else 'none'}")
            else:
                lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def build_report(inputs: BoundInputs, init_gap_sq: float = 0.0, init_gap: float = 0.0,
                 provenance: dict | None = None) -> BoundReport:
    """Evaluate every bound that applies; hypothesis failures are recorded, not raised."""
    plain = {k: v for k, v in asdict(replace(inputs, weights=None)).items() if k != "weights"}
    report = BoundReport(plain, inputs.step_size_ok, inputs.step_size_limit,
                         provenance=dict(provenance or {}))
    if inputs.weights is not None:
        report.provenance.setdefault("metropolis_variant", inputs.weights.variant)

    try:
        lem = lemma1_constants(inputs)
        report.alpha, report.R, report.R_f, report.R_e = lem.alpha, lem.R, lem.R_f, lem.R_e
    except StepSizeConditionViolated as exc:
        report.violations.append(f"lemma1: {exc}")

    try:
        t1 = theorem1_bound(inputs, init_gap_sq)
        report.rho, report.a1, report.a2, report.a3 = t1.rho, t1.a1, t1.a2, t1.a3
        report.p, report.limit_unconstrained = t1.p, t1.limit
    except BoundError as exc:
        report.violations.append(f"theorem1: {exc}")

    if inputs.epsilon is not None and inputs.weights is not None:
        try:
            sel = corollary1_select(inputs.epsilon, inputs)
            report.eta_eps, report.delta_eps, report.tau_min = sel.eta, sel.delta, sel.tau
        except BoundError as exc:
            report.violations.append(f"corollary1: {exc}")

    if inputs.diameter is not None:
        try:
            t2 = theorem2_bound(inputs, init_gap)
            report.rho_prime, report.R_prime, report.limit_constrained = t2.rho, t2.R_prime, t2.limit
        except BoundError as exc:
            report.violations.append(f"theorem2: {exc}")
    return report
