"""
Local objectives, the reduced global objective, box constraints and the
regularity constants (Lipschitz, smoothness, strong convexity) that the
convergence bounds consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import UnboundedRegion
from .plant import AffinePlant, DcGridPlant, SteadyStateMap, affine_oracle


class LocalObjective:
    """Scalar objective ``phi_i(u_i, y_i)`` of one agent, times ``scale``."""

    def __init__(self, fn: Callable[[float, float], float], scale: float = 1.0):
        self.fn = fn
        self.scale = float(scale)

    def evaluate(self, u_i: float, y_i: float) -> float:
        return self.scale * self.fn(u_i, y_i)

    def scaled(self, factor: float) -> "LocalObjective":
        return LocalObjective(self.fn, self.scale * factor)


class QuadraticTracking(LocalObjective):
    """``scale * (u_i**2 + (y_i - reference)**2) / 2``."""

    def __init__(self, reference: float, scale: float = 1.0):
        self.reference = float(reference)
        self.scale = float(scale)

    def fn(self, u_i, y_i):
        return 0.5 * (u_i * u_i + (y_i - self.reference) ** 2)

    def evaluate(self, u_i, y_i):
        e = y_i - self.reference
        return self.scale * 0.5 * (u_i * u_i + e * e)

    def scaled(self, factor):
        return QuadraticTracking(self.reference, self.scale * factor)


def evaluate_local(obj: LocalObjective, u_i: float, y_i: float) -> float:
    return obj.evaluate(u_i, y_i)


def tracking_objectives(reference: Sequence[float], scale: float = 1.0,
                        normalization: str = "mean") -> list[QuadraticTracking]:
    """One :class:`QuadraticTracking` per node.

    The controller drives the *average* of the local objectives. With the
    default ``"mean"`` each node keeps ``(u_i^2 + (y_i - r_i)^2)/2`` and the
    average is taken literally; ``"sum"`` multiplies every local term by
    ``N`` so that the average equals ``(|u|^2 + |y - reference|^2)/2``.
    """
    reference = np.asarray(reference, dtype=float)
    n = len(reference)
    if normalization == "sum":
        w = scale * n
    elif normalization == "mean":
        w = scale
    else:
        raise ValueError(f"normalization must be 'sum' or 'mean', got {normalization!r}")
    return [QuadraticTracking(r, w) for r in reference]


@dataclass(frozen=True)
class BoxConstraint:
    """Per-agent intervals ``[lower_i, upper_i]``; infinite ends allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float)
        hi = np.array(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-D and of equal length")
        if np.any(lo > hi):
            raise ValueError("lower must not exceed upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, n: int) -> "BoxConstraint":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def uniform(cls, n: int, lo: float, hi: float) -> "BoxConstraint":
        return cls(np.full(n, float(lo)), np.full(n, float(hi)))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def diameters(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diameter(self) -> float:
        """``sqrt(sum_i D_i^2)``; infinite when any interval is unbounded."""
        return float(np.sqrt(np.sum(self.diameters ** 2)))

    @property
    def is_bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def project(self, u):
        return np.minimum(np.maximum(np.asarray(u, dtype=float), self.lower), self.upper)

    def contains(self, u) -> bool:
        u = np.asarray(u)
        return bool(np.all(u >= self.lower) and np.all(u <= self.upper))

    def clamp_scalar(self, i: int, value: float) -> float:
        lo, hi = self.lower[i], self.upper[i]
        return hi if value > hi else lo if value < lo else value


def project(constraint: BoxConstraint, u):
    return constraint.project(u)


@dataclass(frozen=True)
class QuadraticModel:
    """Closed form of a quadratic tracking problem on an affine plant.

    ``Phi(u) = (1/N) sum_i w_i/2 (u_i^2 + (h_i u + b_i - r_i)^2)``.
    """

    sensitivity: np.ndarray
    offset: np.ndarray
    reference: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return len(self.offset)

    @property
    def residual_offset(self) -> np.ndarray:
        return self.offset - self.reference

    def value(self, u) -> float:
        u = np.asarray(u, dtype=float)
        e = self.sensitivity @ u + self.residual_offset
        return float(np.sum(self.weights * 0.5 * (u * u + e * e)) / self.n)

    def local_values(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        e = self.sensitivity @ u + self.residual_offset
        return self.weights * 0.5 * (u * u + e * e)

    def gradient(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        h, w = self.sensitivity, self.weights
        e = h @ u + self.residual_offset
        return (w * u + h.T @ (w * e)) / self.n

    def hessian(self) -> np.ndarray:
        h, w = self.sensitivity, self.weights
        return (np.diag(w) + h.T @ (w[:, None] * h)) / self.n

    def local_gradient(self, i: int, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        h_i = self.sensitivity[i]
        g = self.weights[i] * (h_i @ u + self.residual_offset[i]) * h_i
        g[i] += self.weights[i] * u[i]
        return g

    def local_hessian(self, i: int) -> np.ndarray:
        h_i = self.sensitivity[i]
        hess = np.outer(h_i, h_i)
        hess[i, i] += 1.0
        return self.weights[i] * hess

    def smoothed_value(self, u, delta: float) -> float:
        """``E_v Phi(u + delta v)`` for ``v ~ N(0, I)``."""
        return self.value(u) + 0.5 * delta ** 2 * float(np.trace(self.hessian()))

    def scaled(self, factor: float) -> "QuadraticModel":
        return replace(self, weights=self.weights * factor)


class ReducedObjective:
    """``Phi(u) = (1/N) sum_i phi_i(u_i, h_i(u))`` evaluated through the plant."""

    def __init__(self, plant: SteadyStateMap, objectives: Sequence[LocalObjective]):
        if len(objectives) != plant.dim:
            raise ValueError("need one local objective per plant output")
        self.plant = plant
        self.objectives = list(objectives)

    @property
    def n(self) -> int:
        return self.plant.dim

    def local_values(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        y = self.plant.measure(u)
        return np.array([obj.evaluate(u[i], y[i]) for i, obj in enumerate(self.objectives)])

    def value(self, u) -> float:
        return float(np.mean(self.local_values(u)))

    def smoothed_value_mc(self, u, delta: float, samples: int,
                          rng: np.random.Generator) -> tuple[float, float]:
        """Monte Carlo ``E_v Phi(u + delta v)``; returns (mean, standard error)."""
        u = np.asarray(u, dtype=float)
        vals = np.array([self.value(u + delta * rng.standard_normal(self.n))
                         for _ in range(samples)])
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples))

    def scaled(self, factor: float) -> "ReducedObjective":
        return ReducedObjective(self.plant, [o.scaled(factor) for o in self.objectives])

    def quadratic_model(self) -> QuadraticModel | None:
        """Closed form when the plant is affine and all objectives are quadratic tracking."""
        if not all(isinstance(o, QuadraticTracking) for o in self.objectives):
            return None
        if isinstance(self.plant, AffinePlant):
            aff = self.plant
        elif isinstance(self.plant, DcGridPlant):
            aff = affine_oracle(self.plant)
        else:
            return None
        return QuadraticModel(
            np.array(aff.sensitivity), np.array(aff.offset),
            np.array([o.reference for o in self.objectives]),
            np.array([o.scale for o in self.objectives]),
        )


def reduced_gradient_oracle(red: ReducedObjective) -> Callable[[np.ndarray], np.ndarray]:
    """Exact gradient of the reduced objective (test oracle, model-based)."""
    model = red.quadratic_model()
    if model is None:
        raise TypeError("gradient oracle needs an affine/grid plant with quadratic tracking objectives")
    return model.gradient


@dataclass(frozen=True)
class Region:
    """Euclidean ball on which Lipschitz constants are evaluated."""

    center: np.ndarray
    radius: float

    @classmethod
    def around_box(cls, box: BoxConstraint, delta: float = 0.0) -> "Region":
        """Ball covering ``box`` inflated by the exploration radius ``6 delta sqrt(N)``."""
        if not box.is_bounded:
            raise UnboundedRegion("constraint box is unbounded; give a ball radius instead")
        center = 0.5 * (box.lower + box.upper)
        return cls(center, 0.5 * box.diameter + 6.0 * delta * math.sqrt(box.dim))

    @classmethod
    def around_point(cls, u0, radius: float, delta: float = 0.0) -> "Region":
        u0 = np.asarray(u0, dtype=float)
        return cls(u0, float(radius) + 6.0 * delta * math.sqrt(len(u0)))


@dataclass(frozen=True)
class RegularityConstants:
    L0: float
    L1: float
    m: float
    scale: float = 1.0
    region: str = ""
    estimated: bool = False

    def scaled(self, c: float) -> "RegularityConstants":
        """Constants of the objectives multiplied by ``c``."""
        return replace(self, L0=self.L0 * c, L1=self.L1 * c, m=self.m * c, scale=self.scale * c)


def remark2_scale(m: float) -> float:
    """Smallest-effort factor making the strong convexity modulus exceed one."""
    return 1.0 if m > 1.0 else float(math.ceil(1.0 / m) + 1)


def estimate_constants(red: ReducedObjective, region: Region, sample_count: int = 200,
                       rng: np.random.Generator | None = None,
                       fd_step: float = 1e-4) -> RegularityConstants:
    """Lipschitz (per agent), smoothness and strong convexity constants on ``region``.

    Quadratic instances are handled exactly. Otherwise the constants are
    estimated from finite differences at ``sample_count`` random points in
    the region and flagged ``estimated=True``.
    """
    if not np.isfinite(region.radius) or not np.all(np.isfinite(region.center)):
        raise UnboundedRegion("region must be bounded")
    desc = f"ball(radius={region.radius:.6g})"
    model = red.quadratic_model()
    if model is not None:
        eig = np.linalg.eigvalsh(model.hessian())
        l0 = max(
            float(np.linalg.norm(model.local_gradient(i, region.center)))
            + float(np.linalg.norm(model.local_hessian(i), 2)) * region.radius
            for i in range(model.n)
        )
        return RegularityConstants(l0, float(eig[-1]), float(eig[0]), region=desc)

    rng = rng or np.random.default_rng(0)
    n = red.n
    l0 = 0.0
    m = np.inf
    l1 = 0.0
    for _ in range(sample_count):
        d = rng.standard_normal(n)
        u = region.center + region.radius * rng.random() ** (1.0 / n) * d / np.linalg.norm(d)
        jac = np.empty((n, n))  # jac[i] = gradient of agent i's reduced objective
        hess = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = fd_step
            fp, fm = red.local_values(u + e), red.local_values(u - e)
            jac[:, j] = (fp - fm) / (2 * fd_step)
        for j in range(n):
            for k in range(j, n):
                ej = np.zeros(n)
                ek = np.zeros(n)
                ej[j] = fd_step
                ek[k] = fd_step
                val = (red.value(u + ej + ek) - red.value(u + ej - ek)
                       - red.value(u - ej + ek) + red.value(u - ej - ek)) / (4 * fd_step ** 2)
                hess[j, k] = hess[k, j] = val
        eig = np.linalg.eigvalsh(hess)
        l0 = max(l0, float(np.max(np.linalg.norm(jac, axis=1))))
        m = min(m, float(eig[0]))
        l1 = max(l1, float(eig[-1]))
    return RegularityConstants(l0, l1, m, region=desc, estimated=True)
