"""
Physical plants seen through their steady-state input-output map ``y = h(u, d)``.

Controllers only ever call :meth:`SteadyStateMap.measure`. The affine plant
evaluates ``H u + b`` directly; the DC grid integrates its RLC dynamics with
forward Euler until the state stops moving and then reports the measured
node voltages.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import (
    NotATree,
    NotSettled,
    SingularSystemMatrix,
    UnstableDiscretization,
)
from .netgraph import CommGraph

PRINTED = "printed"
STABLE = "stable-droop"


class SteadyStateMap(abc.ABC):
    """Black-box plant: apply an input vector, read back the output vector."""

    dim: int

    @abc.abstractmethod
    def measure(self, u: np.ndarray) -> np.ndarray:
        """Apply ``u`` and return the steady-state output."""


class AffinePlant(SteadyStateMap):
    """``measure(u) = H u + b`` with the disturbance folded into ``b``."""

    def __init__(self, sensitivity, offset):
        h = np.array(sensitivity, dtype=float)
        b = np.array(offset, dtype=float)
        if h.ndim != 2 or h.shape[0] != h.shape[1] or b.shape != (h.shape[0],):
            raise ValueError("sensitivity must be N x N and offset length N")
        h.setflags(write=False)
        b.setflags(write=False)
        self.sensitivity = h
        self.offset = b
        self.dim = h.shape[0]
        self.measure_count = 0

    def measure(self, u):
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise ValueError("input must be finite")
        self.measure_count += 1
        return self.sensitivity @ u + self.offset


@njit(cache=True)
def _settle(a, c, x, tol, max_steps):
    """Iterate ``x <- a x + c`` until ``max|dx| <= tol``; returns (x, steps)."""
    n = x.shape[0]
    cur = x.copy()
    nxt = np.empty(n)
    for step in range(1, max_steps + 1):
        diff = 0.0
        for i in range(n):
            s = c[i]
            for j in range(n):
                s += a[i, j] * cur[j]
            nxt[i] = s
            d = abs(s - cur[i])
            if d > diff:
                diff = d
        cur, nxt = nxt, cur
        if diff <= tol:
            return cur, step
    return cur, -1


def _as_diag(value, n: int, name: str) -> np.ndarray:
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        v = np.full(n, float(v))
    if v.shape != (n,):
        raise ValueError(f"{name} must be a scalar or a length-{n} vector")
    return v


@dataclass
class GridParams:
    """Electrical parameters of the DC grid.

    Each entry may be a scalar (times identity / all-ones) or an explicit
    diagonal / vector. Defaults are the values of the 8-node experiment.
    """

    capacitance: object = 1.0
    conductance: object = 1.0
    inductance: object = 1.0
    resistance: object = 10.0
    reference_injection: object = 1.0
    load_change: object = 1.0
    disturbance: object = 0.1
    step: float = 0.1
    settle_tol: float = 1e-10
    settle_max_steps: int = 100_000
    convention: str = "auto"


def incidence_matrix(tree: CommGraph) -> np.ndarray:
    """Node-by-line incidence; line ``(i, j)`` with ``i < j`` leaves ``i`` (+1), enters ``j`` (-1)."""
    b = np.zeros((tree.node_count, len(tree.edges)))
    for e, (i, j) in enumerate(tree.edges):
        b[i, e] = 1.0
        b[j, e] = -1.0
    return b


class DcGridPlant(SteadyStateMap):
    """Euler-discretized DC grid with droop-controlled nodes.

    State ``x = (V, f)``: node voltages and line currents. The input ``u`` is
    the controllable current injection; the measured output is ``V + d``.

    Attributes
    ----------
    convention : str
        ``"printed"`` when the system matrix ``[[G, -B], [B^T, -R]]`` gives a
        Schur-stable Euler map, otherwise ``"stable-droop"`` which uses
        ``[[-G, -B], [B^T, -R]]``.
    spectral_radius : float
        Spectral radius of the Euler state-transition matrix.
    """

    def __init__(self, tree: CommGraph, params: GridParams | None = None):
        params = params or GridParams()
        if not tree.is_tree():
            raise NotATree(f"{tree.node_count} nodes with {len(tree.edges)} edges is not a tree")
        n, m = tree.node_count, len(tree.edges)
        self.tree = tree
        self.params = params
        self.dim = n
        self.line_count = m
        self.caps = _as_diag(params.capacitance, n, "capacitance")
        self.conductances = _as_diag(params.conductance, n, "conductance")
        self.inductances = _as_diag(params.inductance, m, "inductance")
        self.resistances = _as_diag(params.resistance, m, "resistance")
        self.i_ref = _as_diag(params.reference_injection, n, "reference_injection")
        self.load_change = _as_diag(params.load_change, n, "load_change")
        self.disturbance = _as_diag(params.disturbance, n, "disturbance")
        if np.any(self.caps <= 0) or np.any(self.inductances <= 0):
            raise ValueError("capacitances and inductances must be positive")
        if params.step <= 0:
            raise ValueError("discretization step must be positive")
        self.incidence = incidence_matrix(tree)

        self.convention, self.system_matrix, self.transition, self.spectral_radius = \
            self._select_convention(params.convention)
        self._input_gain = params.step / self.caps  # Euler gain on the injection rows
        self.state = np.zeros(n + m)
        self.measure_count = 0
        self.last_settle_steps = 0

    def _system(self, convention: str) -> np.ndarray:
        g = np.diag(self.conductances)
        r = np.diag(self.resistances)
        b = self.incidence
        top = g if convention == PRINTED else -g
        return np.block([[top, -b], [b.T, -r]])

    def _select_convention(self, requested: str):
        if requested not in ("auto", PRINTED, STABLE):
            raise ValueError(f"unknown convention {requested!r}")
        order = [PRINTED, STABLE] if requested == "auto" else [requested]
        inertia = np.concatenate([self.caps, self.inductances])
        radii = {}
        for conv in order:
            a = self._system(conv)
            ad = np.eye(a.shape[0]) + self.params.step * a / inertia[:, None]
            rho = float(np.max(np.abs(np.linalg.eigvals(ad))))
            radii[conv] = rho
            if rho < 1.0:
                return conv, a, ad, rho
        raise UnstableDiscretization(
            f"Euler map not Schur stable with step {self.params.step}: spectral radii {radii}")

    @property
    def net_injection(self) -> np.ndarray:
        """Uncontrolled injection ``I* - dI``."""
        return self.i_ref - self.load_change

    def reset(self, state=None) -> None:
        n = self.dim + self.line_count
        self.state = np.zeros(n) if state is None else np.array(state, dtype=float)

    def measure(self, u, max_steps: int | None = None):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,) or not np.all(np.isfinite(u)):
            raise ValueError("input must be a finite vector of length N")
        c = np.zeros(self.dim + self.line_count)
        c[: self.dim] = self._input_gain * (self.net_injection + u)
        limit = self.params.settle_max_steps if max_steps is None else int(max_steps)
        x, steps = _settle(self.transition, c, self.state, self.params.settle_tol, limit)
        self.measure_count += 1
        if steps < 0:
            self.state = x
            raise NotSettled(f"no steady state within {limit} Euler steps")
        self.state = x
        self.last_settle_steps = steps
        return x[: self.dim] + self.disturbance

    def metadata(self) -> dict:
        return {
            "kind": "dc_grid",
            "convention": self.convention,
            "spectral_radius": self.spectral_radius,
            "step": self.params.step,
            "settle_tol": self.params.settle_tol,
            "settle_max_steps": self.params.settle_max_steps,
            "edges": [list(e) for e in self.tree.edges],
        }


def build_dc_grid(tree: CommGraph, params: GridParams | None = None) -> DcGridPlant:
    """Build a :class:`DcGridPlant` on ``tree``; raises if the Euler map is unstable."""
    return DcGridPlant(tree, params)


def sensitivity_oracle(plant: DcGridPlant) -> tuple[np.ndarray, np.ndarray]:
    """Exact steady-state sensitivity ``H`` and reference ``V_ref = H I* + d``.

    For test oracles and the optimum solver only; controllers never see this.
    The steady state of ``x' = A x + [I; 0] i`` is ``V = -[I 0] A^{-1} [I; 0] i``.
    """
    a = plant.system_matrix
    n = plant.dim
    if np.linalg.cond(a) > 1e12:
        raise SingularSystemMatrix("grid system matrix is (numerically) singular")
    rhs = np.zeros((a.shape[0], n))
    rhs[:n] = np.eye(n)
    h = -np.linalg.solve(a, rhs)[:n]
    v_ref = h @ plant.i_ref + plant.disturbance
    return h, v_ref


def affine_oracle(plant: DcGridPlant) -> AffinePlant:
    """Affine plant with the same steady state as ``plant``."""
    h, _ = sensitivity_oracle(plant)
    return AffinePlant(h, h @ plant.net_injection + plant.disturbance)


def printed_sensitivity(plant: DcGridPlant) -> np.ndarray:
    """``[I 0] [[G, -B], [B^T, -R]]^{-1} [I; 0]`` exactly as written for the grid."""
    a = plant._system(PRINTED)
    n = plant.dim
    rhs = np.zeros((a.shape[0], n))
    rhs[:n] = np.eye(n)
    return np.linalg.solve(a, rhs)[:n]
