"""
Distributed model-free online feedback optimization controller.

Every agent keeps a queue of ``tau`` past local objective values. Each
iteration it

1. draws its exploration scalar ``v_k(i) ~ N(0, 1)``,
2. applies ``u_k(i) + delta v_k(i)`` and evaluates its local objective from
   its own measured output,
3. averages its queue with its neighbors' queues (one consensus round on
   every queue position),
4. appends the fresh evaluation,
5. forms a residual ``Delta_k(i)`` from the head of the queue,
6. updates ``u_{k+1}(i) = u_k(i) - eta/delta * Delta_k(i)`` (clamped to its
   interval in projected mode),
7. drops the head.

After ``tau`` rounds the head is ``(W^tau phi_{k-tau})_i``, a local estimate
of the network-average objective at iteration ``k - tau``.

The controller touches the plant only through ``measure`` and its own local
objective; it never sees the plant model.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .netgraph import WeightMatrix
from .objective import BoxConstraint, LocalObjective
from .plant import SteadyStateMap

MODES = ("unconstrained", "projected")
BASELINES = ("distributed", "centralized")


class StepSizeWarning(UserWarning):
    """The step size violates ``eta < delta / sqrt(4 N L0^2 tr[W^(2 tau)])``."""


@dataclass
class ControllerConfig:
    """Parameters of one closed-loop run.

    ``centralized_delay`` only matters for the centralized baseline: ``0``
    uses the undelayed residual on exact averages, ``1`` reproduces the
    distributed protocol with ``tau = 1`` and exact averaging.
    """

    eta: float
    delta: float
    tau: int = 1
    horizon: int = 0
    mode: str = "unconstrained"
    constraint: BoxConstraint | None = None
    seed: int = 0
    baseline: str = "distributed"
    centralized_delay: int = 0
    step_size_ok: bool | None = None

    def __post_init__(self):
        if not self.eta > 0 or not self.delta > 0:
            raise ValueError("eta and delta must be positive")
        if int(self.tau) != self.tau or self.tau < 1:
            raise ValueError("tau must be a positive integer")
        if int(self.horizon) != self.horizon or self.horizon < 0:
            raise ValueError("horizon must be a nonnegative integer")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.centralized_delay not in (0, 1):
            raise ValueError("centralized_delay must be 0 or 1")
        if self.mode == "projected" and self.constraint is None:
            raise ValueError("projected mode needs a constraint")
        self.tau = int(self.tau)
        self.horizon = int(self.horizon)

    def step_size_bound(self, n: int, l0: float, tr_w2tau: float) -> float:
        return self.delta / math.sqrt(4.0 * n * l0 ** 2 * tr_w2tau)

    def check_step_size(self, n: int, l0: float, tr_w2tau: float) -> bool:
        """Record (and warn about) the step-size hypothesis of the bounds."""
        self.step_size_ok = bool(self.eta < self.step_size_bound(n, l0, tr_w2tau))
        if not self.step_size_ok:
            warnings.warn(
                f"eta={self.eta} violates eta < {self.step_size_bound(n, l0, tr_w2tau):.4g}",
                StepSizeWarning, stacklevel=2)
        return self.step_size_ok


def make_streams(seed: int, n: int) -> tuple[list[np.random.Generator], np.random.Generator]:
    """Independent per-agent exploration streams plus one init-vector stream."""
    children = np.random.SeedSequence(seed).spawn(n + 1)
    return [np.random.default_rng(c) for c in children[:n]], np.random.default_rng(children[n])


class ExplorationStreams:
    """Per-agent ``N(0, 1)`` draws, buffered.

    Drawing a block from a generator yields the same numbers as drawing them
    one at a time, so buffering does not change any agent's sequence.
    """

    def __init__(self, rngs: Sequence[np.random.Generator], block: int = 4096):
        self.rngs = list(rngs)
        self.block = block
        self._buf = np.empty((0, len(self.rngs)))
        self._pos = 0

    def draw(self) -> np.ndarray:
        if self._pos == len(self._buf):
            self._buf = np.column_stack([r.standard_normal(self.block) for r in self.rngs])
            self._pos = 0
        v = self._buf[self._pos]
        self._pos += 1
        return v.copy()


class Transport:
    """Synchronous consensus round over the communication graph.

    Row ``i`` of the result only combines agent ``i``'s own queue with the
    queues of its neighbors, since ``W_ij = 0`` off the graph.
    """

    def __init__(self, weights: WeightMatrix):
        self.weights = np.array(weights.entries)
        self.n = weights.n
        self.rounds = 0

    def exchange(self, queues: np.ndarray) -> np.ndarray:
        self.rounds += 1
        return self.weights @ queues


class MessagePassingTransport(Transport):
    """Explicit per-link mailboxes; counts every scalar sent.

    ``sent[j, i]`` is the number of scalars agent ``j`` sent to agent ``i``.
    """

    def __init__(self, weights: WeightMatrix):
        super().__init__(weights)
        self.table = weights.neighbor_table()
        self.sent = np.zeros((self.n, self.n), dtype=np.int64)

    def exchange(self, queues):
        mailbox: list[list[tuple[float, np.ndarray]]] = [[] for _ in range(self.n)]
        for i, row in enumerate(self.table):
            for j, w in row:
                if j != i:
                    msg = queues[j].copy()
                    self.sent[j, i] += msg.size
                    mailbox[i].append((w, msg))
        out = np.empty_like(queues)
        for i, row in enumerate(self.table):
            acc = self.weights[i, i] * queues[i]
            for w, msg in mailbox[i]:
                acc = acc + w * msg
            out[i] = acc
        self.rounds += 1
        return out


class ExactAverageTransport(Transport):
    """Every agent receives the exact network average (centralized baseline)."""

    def exchange(self, queues):
        self.rounds += 1
        return np.repeat(queues.mean(axis=0, keepdims=True), len(queues), axis=0)


@dataclass
class AgentState:
    """Snapshot of one agent's local memory.

    ``v_hist`` holds the agent's own online exploration scalars, oldest first
    (at most ``tau + 1`` of them).
    """

    index: int
    u: float
    queue: np.ndarray
    v_init: np.ndarray
    v_hist: list[float]
    prev_head: float | None


@dataclass
class SwarmState:
    """All agents advanced in lockstep.

    Agent ``i`` owns row ``i`` of ``queues``, entry ``i`` of ``u`` and
    ``prev_head``, and column ``i`` of ``v_init`` and ``v_ring``; no step
    reads another agent's entries except through the transport.
    """

    config: ControllerConfig
    plant: SteadyStateMap
    objectives: list
    weights: WeightMatrix
    transport: Transport
    streams: ExplorationStreams
    u: np.ndarray
    queues: np.ndarray
    v_init: np.ndarray
    v_ring: np.ndarray
    prev_head: np.ndarray | None = None
    k: int = 0
    probe_count: int = 0
    log: dict = field(default_factory=lambda: {
        "u": [], "probe": [], "phi": [], "v": [], "delta": [], "head": []})

    @property
    def n(self) -> int:
        return len(self.u)

    @property
    def tau(self) -> int:
        return self.queues.shape[1]

    def agent(self, i: int) -> AgentState:
        depth = self.v_ring.shape[0]
        held = min(self.k, depth)
        hist = [float(self.v_ring[(self.k - held + j) % depth, i]) for j in range(held)]
        return AgentState(i, float(self.u[i]), self.queues[i].copy(), self.v_init[:, i].copy(),
                          hist, None if self.prev_head is None else float(self.prev_head[i]))

    @property
    def agents(self) -> list[AgentState]:
        return [self.agent(i) for i in range(self.n)]

    def first_row(self) -> np.ndarray:
        """Queue heads of the last iteration (``Z_{k-1}(1)``)."""
        return self.prev_head.copy()


def initialize(config: ControllerConfig, u0, plant: SteadyStateMap,
               objectives: Sequence[LocalObjective], weights: WeightMatrix,
               transport: Transport | None = None) -> SwarmState:
    """Seed the agents' queues with ``tau`` simultaneous exploratory probes at ``u0``."""
    u0 = np.array(u0, dtype=float)
    n = plant.dim
    if u0.shape != (n,) or len(objectives) != n or weights.n != n:
        raise ValueError("u0, objectives, weights and plant dimensions disagree")
    if config.constraint is not None and config.constraint.dim != n:
        raise ValueError("constraint dimension disagrees with plant")
    if config.mode == "projected" and not config.constraint.contains(u0):
        raise ValueError("u0 must be feasible in projected mode")

    agent_rngs, init_rng = make_streams(config.seed, n)
    centralized = config.baseline == "centralized"
    if centralized and config.centralized_delay == 0:
        tau, init_probes = 0, 0
        default_transport: Transport = ExactAverageTransport(weights)
    elif centralized:
        tau = init_probes = 1
        default_transport = ExactAverageTransport(weights)
    else:
        tau = init_probes = config.tau
        default_transport = Transport(weights)

    v_init = init_rng.standard_normal((tau, n))
    queues = np.zeros((n, tau))
    probes = 0
    for l in range(init_probes):
        probe = u0 + config.delta * v_init[l]
        y = plant.measure(probe)
        probes += 1
        queues[:, l] = [objectives[i].evaluate(probe[i], y[i]) for i in range(n)]

    swarm = SwarmState(
        config, plant, list(objectives), weights, transport or default_transport,
        ExplorationStreams(agent_rngs), u0, queues, v_init, np.zeros((tau + 1, n)),
        probe_count=probes,
    )
    swarm.log["u"].append(u0.copy())
    return swarm


def residual_estimator(zeta, u, u_prev, delta: float, v: np.ndarray, v_prev: np.ndarray) -> np.ndarray:
    """One-point residual gradient estimate ``(zeta(u + delta v) - zeta(u' + delta v')) v / delta``.

    ``v`` and ``v_prev`` may hold one exploration vector per row; ``zeta``
    maps a row of inputs to a scalar.
    """
    v = np.atleast_2d(v)
    v_prev = np.atleast_2d(v_prev)
    now = np.array([zeta(u + delta * row) for row in v])
    before = np.array([zeta(u_prev + delta * row) for row in v_prev])
    return ((now - before) / delta)[:, None] * v


def _apply(swarm: SwarmState, delta_k: np.ndarray) -> None:
    cfg = swarm.config
    u_next = swarm.u - (cfg.eta / cfg.delta) * delta_k
    if cfg.mode == "projected":
        u_next = cfg.constraint.project(u_next)
    swarm.u = u_next


def _probe(swarm: SwarmState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw exploration scalars, apply the perturbed input, evaluate locally."""
    v = swarm.streams.draw()
    probe = swarm.u + swarm.config.delta * v
    y = swarm.plant.measure(probe)
    swarm.probe_count += 1
    objs = swarm.objectives
    phi = np.array([objs[i].evaluate(probe[i], y[i]) for i in range(len(objs))])
    return v, probe, phi


def _record(swarm, probe, phi, v, delta_k, heads):
    log = swarm.log
    log["probe"].append(probe)
    log["phi"].append(phi)
    log["v"].append(v)
    log["delta"].append(delta_k)
    log["head"].append(heads)
    log["u"].append(swarm.u.copy())


def step(swarm: SwarmState) -> SwarmState:
    """One synchronous iteration ``k -> k + 1`` of the queue protocol."""
    k = swarm.k
    tau = swarm.tau
    depth = tau + 1
    v, probe, phi = _probe(swarm)
    swarm.v_ring[k % depth] = v

    # every agent mixes its pre-append queue in the same round
    mixed = swarm.transport.exchange(swarm.queues)
    heads = mixed[:, 0].copy()
    if k == 0:
        delta_k = heads * swarm.v_init[0]
    elif k < tau:
        delta_k = (heads - swarm.prev_head) * swarm.v_init[k]
    else:
        # oldest entry of each agent's ring buffer is its own v_(k - tau)
        delta_k = (heads - swarm.prev_head) * swarm.v_ring[(k - tau) % depth]
    swarm.prev_head = heads
    swarm.queues = np.concatenate([mixed[:, 1:], phi[:, None]], axis=1)
    _apply(swarm, delta_k)
    _record(swarm, probe, phi, v, delta_k, heads)
    swarm.k = k + 1
    return swarm


def centralized_step(swarm: SwarmState) -> SwarmState:
    """Residual update on the exact network average, without consensus delay."""
    k = swarm.k
    v, probe, phi = _probe(swarm)
    g = phi.mean()
    heads = np.full(len(phi), g)
    delta_k = heads * v if k == 0 else (heads - swarm.prev_head) * v
    swarm.prev_head = heads
    _apply(swarm, delta_k)
    _record(swarm, probe, phi, v, delta_k, heads)
    swarm.k = k + 1
    return swarm


def _advance(swarm: SwarmState) -> SwarmState:
    cfg = swarm.config
    if cfg.baseline == "centralized" and cfg.centralized_delay == 0:
        return centralized_step(swarm)
    return step(swarm)


def consensus_errors(phi: np.ndarray, v: np.ndarray, weights: WeightMatrix,
                     tau: int, delta: float) -> np.ndarray:
    """``e_j = (W^tau - 11^T/N)(phi_j - phi_{j-1}) * v_j / delta`` for ``j >= 1``.

    Row ``j`` of the result holds ``e_j``; row 0 is NaN. Diagnostic only:
    it needs the global matrix ``W``.
    """
    n = weights.n
    dev = weights.power(tau) - np.full((n, n), 1.0 / n)
    out = np.full(phi.shape, np.nan)
    if len(phi) > 1:
        out[1:] = ((phi[1:] - phi[:-1]) @ dev.T) * v[1:] / delta
    return out


def consensus_error_diagnostic(swarm: SwarmState) -> float:
    """Norm of the consensus error used in the most recent update (NaN before it exists)."""
    cfg = swarm.config
    last = swarm.k - 1
    if cfg.baseline == "centralized":
        return 0.0 if last >= 1 else math.nan
    tau = cfg.tau
    if last < tau + 1:
        return math.nan
    j = last - tau
    phi = np.array(swarm.log["phi"][j - 1: j + 1])
    v = np.array(swarm.log["v"][j - 1: j + 1])
    return float(np.linalg.norm(consensus_errors(phi, v, swarm.weights, tau, cfg.delta)[1]))


@dataclass
class RunTrace:
    """Per-iteration record of one closed-loop run.

    Arrays indexed by iteration ``k``; ``u``, ``probe``, ``objective``,
    ``rel_err`` and ``e_norm`` have ``T + 1`` rows, the last row holding the
    final input ``u_T`` (its probe-related entries are NaN). ``phi``, ``v``,
    ``delta`` and ``head`` have ``T`` rows.
    """

    u: np.ndarray
    probe: np.ndarray
    objective: np.ndarray
    rel_err: np.ndarray
    e_norm: np.ndarray
    phi: np.ndarray
    v: np.ndarray
    delta: np.ndarray
    head: np.ndarray
    u_star: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.u) - 1

    @property
    def n(self) -> int:
        return self.u.shape[1]


def build_trace(swarm: SwarmState, u_star=None, metadata: dict | None = None) -> RunTrace:
    cfg = swarm.config
    n = swarm.n
    t = swarm.k
    log = swarm.log
    u = np.array(log["u"])
    nan_row = np.full((1, n), np.nan)
    probe = np.vstack([np.array(log["probe"]).reshape(t, n), nan_row])
    phi = np.array(log["phi"]).reshape(t, n)
    v = np.array(log["v"]).reshape(t, n)
    objective = np.append(phi.mean(axis=1), np.nan)

    e_norm = np.full(t + 1, np.nan)
    if cfg.baseline == "centralized":
        e_norm[1:t] = 0.0
    elif t > cfg.tau + 1:
        errs = consensus_errors(phi, v, swarm.weights, cfg.tau, cfg.delta)
        ks = np.arange(cfg.tau + 1, t)
        e_norm[ks] = np.linalg.norm(errs[ks - cfg.tau], axis=1)

    if u_star is not None:
        u_star = np.asarray(u_star, dtype=float)
        scale = np.linalg.norm(u_star)
        dist = np.linalg.norm(u - u_star, axis=1)
        rel_err = dist / scale if scale > 0 else dist
    else:
        rel_err = np.full(t + 1, np.nan)

    meta = {
        "eta": cfg.eta, "delta": cfg.delta, "tau": cfg.tau, "horizon": t,
        "mode": cfg.mode, "baseline": cfg.baseline, "seed": cfg.seed,
        "centralized_delay": cfg.centralized_delay, "probe_count": swarm.probe_count,
        "step_size_ok": cfg.step_size_ok,
    }
    meta.update(metadata or {})
    return RunTrace(u, probe, objective, rel_err, e_norm, phi, v,
                    np.array(log["delta"]).reshape(t, n), np.array(log["head"]).reshape(t, n),
                    u_star, meta)


def run(config: ControllerConfig, plant: SteadyStateMap, objectives: Sequence[LocalObjective],
        weights: WeightMatrix, u0, u_star=None, metadata: dict | None = None,
        transport: Transport | None = None) -> RunTrace:
    """Run ``config.horizon`` iterations from ``u0`` and return the trace."""
    swarm = initialize(config, u0, plant, objectives, weights, transport)
    for _ in range(config.horizon):
        _advance(swarm)
    return build_trace(swarm, u_star, metadata)
