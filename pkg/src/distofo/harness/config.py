"""
Run configuration: JSON parsing, defaults and fixture construction.

The schema is documented in ``docs/config_schema.md``. Every block and every
key is optional; omitted values fall back to the 8-node DC grid experiment.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..netgraph import CommGraph, build_graph, load_edge_list, metropolis_weights, standard_graphs
from ..objective import BoxConstraint, ReducedObjective, tracking_objectives
from ..plant import AffinePlant, DcGridPlant, GridParams, SteadyStateMap, sensitivity_oracle

DEFAULTS: dict = {
    "graph": {"kind": "tree-of-fig2"},
    "plant": {
        "kind": "dc_grid",
        "capacitance": 1.0,
        "conductance": 1.0,
        "inductance": 1.0,
        "resistance": 10.0,
        "reference_injection": 1.0,
        "load_change": 1.0,
        "disturbance": 0.1,
        "step": 0.1,
        "settle_tol": 1e-10,
        "settle_max_steps": 100000,
        "convention": "auto",
    },
    "objective": {
        "scale": 1.0,
        "normalization": "mean",
        "reference": None,
        "constraint": None,
    },
    "controller": {
        "eta": 0.001,
        "delta": 0.002,
        "horizon": 50000,
        "mode": None,
        "centralized_delay": 0,
    },
    "experiment": {
        "arms": ["tau=5", "tau=50", "centralized"],
        "replicas": 20,
        "base_seed": 0,
        "output_dir": "out",
        "stride": 50,
        "u0": None,
        "workers": 1,
        "plateau_fraction": 0.2,
    },
    "bounds": {
        "tau": 5,
        "eta": None,
        "delta": None,
        "epsilon": None,
        "scale": "auto",
        "region_radius": None,
        "e0_samples": 2000,
        "e0_seed": 0,
    },
}

_GRID_KEYS = ("capacitance", "conductance", "inductance", "resistance", "reference_injection",
              "load_change", "disturbance", "step", "settle_tol", "settle_max_steps", "convention")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {path}{key!r}")
        if isinstance(base[key], dict) and key in ("graph", "plant", "objective", "controller",
                                                   "experiment", "bounds"):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be an object")
            if key in ("graph", "plant"):
                # variant-specific keys (edge lists, affine matrices) are allowed here
                merged = copy.deepcopy(base[key]) if value.get("kind", base[key].get("kind")) \
                    == base[key].get("kind") else {}
                merged.update(value)
                out[key] = merged
            else:
                out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class Arm:
    """One experimental arm: distributed with depth ``tau`` or the centralized baseline."""

    label: str
    baseline: str
    tau: int

    @classmethod
    def parse(cls, text: str) -> "Arm":
        text = text.strip()
        if text == "centralized":
            return cls(text, "centralized", 1)
        if text.startswith("tau="):
            try:
                tau = int(text[4:])
            except ValueError:
                raise ConfigError(f"bad arm {text!r}") from None
            if tau < 1:
                raise ConfigError(f"arm {text!r}: tau must be >= 1")
            return cls(text, "distributed", tau)
        raise ConfigError(f"arm must be 'tau=K' or 'centralized', got {text!r}")


@dataclass
class RunConfig:
    """Validated run configuration (a resolved copy of the JSON document)."""

    raw: dict
    source: str = "<defaults>"
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, data: dict, source: str = "<dict>", base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, data), source, base_dir or Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data, str(path), path.parent)

    # sections
    @property
    def graph(self) -> dict:
        return self.raw["graph"]

    @property
    def plant(self) -> dict:
        return self.raw["plant"]

    @property
    def objective(self) -> dict:
        return self.raw["objective"]

    @property
    def controller(self) -> dict:
        return self.raw["controller"]

    @property
    def experiment(self) -> dict:
        return self.raw["experiment"]

    @property
    def bounds(self) -> dict:
        return self.raw["bounds"]

    @property
    def arms(self) -> list[Arm]:
        return [Arm.parse(a) for a in self.experiment["arms"]]

    @property
    def seeds(self) -> list[int]:
        base = int(self.experiment["base_seed"])
        return [base + r for r in range(int(self.experiment["replicas"]))]

    @property
    def mode(self) -> str:
        mode = self.controller["mode"]
        if mode is None:
            return "unconstrained" if self.objective["constraint"] is None else "projected"
        return mode

    def config_hash(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with selected keys replaced, e.g. ``experiment={"replicas": 2}``."""
        return RunConfig.from_dict(_merge(self.raw, sections), self.source, self.base_dir)

    def validate(self) -> None:
        c = self.controller
        for key in ("eta", "delta"):
            if not _positive(c[key]):
                raise ConfigError(f"controller.{key} must be a positive number")
        if not _nonneg_int(c["horizon"]):
            raise ConfigError("controller.horizon must be a nonnegative integer")
        if c["mode"] not in (None, "unconstrained", "projected"):
            raise ConfigError("controller.mode must be 'unconstrained' or 'projected'")
        if c["centralized_delay"] not in (0, 1):
            raise ConfigError("controller.centralized_delay must be 0 or 1")
        e = self.experiment
        if not _nonneg_int(e["replicas"]) or e["replicas"] < 1:
            raise ConfigError("experiment.replicas must be a positive integer")
        if not _nonneg_int(e["stride"]) or e["stride"] < 1:
            raise ConfigError("experiment.stride must be a positive integer")
        if not _nonneg_int(e["workers"]) or e["workers"] < 1:
            raise ConfigError("experiment.workers must be a positive integer")
        if not isinstance(e["arms"], list) or not e["arms"]:
            raise ConfigError("experiment.arms must be a nonempty list")
        if not 0.0 < float(e["plateau_fraction"]) <= 1.0:
            raise ConfigError("experiment.plateau_fraction must lie in (0, 1]")
        self.arms  # parses every arm
        o = self.objective
        if o["normalization"] not in ("sum", "mean"):
            raise ConfigError("objective.normalization must be 'sum' or 'mean'")
        if not _positive(o["scale"]):
            raise ConfigError("objective.scale must be positive")
        if self.mode == "projected" and o["constraint"] is None:
            raise ConfigError("projected mode needs objective.constraint")
        if self.plant.get("kind") not in ("dc_grid", "affine"):
            raise ConfigError("plant.kind must be 'dc_grid' or 'affine'")
        b = self.bounds
        if not _nonneg_int(b["tau"]) or b["tau"] < 1:
            raise ConfigError("bounds.tau must be a positive integer")
        if b["scale"] != "auto" and not _positive(b["scale"]):
            raise ConfigError("bounds.scale must be 'auto' or a positive number")


def _positive(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) and x > 0


def _nonneg_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def build_comm_graph(cfg: RunConfig) -> CommGraph:
    g = cfg.graph
    try:
        if "edge_list" in g:
            path = Path(g["edge_list"])
            if not path.is_absolute():
                path = cfg.base_dir / path
            return load_edge_list(path, g.get("node_count"))
        if "edges" in g:
            return build_graph(g["node_count"], [tuple(e) for e in g["edges"]])
        return standard_graphs(g.get("kind", "tree-of-fig2"), g.get("n", 8))
    except (OSError, KeyError, TypeError) as exc:
        raise ConfigError(f"graph block: {exc}") from None


def build_plant(cfg: RunConfig, graph: CommGraph) -> SteadyStateMap:
    p = cfg.plant
    if p["kind"] == "affine":
        try:
            h = np.array(p["sensitivity"], dtype=float)
            b = np.array(p.get("offset", np.zeros(len(h))), dtype=float)
            plant = AffinePlant(h, b)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"affine plant block: {exc}") from None
        if plant.dim != graph.node_count:
            raise ConfigError("affine plant dimension differs from the graph size")
        return plant
    params = GridParams(**{k: p[k] for k in _GRID_KEYS if k in p})
    try:
        return DcGridPlant(graph, params)
    except ValueError as exc:
        raise ConfigError(f"dc_grid plant block: {exc}") from None


def reference_vector(cfg: RunConfig, plant: SteadyStateMap) -> np.ndarray:
    """Tracking reference: explicit, or ``V_ref = H I* + d`` for the grid, or zero."""
    ref = cfg.objective["reference"]
    if ref is not None:
        ref = np.array(ref, dtype=float)
        if ref.shape != (plant.dim,):
            raise ConfigError("objective.reference has the wrong length")
        return ref
    if isinstance(plant, DcGridPlant):
        return sensitivity_oracle(plant)[1]
    return np.zeros(plant.dim)


def initial_input(cfg: RunConfig, n: int) -> np.ndarray:
    u0 = cfg.experiment["u0"]
    if u0 is None:
        return np.zeros(n)
    u0 = np.array(u0, dtype=float)
    if u0.shape != (n,):
        raise ConfigError("experiment.u0 has the wrong length")
    return u0


@dataclass
class Fixture:
    """Everything a run needs, built from one config."""

    graph: CommGraph
    plant: SteadyStateMap
    objectives: list
    reference: np.ndarray
    u0: np.ndarray

    @property
    def reduced(self) -> ReducedObjective:
        return ReducedObjective(self.plant, self.objectives)

    def weights(self, tau: int = 1):
        return metropolis_weights(self.graph, tau)


def build_fixture(cfg: RunConfig) -> Fixture:
    """Graph, plant and objectives; a fresh plant instance on every call."""
    graph = build_comm_graph(cfg)
    plant = build_plant(cfg, graph)
    ref = reference_vector(cfg, plant)
    objs = tracking_objectives(ref, cfg.objective["scale"], cfg.objective["normalization"])
    return Fixture(graph, plant, objs, ref, initial_input(cfg, plant.dim))


def resolve_constraint(cfg: RunConfig, n: int, u_star_free: np.ndarray | None = None
                       ) -> BoxConstraint | None:
    """Box constraint of the config.

    ``{"lower": [...], "upper": [...]}`` gives explicit intervals (scalars are
    broadcast). ``{"kind": "auto", "node": i, "factor": f, "lower": lo,
    "upper": hi}`` uses ``[lo, hi]`` everywhere except that node ``i``'s upper
    bound becomes ``f`` times its unconstrained optimum.
    """
    spec = cfg.objective["constraint"]
    if spec is None:
        return None
    if not isinstance(spec, dict):
        raise ConfigError("objective.constraint must be an object or null")
    lo = np.broadcast_to(np.array(spec.get("lower", -np.inf), dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.array(spec.get("upper", np.inf), dtype=float), (n,)).copy()
    if spec.get("kind") == "auto":
        if u_star_free is None:
            raise ConfigError("auto constraint needs the unconstrained optimum")
        node = int(spec.get("node", 5))
        if not 0 <= node < n:
            raise ConfigError("objective.constraint.node out of range")
        hi[node] = float(spec.get("factor", 0.9)) * float(u_star_free[node])
    try:
        return BoxConstraint(lo, hi)
    except ValueError as exc:
        raise ConfigError(f"objective.constraint: {exc}") from None
