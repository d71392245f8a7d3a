"""Structural causal models over named variables.

A graph binds every endogenous variable to one mechanism and one private
exogenous noise stream.  Sampling, interventions (hard and soft), abduction and
counterfactual prediction all operate on batches internally; the single-world
API wraps the batch path.

Mechanisms are duck-typed.  Each exposes ``noise_dim``, ``forward(pa, u)`` and
``sample_noise(seed, stream, index)``; invertible ones add
``inverse(pa, x, seed, stream, index)``.  A mechanism that needs the factual
world during prediction (the latent-mediator image model) may also define
``counterfactual(pa, x, u, pa_cf, index)``.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from cfscm import mechanisms as mech_mod

# stream offset separating abduction (posterior) draws from forward draws
_ABDUCTION_STREAM = 1 << 20


class CycleError(ValueError):
    pass


class UnknownTarget(KeyError):
    pass


class MissingEvidence(KeyError):
    pass


class NonInvertible(ValueError):
    pass


class EvidenceError(ValueError):
    """Evidence value outside a variable's support."""


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str = "continuous"  # continuous | categorical | tensor
    k: int = 0
    shape: tuple = ()
    units: str = ""

    @property
    def width(self) -> int:
        """Number of feature columns this variable contributes as a parent."""
        if self.kind == "categorical":
            return self.k
        if self.kind == "tensor":
            return int(np.prod(self.shape))
        return 1

    def encode(self, values) -> np.ndarray:
        values = np.asarray(values)
        if self.kind == "categorical":
            out = np.zeros((values.shape[0], self.k))
            out[np.arange(values.shape[0]), values.astype(np.int64)] = 1.0
            return out
        return values.reshape(values.shape[0], -1).astype(float)

    def validate(self, values):
        values = np.asarray(values)
        if self.kind == "categorical":
            bad = ~((values >= 0) & (values < self.k) & (values == np.round(values)))
            if np.any(bad):
                raise EvidenceError(f"{self.name}: value {values[bad][0]!r} outside categories 0..{self.k - 1}")
        elif self.kind == "tensor":
            if values.shape[1:] != tuple(self.shape):
                raise EvidenceError(f"{self.name}: shape {values.shape[1:]} != {tuple(self.shape)}")
        if not np.all(np.isfinite(np.asarray(values, dtype=float))):
            raise EvidenceError(f"{self.name}: non-finite value")


@dataclass(frozen=True)
class ConstantMechanism:
    """Hard-intervention mechanism: ignores parents and noise."""

    value: Any
    noise_dim: int = 1
    invertible = True
    categorical = False

    def forward(self, pa, u):
        n = np.asarray(u).shape[0]
        v = np.asarray(self.value)
        return np.broadcast_to(v, (n,) + v.shape).copy()

    def inverse(self, pa, x, seed=0, stream=0, index=None):
        return np.zeros((np.asarray(x).shape[0], self.noise_dim))

    def sample_noise(self, seed, stream, index):
        return np.zeros((np.asarray(index).shape[0], self.noise_dim))


@dataclass(frozen=True)
class FunctionMechanism:
    """Wraps plain callables; without ``inverse_fn`` the node cannot be abducted."""

    forward_fn: Any
    inverse_fn: Any = None
    noise_dim: int = 1
    categorical = False

    @property
    def invertible(self) -> bool:
        return self.inverse_fn is not None

    def forward(self, pa, u):
        return np.asarray(self.forward_fn(pa, u))

    def inverse(self, pa, x, seed=0, stream=0, index=None):
        if self.inverse_fn is None:
            raise NonInvertible("mechanism has no inverse")
        return np.asarray(self.inverse_fn(pa, x)).reshape(np.asarray(x).shape[0], -1)

    def sample_noise(self, seed, stream, index):
        from cfscm import rng
        return rng.normals(seed, stream, index, self.noise_dim)


@dataclass(frozen=True)
class Constant:
    value: Any


@dataclass(frozen=True)
class Intervention:
    """name -> Constant(value) (hard) or a replacement mechanism (soft)."""

    targets: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def hard(cls, **values) -> "Intervention":
        return cls({k: Constant(v) for k, v in values.items()})

    @classmethod
    def from_pairs(cls, pairs) -> "Intervention":
        targets = {}
        for name, action in pairs:
            if name in targets:
                raise ValueError(f"variable {name!r} intervened more than once")
            targets[name] = action
        return cls(targets)

    def __bool__(self) -> bool:
        return bool(self.targets)


@dataclass(frozen=True)
class World:
    endogenous: dict
    exogenous: dict
    provenance: str = "observed"  # observed | sampled | counterfactual


class ScmGraph:
    """Immutable DAG of variables, parents and mechanisms."""

    def __init__(self, nodes, parents: Mapping[str, tuple], mechanisms: Mapping[str, Any]):
        self.nodes: tuple[VariableSpec, ...] = tuple(nodes)
        names = [v.name for v in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError("variable names must be unique")
        self.index = {n: i for i, n in enumerate(names)}
        self.parents = {n: tuple(parents.get(n, ())) for n in names}
        for n, ps in self.parents.items():
            for p in ps:
                if p not in self.index:
                    raise UnknownTarget(f"{n}: unknown parent {p!r}")
        missing = [n for n in names if n not in mechanisms]
        if missing:
            raise ValueError(f"no mechanism bound for {missing}")
        self.mechanisms = {n: mechanisms[n] for n in names}
        self.order = _toposort(names, self.parents)
        self.specs = {v.name: v for v in self.nodes}
        for n in names:
            want = self.parent_width(n)
            have = getattr(self.mechanisms[n], "n_inputs", want)
            if have != want:
                raise mech_mod.ArityError(f"{n}: mechanism takes {have} parent features, parents provide {want}")

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.nodes]

    def parent_width(self, name: str) -> int:
        return sum(self.specs[p].width for p in self.parents[name])

    def children(self, name: str) -> list[str]:
        return [n for n in self.names if name in self.parents[n]]

    def descendants(self, names) -> set[str]:
        out: set[str] = set()
        frontier = list(names)
        while frontier:
            cur = frontier.pop()
            for c in self.children(cur):
                if c not in out:
                    out.add(c)
                    frontier.append(c)
        return out

    def encode_parents(self, name: str, values: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        cols = [self.specs[p].encode(values[p]) for p in self.parents[name]]
        return np.concatenate(cols, axis=1) if cols else np.zeros((n, 0))

    def replace(self, parents=None, mechanisms=None) -> "ScmGraph":
        return ScmGraph(self.nodes, parents or self.parents, mechanisms or self.mechanisms)

    def __eq__(self, other):
        return (isinstance(other, ScmGraph) and self.nodes == other.nodes
                and self.parents == other.parents
                and all(self.mechanisms[n] is other.mechanisms[n] for n in self.names))

    def __hash__(self):
        return hash(self.nodes)

    def __repr__(self):
        edges = ", ".join(f"{p}->{n}" for n in self.names for p in self.parents[n])
        return f"ScmGraph({self.names}; {edges})"


def _toposort(names, parents) -> tuple[str, ...]:
    """Kahn's algorithm; among ready nodes the earliest declared goes first."""
    pending = {n: len(parents[n]) for n in names}
    placed: list[str] = []
    while len(placed) < len(names):
        ready = [n for n in names if pending[n] == 0 and n not in placed]
        if not ready:
            raise CycleError(f"graph has a cycle: {' -> '.join(_find_cycle(names, parents))}")
        n = ready[0]
        placed.append(n)
        for m in names:
            if n in parents[m]:
                pending[m] -= 1
    return tuple(placed)


def _find_cycle(names, parents) -> list[str]:
    state: dict[str, int] = {}
    path: list[str] = []

    def visit(n):
        state[n] = 1
        path.append(n)
        for p in parents[n]:
            if state.get(p) == 1:
                return path[path.index(p):] + [p]
            if p not in state:
                found = visit(p)
                if found:
                    return found
        path.pop()
        state[n] = 2
        return None

    for n in names:
        if n not in state:
            cyc = visit(n)
            if cyc:
                return list(reversed(cyc))
    return []


def topological_order(graph: ScmGraph) -> list[str]:
    return list(graph.order)


# -- batch machinery ----------------------------------------------------------

def _n_rows(values: Mapping[str, Any]) -> int:
    for v in values.values():
        return int(np.asarray(v).shape[0])
    return 0


def forward_batch(graph: ScmGraph, exogenous: Mapping[str, np.ndarray], n: int) -> dict[str, np.ndarray]:
    """Evaluate every mechanism in topological order under the given noises."""
    values: dict[str, np.ndarray] = {}
    for name in graph.order:
        pa = graph.encode_parents(name, values, n)
        values[name] = graph.mechanisms[name].forward(pa, exogenous[name])
    return values


def sample_noise_batch(graph: ScmGraph, seed: int, index) -> dict[str, np.ndarray]:
    index = np.asarray(index)
    return {name: graph.mechanisms[name].sample_noise(seed, graph.index[name], index) for name in graph.names}


def sample_batch(graph: ScmGraph, seed: int, n: int, index=None):
    index = np.arange(n) if index is None else np.asarray(index)
    exo = sample_noise_batch(graph, seed, index)
    return forward_batch(graph, exo, len(index)), exo


def _worlds(endo, exo, provenance) -> list[World]:
    n = _n_rows(endo)
    out = []
    for r in range(n):
        e = {k: _scalar(v[r]) for k, v in endo.items()}
        u = {k: np.asarray(v[r]) for k, v in exo.items()}
        out.append(World(e, u, provenance))
    return out


def _scalar(v):
    v = np.asarray(v)
    if v.ndim == 0:
        return v.item()
    return v


def sample_observational(graph: ScmGraph, rng_seed: int, n: int) -> list[World]:
    if n == 0:
        return []
    endo, exo = sample_batch(graph, rng_seed, n)
    return _worlds(endo, exo, "sampled")


def intervene(graph: ScmGraph, iv: Intervention) -> ScmGraph:
    """Submodel: hard targets lose their parents, soft targets get new mechanisms."""
    if not iv:
        return graph
    parents = dict(graph.parents)
    mechs = dict(graph.mechanisms)
    for name, action in iv.targets.items():
        if name not in graph.index:
            raise UnknownTarget(name)
        if isinstance(action, Constant):
            spec = graph.specs[name]
            if spec.kind == "categorical":
                spec.validate(np.asarray([action.value]))
            parents[name] = ()
            mechs[name] = ConstantMechanism(action.value, graph.mechanisms[name].noise_dim)
        else:
            mechs[name] = action
    return ScmGraph(graph.nodes, parents, mechs)


def interventional_sample(graph: ScmGraph, iv: Intervention, seed: int, n: int) -> list[World]:
    return sample_observational(intervene(graph, iv), seed, n)


def _evidence_arrays(graph: ScmGraph, evidence: Mapping[str, Any]) -> tuple[dict, int]:
    missing = [n for n in graph.names if n not in evidence]
    if missing:
        raise MissingEvidence(f"no evidence for {missing}")
    arrays = {}
    for n in graph.names:
        v = np.asarray(evidence[n])
        if graph.specs[n].kind == "tensor" and v.ndim == len(graph.specs[n].shape):
            v = v[None]
        elif graph.specs[n].kind != "tensor" and v.ndim == 0:
            v = v[None]
        graph.specs[n].validate(v)
        arrays[n] = v
    return arrays, _n_rows(arrays)


def abduct_batch(graph: ScmGraph, evidence: Mapping[str, np.ndarray], seed: int = 0, index=None) -> dict:
    arrays, n = _evidence_arrays(graph, evidence)
    index = np.arange(n) if index is None else np.asarray(index)
    exo = {}
    for name in graph.order:
        m = graph.mechanisms[name]
        if not getattr(m, "invertible", False):
            raise NonInvertible(f"mechanism for {name!r} has no inverse")
        pa = graph.encode_parents(name, arrays, n)
        exo[name] = m.inverse(pa, arrays[name], seed=seed, stream=_ABDUCTION_STREAM + graph.index[name], index=index)
    return exo


def abduct(graph: ScmGraph, evidence: Mapping[str, Any], seed: int = 0) -> World:
    arrays, _ = _evidence_arrays(graph, evidence)
    exo = abduct_batch(graph, arrays, seed)
    return _worlds(arrays, exo, "observed")[0]


def counterfactual_batch(graph: ScmGraph, evidence: Mapping[str, np.ndarray], iv: Intervention,
                         seed: int = 0, index=None, exogenous=None) -> tuple[dict, dict]:
    """Abduction, action, prediction on a batch of factual rows.

    Nodes that are neither intervened on nor downstream of an intervention keep
    their factual values bit-for-bit.
    """
    arrays, n = _evidence_arrays(graph, evidence)
    index = np.arange(n) if index is None else np.asarray(index)
    exo = abduct_batch(graph, arrays, seed, index) if exogenous is None else exogenous
    sub = intervene(graph, iv)
    affected = set(iv.targets) | graph.descendants(iv.targets)
    out: dict[str, np.ndarray] = {}
    for name in graph.order:
        if name not in affected:
            out[name] = arrays[name]
            continue
        pa_cf = sub.encode_parents(name, out, n)
        m = sub.mechanisms[name]
        if name not in iv.targets and hasattr(m, "counterfactual"):
            pa = graph.encode_parents(name, arrays, n)
            out[name] = m.counterfactual(pa, arrays[name], exo[name], pa_cf, index=index)
        else:
            out[name] = m.forward(pa_cf, exo[name])
    return out, exo


def counterfactual(graph: ScmGraph, evidence: Mapping[str, Any], iv: Intervention, seed: int = 0) -> World:
    arrays, _ = _evidence_arrays(graph, evidence)
    endo, exo = counterfactual_batch(graph, arrays, iv, seed)
    return _worlds(endo, exo, "counterfactual")[0]


# -- JSON / CSV ---------------------------------------------------------------

_KIND_RE = re.compile(r"^(continuous|categorical|tensor)(?:\((.*)\))?$")


def _parse_kind(node: dict) -> VariableSpec:
    kind = node.get("kind", "continuous")
    m = _KIND_RE.match(str(kind).replace(" ", ""))
    if not m:
        raise ValueError(f"{node.get('name')}: unknown kind {kind!r}")
    base, arg = m.groups()
    if base == "categorical":
        k = int(arg) if arg else int(node["k"])
        return VariableSpec(node["name"], base, k=k, units=node.get("units", ""))
    if base == "tensor":
        shape = tuple(int(s) for s in arg.split(",")) if arg else tuple(node["shape"])
        return VariableSpec(node["name"], base, shape=shape, units=node.get("units", ""))
    return VariableSpec(node["name"], base, units=node.get("units", ""))


def graph_from_json(doc) -> ScmGraph:
    """``{"nodes": [{"name", "kind", "parents", "mechanism"}, ...]}``."""
    if isinstance(doc, (str, Path)):
        doc = json.loads(Path(doc).read_text())
    specs = [_parse_kind(nd) for nd in doc["nodes"]]
    by_name = {s.name: s for s in specs}
    parents = {nd["name"]: tuple(nd.get("parents", ())) for nd in doc["nodes"]}
    mechs = {}
    for nd in doc["nodes"]:
        for p in parents[nd["name"]]:
            if p not in by_name:
                raise UnknownTarget(f"{nd['name']}: unknown parent {p!r}")
        width = sum(by_name[p].width for p in parents[nd["name"]])
        mechs[nd["name"]] = mech_mod.from_json(nd.get("mechanism", {}), width)
    return ScmGraph(specs, parents, mechs)


def _exo_columns(graph: ScmGraph, name: str) -> list[str]:
    d = graph.mechanisms[name].noise_dim
    return [f"u_{name}"] if d == 1 else [f"u_{name}.{j}" for j in range(d)]


def worlds_to_csv(graph: ScmGraph, worlds: list[World]) -> str:
    if any(s.kind == "tensor" for s in graph.nodes):
        raise ValueError("tensor variables cannot be written as CSV")
    header = graph.names + [c for n in graph.names for c in _exo_columns(graph, n)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for world in worlds:
        row = [repr(world.endogenous[n]) for n in graph.names]
        for n in graph.names:
            row += [repr(float(x)) for x in np.ravel(world.exogenous[n])]
        w.writerow(row)
    return buf.getvalue()


def worlds_from_csv(graph: ScmGraph, text: str, provenance: str = "observed") -> list[World]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        endo = {}
        for n in graph.names:
            v = float(row[n])
            endo[n] = int(v) if graph.specs[n].kind == "categorical" else v
        exo = {n: np.array([float(row[c]) for c in _exo_columns(graph, n)]) for n in graph.names}
        out.append(World(endo, exo, provenance))
    return out


def fit_scm(graph: ScmGraph, columns: Mapping[str, np.ndarray], config=None) -> tuple[ScmGraph, dict]:
    """Maximum-likelihood fit of every mechanism that has a ``fit`` method.

    Returns the refitted graph and per-node NLL traces.
    """
    config = config or mech_mod.FitConfig()
    arrays, n = _evidence_arrays(graph, columns)
    mechs = dict(graph.mechanisms)
    traces = {}
    for name in graph.order:
        m = graph.mechanisms[name]
        if not hasattr(m, "fit"):
            continue
        res = m.fit(graph.encode_parents(name, arrays, n), arrays[name], config)
        mechs[name] = res.mechanism
        traces[name] = res.trace
    return graph.replace(mechanisms=mechs), traces
