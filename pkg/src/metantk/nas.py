"""Training-free architecture search by rank-sum pruning of a cell supernet.

Each round scores every operator on every multi-op edge by how removing it
changes the MetaNTK condition number (``dC``) and the linear-region count
(``dR``) of the current supernet. Operators are ranked globally by ``dC``
descending and by ``dR`` ascending. Each multi-op edge then drops its operator
with the smallest rank sum. Search stops once every edge holds one operator.

Supernet semantics: a cell has two input nodes (outputs of the previous two
cells; the stem output for both in the first cell) and ``B`` intermediate
nodes. A node is the sum of its incoming edges, and an edge is the sum of its
alive operators. The cell output is the sum of the intermediate nodes. An
affine stem maps ``d -> l`` and an affine readout maps ``l -> k``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from metantk.kernels import EmpiricalNTK, assemble_train_kernel
from metantk.linalg import Continuous, condition_number
from metantk.net import ParamLayout, _relu
from metantk.regions import ProbeSet, count_linear_regions, sample_probes
from metantk.report import emit_report
from metantk.tasks import Task


class OperatorKind(IntEnum):
    SKIP = 0
    ZERO = 1
    DENSE = 2
    DENSE_RELU = 3
    DENSE_TANH = 4
    BOTTLENECK = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name) -> "OperatorKind":
        if isinstance(name, (int, OperatorKind)):
            return cls(int(name))
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ValueError(f"unknown operator {name!r}; expected one of {[o.label for o in cls]}") from None


ALL_OPS = tuple(OperatorKind)
PROTECTED = "protected"


def default_template(nodes: int) -> tuple[tuple[int, int], ...]:
    """Every intermediate node receives an edge from every earlier node."""
    return tuple((src, dst) for dst in range(2, nodes + 2) for src in range(dst))


@dataclass(frozen=True)
class SuperNetConfig:
    """Search-space hyper-parameters.

    Args:
        input_dim: task input dimension ``d``.
        output_dim: outputs ``k``.
        width: feature width ``l``.
        num_cells: stacked cells ``C``.
        nodes: intermediate nodes per cell ``B``.
        ops: operator set placed on every edge.
        template: per-cell ``(src, dst)`` edges; nodes 0 and 1 are the inputs.
            Defaults to the dense template with ``B (B + 3) / 2`` edges.
        edge_ops: optional overrides ``{edge index within a cell: op names}``;
            the index refers to ``template``.
        sigma_w: weight scale of the Gaussian fan-in init (``sqrt(2)``: Kaiming).
        sigma_b: bias standard deviation.
    """

    input_dim: int = 2
    output_dim: int = 1
    width: int = 16
    num_cells: int = 2
    nodes: int = 3
    ops: tuple = tuple(o.label for o in ALL_OPS)
    template: Optional[tuple] = None
    edge_ops: Optional[tuple] = None
    sigma_w: float = math.sqrt(2.0)
    sigma_b: float = 0.1

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.width, self.num_cells, self.nodes) < 1:
            raise ValueError("dimensions, cells and nodes must be positive")
        object.__setattr__(self, "ops", tuple(OperatorKind.parse(o).label for o in self.ops))
        if not self.ops:
            raise ValueError("need at least one operator")
        template = default_template(self.nodes) if self.template is None else self.template
        template = tuple((int(s), int(d)) for s, d in template)
        for src, dst in template:
            if not (2 <= dst < self.nodes + 2 and 0 <= src < self.nodes + 2):
                raise ValueError(f"edge {src}->{dst} refers to a node outside the cell")
            if src >= dst:
                raise ValueError(f"edge {src}->{dst} makes the cell graph cyclic; edges must go to later nodes")
        if len(set(template)) != len(template):
            raise ValueError("duplicate edges in cell template")
        object.__setattr__(self, "template", template)
        overrides = dict(self.edge_ops or ())
        for idx in overrides:
            if not 0 <= int(idx) < len(template):
                raise ValueError(f"edge_ops index {idx} outside the template")
        object.__setattr__(
            self,
            "edge_ops",
            tuple(sorted((int(i), tuple(OperatorKind.parse(o).label for o in v)) for i, v in overrides.items())),
        )

    @property
    def bottleneck_width(self) -> int:
        return max(1, self.width // 4)


@dataclass(frozen=True)
class Topology:
    """Static structure of a supernet: everything except which ops are alive."""

    config: SuperNetConfig
    edges: tuple  # (cell, src, dst) in evaluation order
    candidates: tuple  # per edge, sorted tuple of OperatorKind values
    layout: ParamLayout = field(compare=False, repr=False)

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def _op_shapes(op: OperatorKind, l: int, h: int):
    if op in (OperatorKind.DENSE, OperatorKind.DENSE_RELU, OperatorKind.DENSE_TANH):
        return [("W", (l, l)), ("b", (l,))]
    if op == OperatorKind.BOTTLENECK:
        return [("W1", (l, h)), ("b1", (h,)), ("W2", (h, l)), ("b2", (l,))]
    return []


def _build_topology(config: SuperNetConfig) -> Topology:
    overrides = dict(config.edge_ops)
    per_cell = [
        tuple(sorted({OperatorKind.parse(o) for o in overrides.get(i, config.ops)})) for i in range(len(config.template))
    ]
    order = sorted(range(len(config.template)), key=lambda i: (config.template[i][1], config.template[i][0]))
    edges, candidates = [], []
    for c in range(config.num_cells):
        for i in order:
            edges.append((c, *config.template[i]))
            candidates.append(per_cell[i])
    l, h = config.width, config.bottleneck_width
    shapes = [("stem.W", (config.input_dim, l)), ("stem.b", (l,))]
    for e, ops in enumerate(candidates):
        for op in ops:
            shapes.extend((f"e{e}.{op.label}.{name}", shape) for name, shape in _op_shapes(op, l, h))
    shapes += [("readout.W", (l, config.output_dim)), ("readout.b", (config.output_dim,))]
    return Topology(config, tuple(edges), tuple(candidates), ParamLayout.from_shapes(shapes))


@dataclass(frozen=True, eq=False)
class CellNetwork:
    """Evaluable supernet; ``mask[e, op]`` switches operators on and off.

    Registered as a JAX pytree with ``mask`` as its only leaf, so every
    subnetwork of one topology shares compiled code.
    """

    topology: Topology
    mask: object

    activation = "relu"

    @property
    def layout(self) -> ParamLayout:
        return self.topology.layout

    @property
    def input_dim(self) -> int:
        return self.topology.config.input_dim

    @property
    def output_dim(self) -> int:
        return self.topology.config.output_dim

    @property
    def kernel_scale(self) -> float:
        return float(self.topology.config.width)

    @property
    def readout_slice(self) -> slice:
        return slice(self.layout["readout.W"].start, self.layout.size)

    def init(self, seed: int) -> np.ndarray:
        """Gaussian fan-in init; identical for every mask of one topology."""
        cfg = self.topology.config
        rng = np.random.default_rng(seed)
        flat = np.empty(self.layout.size)
        for block in self.layout.blocks:
            std = cfg.sigma_w / math.sqrt(block.shape[0]) if len(block.shape) == 2 else cfg.sigma_b
            flat[block.slice] = std * rng.standard_normal(block.size)
        return flat

    def _forward(self, params, X):
        topo, cfg = self.topology, self.topology.config
        p = self.layout.unflatten(params)
        stem = X @ p["stem.W"] + p["stem.b"]
        preacts, alive = [], []
        prev2, prev = stem, stem
        e = 0
        for _ in range(cfg.num_cells):
            nodes = {0: prev2, 1: prev}
            while e < topo.n_edges and topo.edges[e][0] == _:
                _, src, dst = topo.edges[e]
                x = nodes[src]
                out = jnp.zeros_like(x)
                for op in topo.candidates[e]:
                    m = self.mask[e, int(op)]
                    key = f"e{e}.{op.label}."
                    if op == OperatorKind.SKIP:
                        y = x
                    elif op == OperatorKind.ZERO:
                        continue
                    elif op == OperatorKind.BOTTLENECK:
                        hpre = x @ p[key + "W1"] + p[key + "b1"]
                        preacts.append(hpre)
                        alive.append(jnp.broadcast_to(m > 0, (hpre.shape[1],)))
                        y = _relu(hpre) @ p[key + "W2"] + p[key + "b2"]
                    else:
                        hpre = x @ p[key + "W"] + p[key + "b"]
                        if op == OperatorKind.DENSE_RELU:
                            preacts.append(hpre)
                            alive.append(jnp.broadcast_to(m > 0, (hpre.shape[1],)))
                            y = _relu(hpre)
                        elif op == OperatorKind.DENSE_TANH:
                            y = jnp.tanh(hpre)
                        else:
                            y = hpre
                    out = out + m * y
                nodes[dst] = nodes[dst] + out if dst in nodes else out
                e += 1
            cell_out = sum(nodes.get(j, jnp.zeros_like(stem)) for j in range(2, cfg.nodes + 2))
            prev2, prev = prev, cell_out
        out = prev @ p["readout.W"] + p["readout.b"]
        n = X.shape[0]
        H = jnp.concatenate(preacts, axis=1) if preacts else jnp.zeros((n, 0))
        mask = jnp.concatenate(alive) if alive else jnp.zeros((0,), dtype=bool)
        return out, H, mask

    def apply(self, params, X):
        return self._forward(params, X)[0]

    def hidden_preactivations(self, params, X):
        _, H, alive = self._forward(params, X)
        return H, alive


jax.tree_util.register_pytree_node(
    CellNetwork,
    lambda net: ((net.mask,), net.topology),
    lambda topo, leaves: CellNetwork(topo, leaves[0]),
)


@dataclass(frozen=True)
class SuperNet:
    """A topology plus the alive operator set of every edge."""

    topology: Topology
    alive: tuple  # per edge, sorted tuple of OperatorKind

    def __post_init__(self):
        for e, ops in enumerate(self.alive):
            if not ops:
                raise ValueError(f"edge {e} has no alive operator")
            if not set(ops) <= set(self.topology.candidates[e]):
                raise ValueError(f"edge {e} has operators outside its candidate set")

    @property
    def edges(self) -> tuple:
        return self.topology.edges

    @property
    def n_alive(self) -> int:
        return sum(len(ops) for ops in self.alive)

    @property
    def is_single_path(self) -> bool:
        return all(len(ops) == 1 for ops in self.alive)

    def key(self) -> tuple:
        return tuple(tuple(int(o) for o in ops) for ops in self.alive)

    def without(self, edge: int, op: OperatorKind) -> "SuperNet":
        ops = tuple(o for o in self.alive[edge] if o != op)
        return replace(self, alive=self.alive[:edge] + (ops,) + self.alive[edge + 1 :])

    def mask(self) -> np.ndarray:
        m = np.zeros((self.topology.n_edges, len(ALL_OPS)))
        for e, ops in enumerate(self.alive):
            m[e, [int(o) for o in ops]] = 1.0
        return m

    def network(self) -> CellNetwork:
        return CellNetwork(self.topology, jnp.asarray(self.mask()))


@dataclass(frozen=True)
class Architecture:
    """A single-path supernet: exactly one operator per edge."""

    supernet: SuperNet

    def __post_init__(self):
        if not self.supernet.is_single_path:
            raise ValueError("an architecture needs exactly one operator per edge")

    @property
    def choices(self) -> list[tuple[tuple[int, int, int], OperatorKind]]:
        return [(edge, ops[0]) for edge, ops in zip(self.supernet.edges, self.supernet.alive)]

    def to_text(self) -> str:
        cfg = self.supernet.topology.config
        lines = [f"architecture cells={cfg.num_cells} nodes={cfg.nodes} width={cfg.width}"]
        cell = None
        for (c, src, dst), op in self.choices:
            if c != cell:
                lines.append(f"cell {c}")
                cell = c
            lines.append(f"  {src} -> {dst}: {op.label}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, supernet: SuperNet) -> "Architecture":
        """Rebuild an architecture on ``supernet``'s topology from :meth:`to_text` output."""
        chosen, cell = {}, None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("architecture"):
                continue
            if m := re.fullmatch(r"cell (\d+)", line):
                cell = int(m.group(1))
                continue
            m = re.fullmatch(r"(\d+) -> (\d+): (\w+)", line)
            if m is None or cell is None:
                raise ValueError(f"line {lineno}: cannot parse {raw!r}")
            chosen[(cell, int(m.group(1)), int(m.group(2)))] = OperatorKind.parse(m.group(3))
        if set(chosen) != set(supernet.edges):
            raise ValueError("architecture edges do not match the supernet topology")
        return cls(replace(supernet, alive=tuple((chosen[e],) for e in supernet.edges)))


def build_supernet(config: SuperNetConfig) -> SuperNet:
    """All candidate operators alive on every edge."""
    topo = _build_topology(config)
    return SuperNet(topo, topo.candidates)


def materialize(net, seed: int) -> tuple[CellNetwork, np.ndarray]:
    """Evaluable network and its initial parameters for a supernet or architecture."""
    supernet = net.supernet if isinstance(net, Architecture) else net
    cell_net = supernet.network()
    return cell_net, cell_net.init(seed)


@dataclass(frozen=True)
class KernelConfig:
    """How a candidate network is scored.

    Args:
        kind: composite kernel used for the condition number.
        lam_tau: inner-loop time in kernel units (``inf``: converged inner loop).
        ridge: diagonal regularization for inversion and conditioning.
        seeds: parameter seeds; scores are averaged over them.
    """

    kind: str = "metantk"
    lam_tau: float = math.inf
    ridge: float = 1e-3
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass(frozen=True)
class ScoreRecord:
    """Rank bookkeeping for one operator; ``op_id`` orders ties."""

    op_id: tuple
    delta_C: float
    delta_R: float
    s_C: int = -1
    s_R: int = -1
    s: int = -1


def score_network(net, tasks: Sequence[Task], kernel: KernelConfig, probes: ProbeSet) -> tuple[float, float]:
    """``(C_N, R_N)`` averaged over ``kernel.seeds``.

    Raises:
        LinalgError: the regularized kernel is singular.
    """
    supernet = net.supernet if isinstance(net, Architecture) else net
    cell_net = supernet.network()
    Cs, Rs = [], []
    for seed in kernel.seeds:
        params = cell_net.init(seed)
        G = assemble_train_kernel(tasks, EmpiricalNTK(cell_net, params), Continuous(kernel.lam_tau), kernel.ridge,
                                  kernel.kind)
        Cs.append(condition_number(G.matrix, kernel.ridge))
        Rs.append(count_linear_regions(cell_net, params, probes))
    return float(np.mean(Cs)), float(np.mean(Rs))


class _ScoreCache:
    def __init__(self, tasks, kernel, probes):
        self.tasks, self.kernel, self.probes = tasks, kernel, probes
        self.store: dict = {}

    def __call__(self, supernet: SuperNet) -> tuple[float, float]:
        key = supernet.key()
        if key not in self.store:
            self.store[key] = score_network(supernet, self.tasks, self.kernel, self.probes)
        return self.store[key]


def delta_scores(
    net: SuperNet,
    edge: int,
    op,
    tasks: Sequence[Task],
    kernel: KernelConfig,
    probes: ProbeSet,
    scorer=None,
):
    """``(C(N) - C(N without op), R(N) - R(N without op))`` or ``PROTECTED``
    when ``op`` is the last operator on its edge."""
    op = OperatorKind.parse(op)
    if op not in net.alive[edge]:
        raise ValueError(f"operator {op.label} is not alive on edge {edge}")
    if len(net.alive[edge]) == 1:
        return PROTECTED
    scorer = scorer or _ScoreCache(tasks, kernel, probes)
    C, R = scorer(net)
    C_wo, R_wo = scorer(net.without(edge, op))
    return C - C_wo, R - R_wo


def importance_ranks(deltas: Sequence[ScoreRecord]) -> list[ScoreRecord]:
    """Fill in 0-based ranks: ``s_C`` over ``dC`` descending, ``s_R`` over ``dR``
    ascending, ties by ascending ``op_id``; ``s = s_C + s_R``."""
    for r in deltas:
        if not (math.isfinite(r.delta_C) and math.isfinite(r.delta_R)):
            raise ValueError(f"non-finite delta for operator {r.op_id}")
    by_C = sorted(deltas, key=lambda r: (-r.delta_C, r.op_id))
    by_R = sorted(deltas, key=lambda r: (r.delta_R, r.op_id))
    s_C = {r.op_id: i for i, r in enumerate(by_C)}
    s_R = {r.op_id: i for i, r in enumerate(by_R)}
    return [replace(r, s_C=s_C[r.op_id], s_R=s_R[r.op_id], s=s_C[r.op_id] + s_R[r.op_id]) for r in deltas]


def prune_round(net: SuperNet, records: Sequence[ScoreRecord]) -> tuple[SuperNet, list]:
    """Drop the lowest-``s`` operator (ties: lowest id) from every multi-op edge.

    Records carry ``op_id = (edge, op)``.

    Returns:
        The pruned supernet and the pruned ``op_id`` list.
    """
    by_edge: dict = {}
    for r in records:
        by_edge.setdefault(r.op_id[0], []).append(r)
    pruned = []
    for edge in sorted(by_edge):
        if len(net.alive[edge]) < 2:
            continue
        worst = min(by_edge[edge], key=lambda r: (r.s, r.op_id))
        net = net.without(edge, OperatorKind(worst.op_id[1]))
        pruned.append(worst.op_id)
    return net, pruned


@dataclass(frozen=True)
class SearchConfig:
    """Search settings: kernel scoring plus the region probe set."""

    kernel: KernelConfig = KernelConfig()
    probe_count: int = 512
    probe_generation: str = "cube"
    probe_seed: int = 0
    max_rounds: int = 64


AUDIT_HEADER = ["round", "edge", "cell", "src", "dst", "op", "delta_C", "delta_R", "s_C", "s_R", "s", "pruned"]


def search(supernet: SuperNet, tasks: Sequence[Task], config: SearchConfig = SearchConfig()):
    """Prune until single-path.

    Returns:
        ``(architecture, audit)`` where ``audit`` lists one row per scored or
        protected operator in (round, edge, op) order; see ``AUDIT_HEADER``.
    """
    probes = sample_probes(supernet.topology.config.input_dim, config.probe_count, config.probe_generation,
                           config.probe_seed)
    scorer = _ScoreCache(list(tasks), config.kernel, probes)
    audit = []
    net = supernet
    rnd = 0
    while not net.is_single_path:
        rnd += 1
        if rnd > config.max_rounds:
            raise RuntimeError(f"search did not reach a single path within {config.max_rounds} rounds")
        records, protected = [], []
        for e, ops in enumerate(net.alive):
            for op in ops:
                d = delta_scores(net, e, op, tasks, config.kernel, probes, scorer)
                if d is PROTECTED:
                    protected.append((e, int(op)))
                else:
                    records.append(ScoreRecord((e, int(op)), *d))
        ranked = importance_ranks(records)
        net, pruned = prune_round(net, ranked)
        pruned = set(pruned)
        rows = [(r.op_id, r) for r in ranked] + [(pid, None) for pid in protected]
        for (e, op), r in sorted(rows, key=lambda x: x[0]):
            c, src, dst = net.edges[e]
            label = OperatorKind(op).label
            if r is None:
                audit.append([rnd, e, c, src, dst, label, "", "", "", "", "", PROTECTED])
            else:
                audit.append([rnd, e, c, src, dst, label, r.delta_C, r.delta_R, r.s_C, r.s_R, r.s,
                              "yes" if (e, op) in pruned else "no"])
    return Architecture(net), audit


def write_audit(path, audit):
    return emit_report(path, AUDIT_HEADER, audit)
