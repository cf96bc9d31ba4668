"""Cyclic-graph models of recurrent architectures and their memory capacity.

A :class:`CyclicGraph` has ``m`` residue classes (the period) and ``P`` node
indices per class. Index 0 is the input node, indices ``1..d`` are hidden
layers (or clockwork groups). The output node is the top hidden layer, so
an input-to-output path crosses exactly ``d`` layer edges; architectures
with an extra combining stage (a fusion head, or the clockwork readout
which gathers every group) get a separate output index.

Every edge counts 1 towards a path length, whether it moves up a layer
(``sigma == 0``) or forward in time (``sigma > 0``).

``d_i(n)`` (fewest edges from the input at time ``i`` to the output at time
``i + n``) is computed by breadth-first search on the graph unrolled over
absolute time. All ``sigma >= 0``, so a path ending at ``i + n`` never
visits a later time and unrolling ``n`` steps is exact.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence

from .errors import ConfigurationError


class ArchKind(str, Enum):
    DILATED_RNN = "dilated_rnn"
    REGULAR_SKIP_RNN = "regular_skip_rnn"
    DILATED_CNN = "dilated_cnn"
    CLOCKWORK_RNN = "clockwork_rnn"
    CUSTOM_SCHEDULE = "custom_schedule"


@dataclass(frozen=True)
class ArchSpec:
    """Declarative description of a layered recurrent (or CNN) architecture.

    ``period`` is optional everywhere except as the skip length of a
    regular-skip RNN (default ``base**(num_layers-1)``). When given for
    other kinds it must equal the largest dilation.
    """

    kind: ArchKind
    num_layers: int
    base: int = 2
    start_exponent: int = 0
    dilations: tuple[int, ...] = ()
    period: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ArchKind(self.kind))
        object.__setattr__(self, "dilations", tuple(int(s) for s in self.dilations))
        d = self.num_layers
        if d < 1:
            raise ConfigurationError("num_layers must be at least 1")
        if self.base < 2:
            raise ConfigurationError("base must be at least 2")
        if self.start_exponent < 0:
            raise ConfigurationError("start_exponent must be non-negative")
        if self.start_exponent and self.kind is not ArchKind.DILATED_RNN:
            raise ConfigurationError("start_exponent only applies to dilated_rnn")
        if self.kind is ArchKind.CUSTOM_SCHEDULE:
            s = self.dilations
            if len(s) != d:
                raise ConfigurationError(f"custom schedule needs {d} dilations, got {len(s)}")
            if s[0] != 1:
                raise ConfigurationError("custom schedule must start at dilation 1")
            if any(b % a for a, b in zip(s, s[1:])) or any(b < a for a, b in zip(s, s[1:])):
                raise ConfigurationError("each dilation must divide the next")
        elif self.dilations and self.dilations != self.layer_dilations:
            raise ConfigurationError(f"dilations {self.dilations} contradict kind {self.kind.value}")
        if self.kind is ArchKind.REGULAR_SKIP_RNN:
            if self.period is not None and self.period < 1:
                raise ConfigurationError("skip length must be positive")
        elif self.period is not None and self.period != self.m:
            raise ConfigurationError(f"period {self.period} differs from largest dilation {self.m}")

    @property
    def layer_dilations(self) -> tuple[int, ...]:
        """Per-layer time offsets (clockwork: group periods)."""
        d, M = self.num_layers, self.base
        if self.kind is ArchKind.CUSTOM_SCHEDULE:
            return self.dilations
        if self.kind is ArchKind.REGULAR_SKIP_RNN:
            return (self.skip,) * d
        l0 = self.start_exponent
        return tuple(M ** (l + l0) for l in range(d))

    @property
    def skip(self) -> int:
        if self.kind is not ArchKind.REGULAR_SKIP_RNN:
            raise ConfigurationError("only regular_skip_rnn has a skip length")
        return self.period if self.period is not None else self.base ** (self.num_layers - 1)

    @property
    def m(self) -> int:
        return max(self.layer_dilations)


@dataclass(frozen=True)
class Edge:
    src: tuple[int, int]
    dst: tuple[int, int]
    sigma: int


class CyclicGraph:
    """Directed multigraph over ``(residue, index)`` nodes with time-offset edges."""

    def __init__(
        self,
        period: int,
        labels: Sequence[str],
        edges: Sequence[Edge],
        *,
        input_node: int = 0,
        output_node: int,
        hidden_nodes: Sequence[int],
    ):
        self.period = int(period)
        self.labels = tuple(labels)
        self.edges = tuple(edges)
        self.input_node = input_node
        self.output_node = output_node
        self.hidden_nodes = tuple(hidden_nodes)
        P = len(self.labels)
        adj = [[[] for _ in range(P)] for _ in range(self.period)]
        for e in self.edges:
            (i, p), (j, q) = e.src, e.dst
            if e.sigma < 0:
                raise ConfigurationError("edges must not travel backwards in time")
            if (i + e.sigma) % self.period != j:
                raise ConfigurationError(f"edge {e} is inconsistent with period {self.period}")
            adj[i][p].append((e.sigma, q))
        self.adjacency = tuple(tuple(tuple(sorted(a)) for a in row) for row in adj)
        self._check_instantaneous_acyclic()

    @property
    def num_indices(self) -> int:
        return len(self.labels)

    @property
    def nodes(self) -> list[tuple[int, int]]:
        return [(i, p) for i in range(self.period) for p in range(self.num_indices)]

    @property
    def time_invariant(self) -> bool:
        """True when every residue class carries the same edges."""
        return all(row == self.adjacency[0] for row in self.adjacency)

    def _check_instantaneous_acyclic(self):
        # a cycle of sigma == 0 edges would have zero total time offset
        succ = defaultdict(set)
        for e in self.edges:
            if e.sigma == 0:
                succ[e.src].add(e.dst)
        if _has_cycle(succ):
            raise ConfigurationError("cycle with zero total time offset")

    def has_cycle(self) -> bool:
        """Whether some directed cycle exists (nodes taken modulo the period)."""
        succ = defaultdict(set)
        for e in self.edges:
            succ[e.src].add(e.dst)
        return _has_cycle(succ)


def _has_cycle(succ) -> bool:
    WHITE, GREY, BLACK = 0, 1, 2
    colour = defaultdict(int)
    for root in list(succ):
        if colour[root]:
            continue
        stack = [(root, iter(succ[root]))]
        colour[root] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = BLACK
                stack.pop()
            elif colour[nxt] == GREY:
                return True
            elif colour[nxt] == WHITE:
                colour[nxt] = GREY
                stack.append((nxt, iter(succ.get(nxt, ()))))
    return False


def build_cyclic_graph(spec: ArchSpec) -> CyclicGraph:
    d, m = spec.num_layers, spec.m
    kind = spec.kind
    dil = spec.layer_dilations
    labels = ["input"] + [f"h{l}" for l in range(1, d + 1)]
    hidden = list(range(1, d + 1))
    output = d
    edges: list[Edge] = []

    def add(i, p, q, sigma):
        edges.append(Edge((i, p), ((i + sigma) % m, q), sigma))

    if kind is ArchKind.CLOCKWORK_RNN:
        labels = ["input"] + [f"g{g}" for g in range(1, d + 1)] + ["output"]
        output = d + 1
        for i in range(m):
            active = [g for g in hidden if i % dil[g - 1] == 0]
            for g in active:
                add(i, 0, g, 0)
                add(i, g, g, dil[g - 1])
                add(i, g, output, 0)
                # slower groups feed faster ones when both update
                for slow in active:
                    if slow > g:
                        add(i, slow, g, 0)
        return CyclicGraph(m, labels, edges, output_node=output, hidden_nodes=hidden)

    for i in range(m):
        for l in hidden:
            s = dil[l - 1]
            if kind is ArchKind.DILATED_CNN:
                add(i, l - 1, l, 0)
                add(i, l - 1, l, s)
                continue
            add(i, l - 1, l, 0)
            if kind is ArchKind.REGULAR_SKIP_RNN:
                add(i, l, l, 1)
                add(i, l, l, s)
            else:
                add(i, l, l, s)
    if kind is ArchKind.DILATED_RNN and spec.start_exponent > 0:
        window = spec.base**spec.start_exponent
        labels.append("fusion")
        output = d + 1
        for i in range(m):
            for k in range(window):
                add(i, d, output, k)
    return CyclicGraph(m, labels, edges, output_node=output, hidden_nodes=hidden)


# -- shortest paths ---------------------------------------------------------


def _bfs_spans(g: CyclicGraph, i: int, horizon: int) -> list[Optional[int]]:
    """Fewest edges from the input at time ``i`` to the output at ``i + n``, n = 0..horizon."""
    P, m, adj = g.num_indices, g.period, g.adjacency
    dist = [-1] * ((horizon + 1) * P)
    start = g.input_node
    dist[start] = 0
    frontier = [start]
    level = 0
    while frontier:
        level += 1
        nxt = []
        for state in frontier:
            tau, p = divmod(state, P)
            for sigma, q in adj[(i + tau) % m][p]:
                t2 = tau + sigma
                if t2 <= horizon:
                    s2 = t2 * P + q
                    if dist[s2] < 0:
                        dist[s2] = level
                        nxt.append(s2)
        frontier = nxt
    out = g.output_node
    return [None if dist[n * P + out] < 0 else dist[n * P + out] for n in range(horizon + 1)]


def shortest_path_oracle(g: CyclicGraph, i: int, n: int) -> Optional[int]:
    """``d_i(n)``, or ``None`` when no path exists."""
    if n < 1:
        raise ValueError("span n must be at least 1")
    return _bfs_spans(g, i % g.period, n)[n]


@dataclass
class PathTable:
    """``values[i][n-1] = d_i(n)`` for residues ``i`` and spans ``1..horizon``."""

    period: int
    horizon: int
    values: list

    def d(self, i: int, n: int) -> Optional[int]:
        return self.values[i % self.period][n - 1]

    def worst_case(self) -> list[Optional[int]]:
        """``max_i d_i(n)`` per span; ``None`` if any start time cannot reach it."""
        out = []
        for n in range(self.horizon):
            col = [row[n] for row in self.values]
            out.append(None if any(v is None for v in col) else max(col))
        return out


def path_table(g: CyclicGraph, horizon: int | None = None) -> PathTable:
    """BFS from every residue class (one search per start time)."""
    horizon = g.period if horizon is None else int(horizon)
    rows = [_bfs_spans(g, i, horizon)[1:] for i in range(g.period)]
    return PathTable(g.period, horizon, rows)


def worst_case_lengths(g: CyclicGraph, horizon: int | None = None) -> list[Optional[int]]:
    """``max_i d_i(n)`` for ``n = 1..horizon``.

    A time-invariant graph is shift-invariant once unrolled, so a single
    search from ``i = 0`` already gives every ``d_i(n)``.
    """
    horizon = g.period if horizon is None else int(horizon)
    if g.time_invariant:
        return _bfs_spans(g, 0, horizon)[1:]
    return path_table(g, horizon).worst_case()


def mean_recurrent_length_oracle(g: CyclicGraph):
    """Exact mean over ``n = 1..m`` of ``max_i d_i(n)``; ``math.inf`` if any span is unreachable."""
    worst = worst_case_lengths(g)
    if any(v is None for v in worst):
        return math.inf
    return Fraction(sum(worst), g.period)


def _is_chain(dilations: Sequence[int]) -> bool:
    return all(a >= 1 and b % a == 0 for a, b in zip(dilations, dilations[1:])) and dilations[0] >= 1


def greedy_change(n: int, denominations: Sequence[int]) -> Optional[list[int]]:
    """Greedy coin counts (largest first); ``None`` if ``n`` cannot be made."""
    counts = [0] * len(denominations)
    rest = n
    for k in sorted(range(len(denominations)), key=lambda k: -denominations[k]):
        counts[k], rest = divmod(rest, denominations[k])
    return counts if rest == 0 else None


def digit_path_length(n: int, dilations: Sequence[int]) -> Optional[int]:
    """Path length from the change-making reduction: greedy coin count plus one edge per layer."""
    dilations = tuple(dilations)
    if not dilations or not _is_chain(dilations):
        raise ConfigurationError("each dilation must divide the next")
    counts = greedy_change(n, dilations)
    if counts is None:
        return None
    return sum(counts) + len(dilations)


def _log2_exact(m: int):
    k = m.bit_length() - 1
    return k if 1 << k == m else math.log2(m)


def mean_recurrent_length_closed_form(spec: ArchSpec):
    """Closed-form mean recurrent length as published.

    Regular skip with ``s = m``: ``(m-1)/2 + log2 m + 1/m + 1``.
    Dilated with base 2: ``(3m-1)/(2m) log2 m + 1/m + 1``.
    Exact ``Fraction`` when ``log2 m`` is an integer.
    """
    if spec.kind is ArchKind.REGULAR_SKIP_RNN:
        m = spec.skip
        if m != spec.base ** (spec.num_layers - 1):
            raise ConfigurationError("closed form assumes skip length m = base**(d-1)")
        lg = _log2_exact(m)
        if isinstance(lg, int):
            return Fraction(m - 1, 2) + lg + Fraction(1, m) + 1
        return (m - 1) / 2 + lg + 1 / m + 1
    if spec.kind is ArchKind.DILATED_RNN and spec.base == 2 and spec.start_exponent == 0:
        m = spec.m
        return Fraction(3 * m - 1, 2 * m) * _log2_exact(m) + Fraction(1, m) + 1
    raise ConfigurationError(f"no closed form for {spec.kind.value} with base {spec.base}")


@dataclass(frozen=True)
class RecurrentEdgeReport:
    """Recurrent (``sigma != 0``) edge counts under three normalisations.

    ``literal`` divides by every node, input and output included.
    ``per_hidden`` divides by hidden nodes only. ``within_layer`` counts
    only recurrent edges that stay in one layer, per hidden node.
    """

    literal: Fraction
    per_hidden: Fraction
    within_layer: Fraction


def recurrent_edges_per_node(g: CyclicGraph) -> RecurrentEdgeReport:
    recurrent = [e for e in g.edges if e.sigma != 0]
    within = [e for e in recurrent if e.src[1] == e.dst[1]]
    hidden = g.period * len(g.hidden_nodes)
    return RecurrentEdgeReport(
        Fraction(len(recurrent), len(g.nodes)),
        Fraction(len(recurrent), hidden),
        Fraction(len(within), hidden),
    )


def receptive_field(g: CyclicGraph) -> Optional[int]:
    """Number of input steps visible to an output; ``None`` when unbounded."""
    if g.has_cycle():
        return None
    max_sigma = max((e.sigma for e in g.edges), default=0)
    horizon = max(1, (g.num_indices - 1) * max_sigma)
    starts = [0] if g.time_invariant else range(g.period)
    widest = []
    for i in starts:
        spans = _bfs_spans(g, i, horizon)
        reach = [n for n, v in enumerate(spans) if v is not None]
        widest.append(max(reach) + 1 if reach else 0)
    return min(widest)


# -- schedule optimality ----------------------------------------------------


def _divisors(m: int) -> list[int]:
    return [k for k in range(1, m + 1) if m % k == 0]


def enumerate_schedules(d: int, m: int) -> list[tuple[int, ...]]:
    """Every chain ``1 = s_1 <= ... <= s_d = m`` where each term divides the next."""
    if d < 1 or m < 1:
        return []
    if d == 1:
        return [(1,)] if m == 1 else []
    divs = _divisors(m)
    out = []

    def extend(chain):
        if len(chain) == d - 1:
            out.append(chain + (m,))
            return
        for s in divs:
            if s >= chain[-1] and s % chain[-1] == 0:
                extend(chain + (s,))

    extend((1,))
    return sorted(out)


def ratio_sum_statistic(schedule: Sequence[int]) -> Fraction:
    """Average recurrent-edge usage predicted from the dilation ratios: ``(sum ratios - d + 1) / 2``."""
    ratios = [Fraction(b, a) for a, b in zip(schedule, schedule[1:])]
    return (sum(ratios, Fraction(0)) - len(schedule) + 1) / 2


@dataclass
class ScheduleRow:
    schedule: tuple[int, ...]
    mean_length: Fraction
    ratio_sum: Fraction
    ratio_stat: Fraction


@dataclass
class OptimalityReport:
    d: int
    base: int
    m: int
    claimed: tuple[int, ...]
    rows: list[ScheduleRow]
    amgm_bound: float  # (d-1) * m**(1/(d-1)), the AM-GM floor on the ratio sum
    printed_bound: float  # m**(1/(d-1)), the AM-GM style bound on the ratios
    counterexamples: list[ScheduleRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.counterexamples

    def best(self) -> ScheduleRow:
        return self.rows[0]


def verify_optimality(d: int, base: int, claimed: Sequence[int] | None = None) -> OptimalityReport:
    """Rank every divisor-chain schedule by oracle mean recurrent length.

    ``claimed`` defaults to the geometric schedule ``(1, M, ..., M**(d-1))``
    and must be the strict minimiser; any schedule doing at least as well
    is reported as a counterexample.
    """
    m = base ** (d - 1)
    geometric = tuple(base**k for k in range(d))
    claimed = geometric if claimed is None else tuple(claimed)
    rows = []
    for sched in enumerate_schedules(d, m):
        g = build_cyclic_graph(ArchSpec(ArchKind.CUSTOM_SCHEDULE, d, base, dilations=sched))
        ratios = sum(Fraction(b, a) for a, b in zip(sched, sched[1:]))
        rows.append(ScheduleRow(sched, mean_recurrent_length_oracle(g), Fraction(ratios), ratio_sum_statistic(sched)))
    rows.sort(key=lambda r: (r.mean_length, r.schedule))
    if claimed not in {r.schedule for r in rows}:
        raise ConfigurationError(f"{claimed} is not a valid schedule for d={d}, m={m}")
    target = next(r for r in rows if r.schedule == claimed)
    counter = [r for r in rows if r.schedule != claimed and r.mean_length <= target.mean_length]
    amgm = (d - 1) * m ** (1 / (d - 1)) if d > 1 else 0.0
    printed = m ** (1 / (d - 1)) if d > 1 else 0.0
    return OptimalityReport(d, base, m, claimed, rows, amgm, printed, counter)


# -- clockwork comparison ---------------------------------------------------


@dataclass
class ClockworkReport:
    d: int
    m: int
    table: PathTable
    worst: list[Optional[int]]
    mean_clockwork: object
    mean_dilated: object
    aligned_powers: dict  # n = 2**k -> d_0(n)

    @property
    def time_dependent(self) -> bool:
        return any(len({row[n] for row in self.table.values}) > 1 for n in range(self.table.horizon))

    @property
    def passed(self) -> bool:
        return self.mean_clockwork >= self.mean_dilated


def clockwork_capacity_report(d: int, base: int = 2) -> ClockworkReport:
    if not 1 <= d <= 10:
        raise ConfigurationError("clockwork comparison supports 1 <= d <= 10")
    cw = build_cyclic_graph(ArchSpec(ArchKind.CLOCKWORK_RNN, d, base))
    dil = build_cyclic_graph(ArchSpec(ArchKind.DILATED_RNN, d, base))
    table = path_table(cw)
    worst = table.worst_case()
    mean_cw = math.inf if None in worst else Fraction(sum(worst), cw.period)
    aligned = {}
    k = 0
    while base**k <= cw.period:
        aligned[base**k] = table.d(0, base**k)
        k += 1
    return ClockworkReport(d, cw.period, table, worst, mean_cw, mean_recurrent_length_oracle(dil), aligned)


# -- report used by the analyze command -------------------------------------


@dataclass
class AnalysisReport:
    spec: ArchSpec
    rows: list  # (n, max_i d_i(n) or None)
    summary: dict


def _fraction_record(value):
    if value is None:
        return None
    if value == math.inf:
        return {"value": "inf", "float": math.inf}
    if isinstance(value, Fraction):
        return {"value": f"{value.numerator}/{value.denominator}", "float": float(value)}
    return {"value": repr(value), "float": float(value)}


def analyze_architecture(spec: ArchSpec) -> AnalysisReport:
    g = build_cyclic_graph(spec)
    worst = worst_case_lengths(g)
    oracle = mean_recurrent_length_oracle(g)
    try:
        closed = mean_recurrent_length_closed_form(spec)
    except ConfigurationError:
        closed = None
    nr = recurrent_edges_per_node(g)
    rf = receptive_field(g)
    discrepancy = None
    if closed is not None and oracle != math.inf:
        discrepancy = oracle - closed
    summary = {
        "kind": spec.kind.value,
        "layers": spec.num_layers,
        "base": spec.base,
        "start_exponent": spec.start_exponent,
        "dilations": list(spec.layer_dilations),
        "period": g.period,
        "time_invariant": g.time_invariant,
        "mean_recurrent_length_oracle": _fraction_record(oracle),
        "mean_recurrent_length_closed_form": _fraction_record(closed),
        "oracle_minus_closed_form": _fraction_record(discrepancy),
        "recurrent_edges_per_node_literal": _fraction_record(nr.literal),
        "recurrent_edges_per_node_per_hidden": _fraction_record(nr.per_hidden),
        "recurrent_edges_per_node_within_layer": _fraction_record(nr.within_layer),
        "receptive_field": "unbounded" if rf is None else rf,
    }
    rows = list(zip(range(1, g.period + 1), worst))
    return AnalysisReport(spec, rows, summary)
