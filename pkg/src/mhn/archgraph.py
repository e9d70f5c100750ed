"""Architectures as typed DAGs, plus static stride / receptive-field analysis.

Receptive fields are tracked with the usual centre-cell convention: for every
node we keep the inclusive pixel interval ``[lo, hi]`` (per axis) that cell 0
of the node's map reads from the input, so cell ``j`` reads
``[j * stride + lo, j * stride + hi]``.  Border truncation by zero padding is
ignored.  Keeping the interval rather than only its width makes ``Add`` of
two maps with different alignments exact (the union of both intervals).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

from .errors import InvalidGraph, NonIntegerStride, UnknownOutput

INPUT = "Input"
CONV = "Conv"
POOL = "Pool"
RELU = "ReLU"
ADD = "Add"
UPSAMPLE = "UpsampleX2"
OPS = (INPUT, CONV, POOL, RELU, ADD, UPSAMPLE)

# Canonical branch names, smallest stride first.
BRANCHES = ("bran-s", "bran-m", "bran-l")


@dataclass(frozen=True)
class NodeSpec:
    id: str
    op: str
    inputs: tuple[str, ...] = ()
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    dilation: int = 1
    padding: tuple[int, int] = (0, 0)
    out_channels: int | None = None
    share_group: str | None = None

    @property
    def weight_key(self) -> str:
        """Key under which this node's weights live in a WeightStore."""
        return self.share_group or self.id


@dataclass(frozen=True)
class Head:
    """Per-branch prediction head: mid conv followed by sibling cls/reg convs."""

    branch: str
    mid: str
    cls: str
    reg: str
    anchors: int


@dataclass(frozen=True)
class RcnnHead:
    """Second-stage head reading ROI-pooled cells of one branch output.

    ``graph`` consumes the pooled grid flattened into channels, i.e. an input
    of shape ``(n_rois, C * oh * ow, 1, 1)``.
    """

    source: str
    roi_size: tuple[int, int]
    fc_width: int
    graph: "ArchGraph"
    cls: str
    reg: str


@dataclass(frozen=True)
class ArchGraph:
    nodes: tuple[NodeSpec, ...]
    outputs: tuple[str, ...]
    input_channels: int = 3
    aliases: Mapping[str, str] = field(default_factory=dict)
    heads: tuple[Head, ...] = ()
    rcnn: RcnnHead | None = None
    name: str = ""

    def node(self, node_id: str) -> NodeSpec:
        return self.node_map()[node_id]

    def node_map(self) -> dict[str, NodeSpec]:
        return {n.id: n for n in self.nodes}

    @property
    def edges(self) -> dict[str, tuple[str, ...]]:
        return {n.id: n.inputs for n in self.nodes}

    def resolve(self, name: str) -> str:
        """Map an output name or alias to a node id (aliases may chain)."""
        ids = self.node_map()
        seen = set()
        while name not in ids:
            if name in seen or name not in self.aliases:
                raise UnknownOutput(f"unknown output {name!r}")
            seen.add(name)
            name = self.aliases[name]
        return name

    def head_for(self, output: str) -> Head | None:
        for h in self.heads:
            if h.branch == output:
                return h
        return None

    def with_nodes(self, extra, **changes) -> "ArchGraph":
        return replace(self, nodes=self.nodes + tuple(extra), **changes)


@dataclass(frozen=True)
class FeatureSignature:
    stride: int
    rf: tuple[int, int]
    channels: int
    conv_depth: int
    # Offset of the receptive-field interval of cell 0, per axis.
    rf_start: tuple[int, int] = (0, 0)

    @property
    def rf_end(self) -> tuple[int, int]:
        return (self.rf_start[0] + self.rf[0] - 1, self.rf_start[1] + self.rf[1] - 1)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    def __bool__(self):
        return not self.violations

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, msg: str) -> None:
        self.violations.append(msg)


def topological_order(graph: ArchGraph) -> list[str]:
    """Kahn's algorithm, ties broken by declaration order.  Raises on cycles."""
    ids = [n.id for n in graph.nodes]
    known = set(ids)
    indeg = {i: 0 for i in ids}
    users: dict[str, list[str]] = {i: [] for i in ids}
    for n in graph.nodes:
        for p in n.inputs:
            if p in known:
                indeg[n.id] += 1
                users[p].append(n.id)
    pos = {i: k for k, i in enumerate(ids)}
    ready = [i for i in ids if indeg[i] == 0]
    order = []
    while ready:
        ready.sort(key=pos.__getitem__)
        cur = ready.pop(0)
        order.append(cur)
        for u in users[cur]:
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(u)
    if len(order) != len(ids):
        stuck = sorted(set(ids) - set(order), key=pos.__getitem__)
        raise InvalidGraph(f"cycle through nodes {stuck}")
    return order


def _structural_violations(graph: ArchGraph, report: ValidationReport) -> None:
    seen = set()
    for n in graph.nodes:
        if n.id in seen:
            report.add(f"duplicate node id {n.id!r}")
        seen.add(n.id)
    inputs = [n for n in graph.nodes if n.op == INPUT]
    if len(inputs) != 1:
        report.add(f"expected exactly one Input node, found {len(inputs)}")
    if graph.input_channels < 1:
        report.add("input_channels must be positive")

    for n in graph.nodes:
        if n.op not in OPS:
            report.add(f"{n.id}: unknown op {n.op!r}")
            continue
        for p in n.inputs:
            if p not in seen:
                report.add(f"{n.id}: unknown predecessor {p!r}")
        arity = len(n.inputs)
        if n.op == INPUT and arity:
            report.add(f"{n.id}: Input node has predecessors")
        elif n.op == ADD and arity < 2:
            report.add(f"{n.id}: Add needs at least 2 predecessors, has {arity}")
        elif n.op not in (INPUT, ADD) and arity != 1:
            report.add(f"{n.id}: {n.op} needs exactly 1 predecessor, has {arity}")
        if n.stride < 1:
            report.add(f"{n.id}: stride must be >= 1")
        if n.op in (CONV, POOL):
            if min(n.kernel) < 1:
                report.add(f"{n.id}: kernel must be >= 1")
            if min(n.padding) < 0:
                report.add(f"{n.id}: padding must be >= 0")
        if n.op == CONV:
            if n.dilation < 1:
                report.add(f"{n.id}: dilation must be >= 1")
            if n.out_channels is None or n.out_channels < 1:
                report.add(f"{n.id}: Conv needs positive out_channels")
        if n.share_group is not None and n.op != CONV:
            report.add(f"{n.id}: share_group on non-Conv node")

    groups: dict[str, NodeSpec] = {}
    for n in graph.nodes:
        if n.op != CONV or n.share_group is None:
            continue
        first = groups.setdefault(n.share_group, n)
        if (n.kernel, n.dilation, n.out_channels) != (first.kernel, first.dilation, first.out_channels):
            report.add(
                f"share group {n.share_group!r}: {n.id} disagrees with {first.id} "
                "on kernel/dilation/out_channels"
            )


def validate(graph: ArchGraph) -> ValidationReport:
    """Collect every well-formedness violation; an empty report means valid."""
    report = ValidationReport()
    _structural_violations(graph, report)
    if report.violations:
        return report
    try:
        order = topological_order(graph)
    except InvalidGraph as exc:
        report.add(str(exc))
        return report

    nodes = graph.node_map()
    strides: dict[str, float] = {}
    channels: dict[str, int] = {}
    for nid in order:
        n = nodes[nid]
        if n.op == INPUT:
            strides[nid], channels[nid] = 1.0, graph.input_channels
            continue
        ins = [strides[p] for p in n.inputs]
        chans = [channels[p] for p in n.inputs]
        if n.op == ADD:
            if len(set(ins)) > 1:
                shown = ", ".join(f"{s:g}" for s in ins)
                report.add(f"stride mismatch at Add {nid}: {shown}")
            if len(set(chans)) > 1:
                report.add(f"channel mismatch at Add {nid}: {chans}")
            strides[nid], channels[nid] = max(ins), chans[0]
        elif n.op in (CONV, POOL):
            strides[nid] = ins[0] * n.stride
            channels[nid] = n.out_channels if n.op == CONV else chans[0]
        elif n.op == UPSAMPLE:
            if ins[0] < 2 or ins[0] != int(ins[0]) or int(ins[0]) % 2:
                report.add(f"non-integer stride after UpsampleX2 {nid}: {ins[0]:g}/2")
            strides[nid], channels[nid] = ins[0] / 2, chans[0]
        else:
            strides[nid], channels[nid] = ins[0], chans[0]

    input_id = next(n.id for n in graph.nodes if n.op == INPUT)
    reach = _reachable_from(graph, input_id)
    for name in graph.outputs:
        try:
            nid = graph.resolve(name)
        except UnknownOutput:
            report.add(f"declared output {name!r} does not exist")
            continue
        if nid not in reach:
            report.add(f"output {name!r} is not reachable from Input")
    for h in graph.heads:
        for nid in (h.mid, h.cls, h.reg):
            if nid not in nodes:
                report.add(f"head of {h.branch!r} references missing node {nid!r}")
    if graph.rcnn is not None:
        sub = validate(graph.rcnn.graph)
        report.violations.extend(f"rcnn: {v}" for v in sub.violations)
    return report


def _reachable_from(graph: ArchGraph, start: str) -> set[str]:
    users: dict[str, list[str]] = {}
    for n in graph.nodes:
        for p in n.inputs:
            users.setdefault(p, []).append(n.id)
    seen, stack = {start}, [start]
    while stack:
        for u in users.get(stack.pop(), ()):
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return seen


def infer_signatures(graph: ArchGraph) -> dict[str, FeatureSignature]:
    """Propagate stride, receptive field, channels and conv depth in topological order.

    Rules per op (``S`` is the incoming stride):

    * Conv / Pool: stride ``S * s``; the interval grows by ``(k - 1) * d * S``
      and shifts left by ``p * S``.
    * ReLU: identity.
    * Add: strides must agree; interval is the union; depth is the max.
    * UpsampleX2: stride ``S / 2``.  Bilinear x2 blends two neighbouring
      source cells per axis, so the interval widens by ``S``.  The interval
      is exact for even output cells; odd cells read the same width shifted
      by ``S / 2``.
    """
    report = validate(graph)
    if not report.ok:
        # Surface the upsample case with its own error type.
        for v in report.violations:
            if v.startswith("non-integer stride"):
                raise NonIntegerStride(v)
        raise InvalidGraph("; ".join(report.violations))

    nodes = graph.node_map()
    sigs: dict[str, FeatureSignature] = {}
    for nid in topological_order(graph):
        n = nodes[nid]
        if n.op == INPUT:
            sigs[nid] = FeatureSignature(1, (1, 1), graph.input_channels, 0, (0, 0))
            continue
        src = [sigs[p] for p in n.inputs]
        a = src[0]
        if n.op in (CONV, POOL):
            d = n.dilation if n.op == CONV else 1
            S = a.stride
            lo = tuple(a.rf_start[ax] - n.padding[ax] * S for ax in (0, 1))
            hi = tuple(a.rf_end[ax] + ((n.kernel[ax] - 1) * d - n.padding[ax]) * S for ax in (0, 1))
            sigs[nid] = FeatureSignature(
                stride=S * n.stride,
                rf=(hi[0] - lo[0] + 1, hi[1] - lo[1] + 1),
                channels=n.out_channels if n.op == CONV else a.channels,
                conv_depth=a.conv_depth + (n.op == CONV),
                rf_start=lo,
            )
        elif n.op == RELU:
            sigs[nid] = a
        elif n.op == ADD:
            lo = tuple(min(s.rf_start[ax] for s in src) for ax in (0, 1))
            hi = tuple(max(s.rf_end[ax] for s in src) for ax in (0, 1))
            sigs[nid] = FeatureSignature(
                stride=a.stride,
                rf=(hi[0] - lo[0] + 1, hi[1] - lo[1] + 1),
                channels=a.channels,
                conv_depth=max(s.conv_depth for s in src),
                rf_start=lo,
            )
        elif n.op == UPSAMPLE:
            S = a.stride
            lo = (a.rf_start[0] - S, a.rf_start[1] - S)
            sigs[nid] = FeatureSignature(
                stride=S // 2,
                rf=(a.rf[0] + S, a.rf[1] + S),
                channels=a.channels,
                conv_depth=a.conv_depth,
                rf_start=lo,
            )
    return sigs


@dataclass(frozen=True)
class BranchRow:
    output: str
    node: str
    stride: int
    rf: tuple[int, int]
    conv_depth: int
    channels: int


def branch_report(graph: ArchGraph, outputs=None) -> list[BranchRow]:
    """One row per declared output (or per name in ``outputs``), in declaration order."""
    names = tuple(graph.outputs if outputs is None else outputs)
    node_ids = [graph.resolve(name) for name in names]
    sigs = infer_signatures(graph)
    rows = []
    for name, nid in zip(names, node_ids):
        s = sigs[nid]
        rows.append(BranchRow(name, nid, s.stride, s.rf, s.conv_depth, s.channels))
    return rows


def format_report(rows, aliases: Mapping[str, str] | None = None) -> str:
    """Aligned text table of branch rows; ``aliases`` maps output -> display alias."""
    aliases = aliases or {}
    header = ("output", "alias", "stride", "rf", "conv_depth", "channels")
    body = [
        (
            r.output,
            aliases.get(r.output, "-"),
            str(r.stride),
            f"{r.rf[0]}x{r.rf[1]}",
            str(r.conv_depth),
            str(r.channels),
        )
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in (header, *body)]
    return "\n".join(lines)


def rename_nodes(graph: ArchGraph, mapping: Mapping[str, str]) -> ArchGraph:
    """Return a copy with node ids renamed; ids missing from ``mapping`` are kept."""
    m = lambda i: mapping.get(i, i)  # noqa: E731
    nodes = tuple(replace(n, id=m(n.id), inputs=tuple(m(p) for p in n.inputs)) for n in graph.nodes)
    aliases = {k: m(v) for k, v in graph.aliases.items()}
    heads = tuple(replace(h, mid=m(h.mid), cls=m(h.cls), reg=m(h.reg), branch=h.branch) for h in graph.heads)
    outputs = tuple(m(o) if o in graph.node_map() else o for o in graph.outputs)
    heads = tuple(replace(h, branch=m(h.branch) if h.branch in graph.node_map() else h.branch) for h in heads)
    return replace(graph, nodes=nodes, aliases=aliases, heads=heads, outputs=outputs)
