"""Materializes genotypes into networks and counts parameters and FLOPs.

A genotype is expanded against a macro skeleton (stem, stacked cells with
stride-2 residual reductions between stages, global-pool + linear head) into
a flat plan of LayerNodes, which is then given weights by the tensor engine.
Cost queries work on plans directly so feasibility checks never allocate
weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import LayerNode, Network, _pool_dims
from .errors import InvalidGenotype, ShapeMismatch
from .searchspace import (
    NATS_EDGES,
    Genotype,
    NatsGenotype,
    Nb101Genotype,
    Op,
    canonicalize,
)

_EDGE_INDEX = {edge: k for k, edge in enumerate(NATS_EDGES)}


@dataclass(frozen=True)
class MacroSkeleton:
    """Stem + staged cells + reductions + classifier head configuration.

    The desk-scale default keeps one cell per stage so metric evaluation is
    sub-second; benchmark-fidelity runs use five cells per stage.
    """

    input_shape: tuple[int, int, int] = (3, 32, 32)   # (C, H, W)
    stages: tuple[tuple[int, int], ...] = ((1, 16), (1, 32), (1, 64))  # (cells, channels)
    num_classes: int = 10

    def __post_init__(self):
        if not self.stages:
            raise ValueError("skeleton needs at least one stage")
        for cells, channels in self.stages:
            if cells < 1 or channels < 1:
                raise ValueError("cells and channels must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def stem_channels(self) -> int:
        return self.stages[0][1]


def default_skeleton() -> MacroSkeleton:
    return MacroSkeleton()


def deep_skeleton(cells_per_stage: int = 5) -> MacroSkeleton:
    return MacroSkeleton(stages=tuple((cells_per_stage, c) for c in (16, 32, 64)))


@dataclass(frozen=True)
class CostReport:
    """Trainable scalar count and FLOPs (1 MAC = 2 FLOPs, pooling counted)."""

    params: int
    flops: int


class _PlanBuilder:
    def __init__(self, c_in):
        self.nodes: list[LayerNode] = [LayerNode("input", c_out=c_in)]

    def add(self, node: LayerNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def conv_triplet(self, src, c_in, c_out, kernel, stride, label):
        """ReLU-Conv-BN, the NATS benchmark convolution block."""
        r = self.add(LayerNode("relu", (src,), label=f"{label}.relu"))
        c = self.add(LayerNode("conv", (r,), c_in=c_in, c_out=c_out,
                               kernel=kernel, stride=stride, label=f"{label}.conv"))
        return self.add(LayerNode("bn", (c,), c_in=c_out, c_out=c_out, label=f"{label}.bn"))

    def conv_bn_relu(self, src, c_in, c_out, kernel, label):
        """Conv-BN-ReLU, the NB101 benchmark convolution block."""
        c = self.add(LayerNode("conv", (src,), c_in=c_in, c_out=c_out,
                               kernel=kernel, stride=1, label=f"{label}.conv"))
        b = self.add(LayerNode("bn", (c,), c_in=c_out, c_out=c_out, label=f"{label}.bn"))
        return self.add(LayerNode("relu", (b,), label=f"{label}.relu"))


def _add_nats_cell(pb: _PlanBuilder, g: NatsGenotype, cell_input: int,
                   channels: int, label: str) -> int:
    node_out = {0: cell_input}
    for j in (1, 2, 3):
        feeds = []
        for i in range(j):
            op = g.ops[_EDGE_INDEX[(i, j)]]
            src = node_out[i]
            tag = f"{label}.e{i}{j}"
            if op is Op.ZERO:
                continue
            if op is Op.SKIP:
                feeds.append(src)
            elif op is Op.AVGPOOL3X3:
                feeds.append(pb.add(LayerNode("avgpool", (src,), c_in=channels,
                                              c_out=channels, label=tag)))
            else:
                kernel = 1 if op is Op.CONV1X1 else 3
                feeds.append(pb.conv_triplet(src, channels, channels, kernel, 1, tag))
        node_out[j] = pb.add(LayerNode("sum", tuple(feeds), c_out=channels,
                                       shape_ref=None if feeds else cell_input,
                                       label=f"{label}.n{j}"))
    return node_out[3]


def _add_nb101_cell(pb: _PlanBuilder, g: Nb101Genotype, cell_input: int,
                    channels: int, label: str) -> int:
    # aggregation by summation at constant width (concat semantics are a non-goal)
    v = g.node_count
    node_out = {0: cell_input}
    for j in range(1, v):
        feeds = tuple(node_out[i] for i in range(j) if g.matrix[i][j])
        agg = pb.add(LayerNode("sum", feeds, c_out=channels,
                               shape_ref=None if feeds else cell_input,
                               label=f"{label}.n{j}"))
        if j == v - 1:
            node_out[j] = agg
        else:
            op = g.ops[j - 1]
            tag = f"{label}.op{j}"
            if op is Op.MAXPOOL3X3:
                node_out[j] = pb.add(LayerNode("maxpool", (agg,), c_in=channels,
                                               c_out=channels, label=tag))
            else:
                kernel = 1 if op is Op.CONV1X1 else 3
                node_out[j] = pb.conv_bn_relu(agg, channels, channels, kernel, tag)
    return node_out[v - 1]


def _add_reduction(pb: _PlanBuilder, src: int, c_in: int, c_out: int, label: str) -> int:
    main = pb.conv_triplet(src, c_in, c_out, 3, 2, f"{label}.a")
    main = pb.conv_triplet(main, c_out, c_out, 3, 1, f"{label}.b")
    short = pb.add(LayerNode("conv", (src,), c_in=c_in, c_out=c_out,
                             kernel=1, stride=2, label=f"{label}.short"))
    return pb.add(LayerNode("sum", (main, short), c_out=c_out, label=f"{label}.add"))


def build_plan(g: Genotype, sk: MacroSkeleton) -> list[LayerNode]:
    """Expand a genotype into the flat layer plan (structure only, no weights)."""
    if isinstance(g, Nb101Genotype):
        g = canonicalize(g)
    c_input = sk.input_shape[0]
    pb = _PlanBuilder(c_input)
    prev = pb.add(LayerNode("conv", (0,), c_in=c_input, c_out=sk.stem_channels,
                            kernel=3, stride=1, label="stem.conv"))
    prev = pb.add(LayerNode("bn", (prev,), c_in=sk.stem_channels,
                            c_out=sk.stem_channels, label="stem.bn"))
    for s, (cells, channels) in enumerate(sk.stages):
        for k in range(cells):
            tag = f"s{s}c{k}"
            if isinstance(g, NatsGenotype):
                prev = _add_nats_cell(pb, g, prev, channels, tag)
            else:
                prev = _add_nb101_cell(pb, g, prev, channels, tag)
        if s + 1 < len(sk.stages):
            prev = _add_reduction(pb, prev, channels, sk.stages[s + 1][1], f"r{s}")
    prev = pb.add(LayerNode("gap", (prev,), c_out=sk.stages[-1][1], label="head.gap"))
    pb.add(LayerNode("linear", (prev,), c_in=sk.stages[-1][1],
                     c_out=sk.num_classes, label="head.fc"))
    return pb.nodes


def build_network(g: Genotype, sk: MacroSkeleton, rng: np.random.Generator) -> Network:
    """Build and initialize a network for the genotype under the skeleton."""
    if not isinstance(g, (NatsGenotype, Nb101Genotype)):
        raise InvalidGenotype(f"not a genotype: {g!r}")
    plan = build_plan(g, sk)
    return Network(plan, sk.input_shape, sk.num_classes, rng)


# ---------------------------------------------------------------------------
# Cost accounting


def _infer_shapes(nodes: list[LayerNode], input_shape):
    """Per-node output shape: (C, H, W) tuples, or (F,) after the gap node."""
    shapes: list[tuple] = []
    for nid, node in enumerate(nodes):
        if node.kind == "input":
            shapes.append(tuple(input_shape))
        elif node.kind == "conv":
            c, h, w = shapes[node.inputs[0]]
            if c != node.c_in:
                raise ShapeMismatch(f"conv expects {node.c_in} channels, got {c}", node_id=nid)
            ho, wo = _pool_dims(h, w, node.kernel, node.stride)
            shapes.append((node.c_out, ho, wo))
        elif node.kind in ("avgpool", "maxpool"):
            c, h, w = shapes[node.inputs[0]]
            ho, wo = _pool_dims(h, w, 3, node.stride)
            shapes.append((c, ho, wo))
        elif node.kind in ("bn", "relu"):
            shapes.append(shapes[node.inputs[0]])
        elif node.kind == "sum":
            if node.inputs:
                first = shapes[node.inputs[0]]
                for i in node.inputs[1:]:
                    if shapes[i] != first:
                        raise ShapeMismatch(
                            f"sum inputs disagree: {shapes[i]} vs {first}", node_id=nid)
                shapes.append(first)
            else:
                _, h, w = shapes[node.shape_ref]
                shapes.append((node.c_out, h, w))
        elif node.kind == "gap":
            c, _, _ = shapes[node.inputs[0]]
            shapes.append((c,))
        elif node.kind == "linear":
            shapes.append((node.c_out,))
        else:
            raise ShapeMismatch(f"unknown node kind {node.kind!r}", node_id=nid)
    return shapes


def _plan_of(net_or_plan) -> list[LayerNode]:
    return net_or_plan.nodes if isinstance(net_or_plan, Network) else net_or_plan


def count_params(net_or_plan) -> int:
    """Trainable scalars: conv weights, BN affine pairs, linear weight+bias."""
    total = 0
    for node in _plan_of(net_or_plan):
        if node.kind == "conv":
            total += node.c_out * node.c_in * node.kernel * node.kernel
        elif node.kind == "bn":
            total += 2 * node.c_out
        elif node.kind == "linear":
            total += node.c_out * (node.c_in + 1)
    return total


def count_flops(net_or_plan, input_shape=None) -> int:
    """FLOPs with 1 MAC = 2 FLOPs; pooling counted, BN/ReLU/add free."""
    plan = _plan_of(net_or_plan)
    if input_shape is None:
        if not isinstance(net_or_plan, Network):
            raise ValueError("input_shape required when counting a bare plan")
        input_shape = net_or_plan.input_shape
    shapes = _infer_shapes(plan, input_shape)
    total = 0
    for nid, node in enumerate(plan):
        if node.kind == "conv":
            c, ho, wo = shapes[nid]
            total += 2 * node.c_in * node.c_out * node.kernel * node.kernel * ho * wo
        elif node.kind in ("avgpool", "maxpool"):
            c, ho, wo = shapes[nid]
            total += 9 * ho * wo * c
        elif node.kind == "gap":
            c_in, h, w = shapes[node.inputs[0]]
            total += h * w * c_in
        elif node.kind == "linear":
            total += 2 * node.c_in * node.c_out
    return total


def genotype_cost(g: Genotype, sk: MacroSkeleton) -> CostReport:
    """Parameter and FLOP counts for a genotype without materializing weights."""
    plan = build_plan(g, sk)
    return CostReport(params=count_params(plan),
                      flops=count_flops(plan, sk.input_shape))
