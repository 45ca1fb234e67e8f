"""Cell-based genotype families: validity, sampling, mutation, crossover, hashing.

Two families are supported. The NATS family assigns one of five operators to
each of the six edges of a fixed four-node DAG. The NB101 family assigns one
of three operators to the interior nodes of a DAG with up to seven nodes and
at most nine edges (counted after dead-node pruning).
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Union

import numpy as np

from .errors import (
    FamilyMismatch,
    InvalidGenotype,
    ParseError,
    UnsupportedSpace,
    ValidityExhausted,
)

RETRY_CAP = 100


class Family(str, Enum):
    NATS = "nats"
    NB101 = "nb101"


class Op(str, Enum):
    CONV1X1 = "conv1x1"
    CONV3X3 = "conv3x3"
    AVGPOOL3X3 = "avgpool3x3"
    SKIP = "skip"
    ZERO = "zero"
    MAXPOOL3X3 = "maxpool3x3"


NATS_OPS = (Op.CONV1X1, Op.CONV3X3, Op.AVGPOOL3X3, Op.SKIP, Op.ZERO)
NB101_OPS = (Op.CONV1X1, Op.CONV3X3, Op.MAXPOOL3X3)

# Edges of the four-node NATS cell DAG in lexicographic order.
NATS_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

NB101_MAX_NODES = 7
NB101_MAX_EDGES = 9


@dataclass(frozen=True)
class NatsGenotype:
    """Operator assignment for the six NATS cell edges, in NATS_EDGES order."""

    ops: tuple[Op, ...]

    @property
    def family(self) -> Family:
        return Family.NATS

    def __post_init__(self):
        if len(self.ops) != len(NATS_EDGES):
            raise InvalidGenotype(f"expected {len(NATS_EDGES)} genes, got {len(self.ops)}")
        for op in self.ops:
            if op not in NATS_OPS:
                raise InvalidGenotype(f"operator {op!r} not legal for the NATS family")


@dataclass(frozen=True)
class Nb101Genotype:
    """Upper-triangular adjacency over up to seven nodes plus interior node ops.

    Node 0 is the cell input and the last node is the output; neither carries
    an operator. Dead interior nodes (not on any input-to-output path) are
    tolerated here and removed by ``canonicalize``; the edge budget is checked
    on the pruned graph.
    """

    matrix: tuple[tuple[int, ...], ...]
    ops: tuple[Op, ...]

    @property
    def family(self) -> Family:
        return Family.NB101

    @property
    def node_count(self) -> int:
        return len(self.matrix)

    def __post_init__(self):
        v = len(self.matrix)
        if not 2 <= v <= NB101_MAX_NODES:
            raise InvalidGenotype(f"node count {v} outside [2, {NB101_MAX_NODES}]")
        for i, row in enumerate(self.matrix):
            if len(row) != v:
                raise InvalidGenotype("adjacency matrix is not square")
            for j, bit in enumerate(row):
                if bit not in (0, 1):
                    raise InvalidGenotype("adjacency entries must be 0 or 1")
                if bit and j <= i:
                    raise InvalidGenotype("adjacency must be strictly upper-triangular")
        if len(self.ops) != v - 2:
            raise InvalidGenotype(f"expected {v - 2} interior ops, got {len(self.ops)}")
        for op in self.ops:
            if op not in NB101_OPS:
                raise InvalidGenotype(f"operator {op!r} not legal for the NB101 family")
        live = _live_nodes(self.matrix)
        if not live:
            raise InvalidGenotype("no path from input to output")
        if _edge_count(self.matrix, live) > NB101_MAX_EDGES:
            raise InvalidGenotype(f"more than {NB101_MAX_EDGES} edges after pruning")

    def edges(self) -> list[tuple[int, int]]:
        v = self.node_count
        return [(i, j) for i in range(v) for j in range(i + 1, v) if self.matrix[i][j]]


Genotype = Union[NatsGenotype, Nb101Genotype]


@dataclass(frozen=True)
class SpaceDescriptor:
    """Structural bounds and operator set of one genotype family."""

    family: Family
    ops: tuple[Op, ...]
    max_nodes: int
    max_edges: int
    size: int | None  # total enumerable genotypes; None when impractical


NATS_SPACE = SpaceDescriptor(Family.NATS, NATS_OPS, max_nodes=4, max_edges=6,
                             size=len(NATS_OPS) ** len(NATS_EDGES))
NB101_SPACE = SpaceDescriptor(Family.NB101, NB101_OPS, max_nodes=NB101_MAX_NODES,
                              max_edges=NB101_MAX_EDGES, size=None)


def space_for(family: Family | str) -> SpaceDescriptor:
    return NATS_SPACE if Family(family) is Family.NATS else NB101_SPACE


def _live_nodes(matrix) -> list[int]:
    """Nodes on at least one input->output path (empty if output unreachable)."""
    v = len(matrix)
    fwd = {0}
    for j in range(1, v):
        if any(matrix[i][j] and i in fwd for i in range(j)):
            fwd.add(j)
    if v - 1 not in fwd:
        return []
    bwd = {v - 1}
    for i in range(v - 2, -1, -1):
        if any(matrix[i][j] and j in bwd for j in range(i + 1, v)):
            bwd.add(i)
    return sorted(fwd & bwd)


def _edge_count(matrix, nodes) -> int:
    keep = set(nodes)
    return sum(1 for i in keep for j in keep if j > i and matrix[i][j])


def canonicalize(g: Genotype) -> Genotype:
    """Prune dead NB101 nodes and relabel; NATS genotypes are already canonical."""
    if isinstance(g, NatsGenotype):
        return g
    live = _live_nodes(g.matrix)
    if len(live) == g.node_count:
        return g
    matrix = tuple(tuple(g.matrix[a][b] for b in live) for a in live)
    ops = tuple(g.ops[n - 1] for n in live if 0 < n < g.node_count - 1)
    return Nb101Genotype(matrix=matrix, ops=ops)


def canonical_hash(g: Genotype) -> int:
    """Stable 64-bit digest; NB101 genotypes hash by their pruned form."""
    if isinstance(g, NatsGenotype):
        payload = "nats|" + "|".join(op.value for op in g.ops)
    else:
        c = canonicalize(g)
        bits = "".join(str(c.matrix[i][j]) for i in range(c.node_count)
                       for j in range(i + 1, c.node_count))
        payload = f"nb101|{c.node_count}|{bits}|" + ",".join(op.value for op in c.ops)
    digest = hashlib.blake2b(payload.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def random_genotype(space: SpaceDescriptor, rng: np.random.Generator,
                    retry_cap: int = RETRY_CAP) -> Genotype:
    """Uniform random genotype; NB101 rejection-samples a full 7-node matrix."""
    if space.family is Family.NATS:
        picks = rng.integers(0, len(NATS_OPS), size=len(NATS_EDGES))
        return NatsGenotype(ops=tuple(NATS_OPS[k] for k in picks))
    for _ in range(retry_cap):
        v = NB101_MAX_NODES
        bits = rng.integers(0, 2, size=v * (v - 1) // 2)
        matrix = _matrix_from_bits(v, bits)
        ops = tuple(NB101_OPS[k] for k in rng.integers(0, len(NB101_OPS), size=v - 2))
        try:
            return Nb101Genotype(matrix=matrix, ops=ops)
        except InvalidGenotype:
            continue
    raise ValidityExhausted(f"no valid NB101 sample within {retry_cap} attempts")


def _matrix_from_bits(v, bits) -> tuple[tuple[int, ...], ...]:
    matrix = [[0] * v for _ in range(v)]
    k = 0
    for i in range(v):
        for j in range(i + 1, v):
            matrix[i][j] = int(bits[k])
            k += 1
    return tuple(tuple(row) for row in matrix)


def mutate(g: Genotype, rng: np.random.Generator, retry_cap: int = RETRY_CAP) -> Genotype:
    """Single uniform gene change; the child always differs from the parent."""
    if isinstance(g, NatsGenotype):
        edge = int(rng.integers(0, len(NATS_EDGES)))
        alternatives = [op for op in NATS_OPS if op != g.ops[edge]]
        new_op = alternatives[int(rng.integers(0, len(alternatives)))]
        ops = list(g.ops)
        ops[edge] = new_op
        return NatsGenotype(ops=tuple(ops))

    parent_hash = canonical_hash(g)
    v = g.node_count
    for _ in range(retry_cap):
        flip_matrix = v == 2 or rng.integers(0, 2) == 0
        if flip_matrix:
            i, j = _random_pair(v, rng)
            matrix = [list(row) for row in g.matrix]
            matrix[i][j] ^= 1
            candidate_fields = (tuple(tuple(r) for r in matrix), g.ops)
        else:
            slot = int(rng.integers(0, v - 2))
            alternatives = [op for op in NB101_OPS if op != g.ops[slot]]
            new_op = alternatives[int(rng.integers(0, len(alternatives)))]
            ops = list(g.ops)
            ops[slot] = new_op
            candidate_fields = (g.matrix, tuple(ops))
        try:
            child = Nb101Genotype(matrix=candidate_fields[0], ops=candidate_fields[1])
        except InvalidGenotype:
            continue
        if canonical_hash(child) != parent_hash:
            return child
    raise ValidityExhausted(f"no valid distinct neighbor within {retry_cap} attempts")


def _random_pair(v, rng) -> tuple[int, int]:
    k = int(rng.integers(0, v * (v - 1) // 2))
    for i in range(v):
        row = v - 1 - i
        if k < row:
            return i, i + 1 + k
        k -= row
    raise AssertionError("unreachable")


def crossover(a: Genotype, b: Genotype, rng: np.random.Generator,
              retry_cap: int = RETRY_CAP) -> Genotype:
    """Uniform per-gene recombination of two same-family parents."""
    if a.family != b.family:
        raise FamilyMismatch(f"cannot cross {a.family.value} with {b.family.value}")
    if isinstance(a, NatsGenotype):
        picks = rng.integers(0, 2, size=len(NATS_EDGES))
        ops = tuple(a.ops[i] if picks[i] == 0 else b.ops[i] for i in range(len(NATS_EDGES)))
        return NatsGenotype(ops=ops)

    am, aops = _pad_to_full(a)
    bm, bops = _pad_to_full(b)
    v = NB101_MAX_NODES
    for _ in range(retry_cap):
        matrix = [[0] * v for _ in range(v)]
        for i in range(v):
            for j in range(i + 1, v):
                matrix[i][j] = am[i][j] if rng.integers(0, 2) == 0 else bm[i][j]
        ops = []
        for slot in range(v - 2):
            if aops[slot] is not None and bops[slot] is not None:
                ops.append(aops[slot] if rng.integers(0, 2) == 0 else bops[slot])
            elif aops[slot] is not None:
                ops.append(aops[slot])
            elif bops[slot] is not None:
                ops.append(bops[slot])
            else:
                ops.append(NB101_OPS[int(rng.integers(0, len(NB101_OPS)))])
        try:
            child = Nb101Genotype(matrix=tuple(tuple(r) for r in matrix), ops=tuple(ops))
        except InvalidGenotype:
            continue
        return canonicalize(child)
    return mutate(a, rng)


def _pad_to_full(g: Nb101Genotype):
    """Align to 7 nodes: output moves to index 6, missing interior slots are None."""
    v = g.node_count
    full = NB101_MAX_NODES
    remap = {i: i for i in range(v - 1)}
    remap[v - 1] = full - 1
    matrix = [[0] * full for _ in range(full)]
    for i in range(v):
        for j in range(i + 1, v):
            if g.matrix[i][j]:
                matrix[remap[i]][remap[j]] = 1
    ops: list[Op | None] = [None] * (full - 2)
    for slot in range(v - 2):
        ops[slot] = g.ops[slot]
    return matrix, ops


def enumerate_space(space: SpaceDescriptor) -> Iterator[Genotype]:
    """Yield every NATS genotype exactly once; full NB101 enumeration is unsupported."""
    if space.family is not Family.NATS:
        raise UnsupportedSpace("full NB101 enumeration is not supported")
    for combo in itertools.product(NATS_OPS, repeat=len(NATS_EDGES)):
        yield NatsGenotype(ops=combo)


def format_genotype(g: Genotype) -> str:
    """Text encoding: nats:(op|...|op) or nb101:<upper-tri bits>:<op,...>."""
    if isinstance(g, NatsGenotype):
        return "nats:(" + "|".join(op.value for op in g.ops) + ")"
    bits = "".join(str(g.matrix[i][j]) for i in range(g.node_count)
                   for j in range(i + 1, g.node_count))
    return f"nb101:{bits}:" + ",".join(op.value for op in g.ops)


def parse_genotype(text: str) -> Genotype:
    """Inverse of format_genotype; raises ParseError on malformed input."""
    text = text.strip()
    if text.startswith("nats:"):
        body = text[len("nats:"):]
        if not (body.startswith("(") and body.endswith(")")):
            raise ParseError(f"malformed NATS genotype: {text!r}")
        names = body[1:-1].split("|")
        try:
            ops = tuple(Op(name) for name in names)
            return NatsGenotype(ops=ops)
        except (ValueError, InvalidGenotype) as exc:
            raise ParseError(f"malformed NATS genotype: {text!r} ({exc})") from exc
    if text.startswith("nb101:"):
        parts = text.split(":")
        if len(parts) != 3:
            raise ParseError(f"malformed NB101 genotype: {text!r}")
        _, bits, opspart = parts
        n_bits = len(bits)
        v = round((1 + (1 + 8 * n_bits) ** 0.5) / 2)
        if v * (v - 1) // 2 != n_bits or not set(bits) <= {"0", "1"}:
            raise ParseError(f"malformed NB101 adjacency bits: {text!r}")
        names = [s for s in opspart.split(",") if s]
        try:
            ops = tuple(Op(name) for name in names)
            matrix = _matrix_from_bits(v, [int(c) for c in bits])
            return Nb101Genotype(matrix=matrix, ops=ops)
        except (ValueError, InvalidGenotype) as exc:
            raise ParseError(f"malformed NB101 genotype: {text!r} ({exc})") from exc
    raise ParseError(f"unknown genotype family prefix: {text!r}")
