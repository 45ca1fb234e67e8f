"""Training-free proxy scores: log-damped synaptic flow, linear regions, skip ratio.

Gradient-flow scores follow the two-pass recipe: take absolute weights,
suppress batch-norm, forward an all-ones tensor, backward the output sum,
then combine weights with (possibly log-damped) gradients. The linear-regions
score is the log-determinant of the Hamming kernel of binary post-ReLU
activation masks over a small input batch. The skip score is purely
structural and needs no tensors.
"""

from __future__ import annotations

import struct
import threading
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import BatchShapeMismatch, OverflowToInfinity
from .netbuilder import MacroSkeleton, build_network
from .searchspace import (
    NATS_EDGES,
    Genotype,
    NatsGenotype,
    Op,
    canonical_hash,
)

DEFAULT_LR_BATCH = 64
_BATCH_SALT = 0x5A7C4


@dataclass(frozen=True)
class MetricVector:
    """Mean proxy scores for one architecture (skip score is deterministic)."""

    log_synflow: float
    linear_regions: float
    skip_score: float
    ls_repeats: tuple[float, ...] = ()
    lr_repeats: tuple[float, ...] = ()


class MetricCache:
    """Thread-safe memo of canonical-hash -> MetricVector."""

    def __init__(self):
        self._store: dict[int, MetricVector] = {}
        self._lock = threading.Lock()

    def get(self, key: int) -> MetricVector | None:
        with self._lock:
            return self._store.get(key)

    def put(self, key: int, vector: MetricVector):
        with self._lock:
            self._store[key] = vector

    def __len__(self):
        return len(self._store)


# ---------------------------------------------------------------------------
# Gradient-flow scores


def synflow_scores(net) -> tuple[float, float]:
    """(raw, log-damped) synaptic-flow scores of an already-built network.

    Mutates the network: weights become absolute values and gradients are
    overwritten.
    """
    net.abs_weights_()
    ones = np.ones((1,) + net.input_shape)
    out = net.forward(ones, suppress_bn=True, retain=True)
    net.zero_grad()
    net.backward(np.ones_like(out))
    raw = 0.0
    damped = 0.0
    for p in net.parameters():
        g = np.maximum(p.grad, 0.0)  # rounding can leave tiny negatives
        raw += float((p.values * p.grad).sum())
        damped += float((p.values * np.log1p(g)).sum())
    return raw, damped


def log_synflow(g: Genotype, sk: MacroSkeleton, rng: np.random.Generator) -> float:
    net = build_network(g, sk, rng)
    return synflow_scores(net)[1]


def synflow(g: Genotype, sk: MacroSkeleton, rng: np.random.Generator) -> float:
    net = build_network(g, sk, rng)
    raw = synflow_scores(net)[0]
    if not np.isfinite(raw):
        warnings.warn(f"synflow overflowed to {raw}", OverflowToInfinity)
    return raw


# ---------------------------------------------------------------------------
# Linear regions


def hamming_kernel(masks: np.ndarray, n_units: int | None = None) -> np.ndarray:
    """K[i][j] = n_units - hamming(mask_i, mask_j) for boolean rows."""
    m = np.asarray(masks, dtype=np.float64)
    if n_units is None:
        n_units = m.shape[1]
    dot = m @ m.T
    active = m.sum(axis=1)
    hamming = active[:, None] + active[None, :] - 2.0 * dot
    return n_units - hamming


def lr_score_from_kernel(kernel: np.ndarray) -> float:
    """log |det K|, with -inf as the singular-kernel sentinel."""
    sign, logdet = np.linalg.slogdet(kernel)
    if sign == 0 or not np.isfinite(logdet):
        return -np.inf
    return float(logdet)


def relu_mask_kernel(net, batch: np.ndarray) -> tuple[np.ndarray, int]:
    """Hamming kernel of a network's concatenated ReLU masks over a batch.

    Masks are consumed on the fly per ReLU node, so memory stays flat even
    for wide networks and large unit counts.
    """
    n = batch.shape[0]
    dot = np.zeros((n, n))
    active = np.zeros(n)
    total = 0

    def collect(_nid, mask):
        nonlocal total
        m = mask.astype(np.float64)
        dot[:] += m @ m.T
        active[:] += m.sum(axis=1)
        total += mask.shape[1]

    net.forward(batch, suppress_bn=False, retain=False, relu_mask_hook=collect)
    hamming = active[:, None] + active[None, :] - 2.0 * dot
    return total - hamming, total


def linear_regions_kernel(g: Genotype, sk: MacroSkeleton, batch: np.ndarray,
                          rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Hamming kernel of the batch's concatenated ReLU masks, plus unit count."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(sk.input_shape):
        raise BatchShapeMismatch(
            f"batch shape {batch.shape} does not match (N, {sk.input_shape})")
    if batch.shape[0] < 2:
        raise BatchShapeMismatch("linear regions needs at least two samples")
    net = build_network(g, sk, rng)
    return relu_mask_kernel(net, batch)


def linear_regions(g: Genotype, sk: MacroSkeleton, batch: np.ndarray,
                   rng: np.random.Generator) -> float:
    kernel, _ = linear_regions_kernel(g, sk, batch, rng)
    return lr_score_from_kernel(kernel)


def default_batch(sk: MacroSkeleton, seed: int,
                  n_samples: int = DEFAULT_LR_BATCH) -> np.ndarray:
    """Seeded standard-normal synthetic batch (no dataset dependency)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF,
                                                        _BATCH_SALT]))
    return rng.standard_normal((n_samples,) + tuple(sk.input_shape))


_BATCH_MAGIC = b"FRLR"


def write_batch_file(path, batch: np.ndarray):
    """16-byte header (magic, N, C, H, W as u16, reserved u32) + LE float64 data."""
    batch = np.asarray(batch, dtype="<f8")
    n, c, h, w = batch.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHHHHI", _BATCH_MAGIC, n, c, h, w, 0))
        fh.write(batch.tobytes())


def read_batch_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise BatchShapeMismatch(f"{path}: truncated header")
        magic, n, c, h, w, _ = struct.unpack("<4sHHHHI", header)
        if magic != _BATCH_MAGIC:
            raise BatchShapeMismatch(f"{path}: bad magic {magic!r}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * c * h * w:
        raise BatchShapeMismatch(f"{path}: payload size does not match header")
    return data.reshape(n, c, h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# Skip score


def _max_parallel_layers(g: NatsGenotype, start: int, end: int) -> int | None:
    """Longest layer count over start->end paths avoiding the direct edge."""
    usable = {}
    for k, (i, j) in enumerate(NATS_EDGES):
        if g.ops[k] is not Op.ZERO:
            usable.setdefault(i, []).append((j, g.ops[k]))

    best: int | None = None

    def walk(node, layers):
        nonlocal best
        for succ, op in usable.get(node, ()):
            if node == start and succ == end:
                continue  # the skip edge under evaluation
            added = layers + (0 if op is Op.SKIP else 1)
            if succ == end:
                best = added if best is None else max(best, added)
            elif succ < end:
                walk(succ, added)

    walk(start, 0)
    return best


def skip_score(g: Genotype) -> float:
    """Total layers bypassed by skip edges over the number of skip edges.

    A layer is any operation edge that is neither a skip nor a zero. Families
    without a skip operator score 0.
    """
    if not isinstance(g, NatsGenotype):
        return 0.0
    skip_edges = [edge for k, edge in enumerate(NATS_EDGES) if g.ops[k] is Op.SKIP]
    if not skip_edges:
        return 0.0
    total = 0
    for i, j in skip_edges:
        longest = _max_parallel_layers(g, i, j)
        total += longest if longest is not None else 0
    return total / len(skip_edges)


# ---------------------------------------------------------------------------
# Repetition-averaged evaluation


def evaluate(g: Genotype, sk: MacroSkeleton, repeats: int = 3,
             seed: int | np.random.SeedSequence = 0,
             batch: np.ndarray | None = None,
             cache: MetricCache | None = None) -> MetricVector:
    """Average log-synflow and linear-regions over fresh initializations.

    Per-repeat seeds come from SeedSequence(seed).spawn(repeats); both scores
    in one repeat share the derived seed (hence the same initialization). The
    batch is fixed across repeats unless a callable batch factory is given.
    Results are memoized by canonical hash when a cache is supplied.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    key = canonical_hash(g)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(repeats)
    if batch is None:
        batch = default_batch(sk, _entropy_int(root))
    ls_vals = []
    lr_vals = []
    for child in children:
        sample = batch(np.random.default_rng(child.spawn(1)[0])) if callable(batch) else batch
        ls_vals.append(log_synflow(g, sk, np.random.default_rng(child)))
        lr_vals.append(linear_regions(g, sk, sample, np.random.default_rng(child)))
    vector = MetricVector(
        log_synflow=float(np.mean(ls_vals)),
        linear_regions=float(np.mean(lr_vals)),
        skip_score=skip_score(g),
        ls_repeats=tuple(ls_vals),
        lr_repeats=tuple(lr_vals),
    )
    if cache is not None:
        cache.put(key, vector)
    return vector


def _entropy_int(ss: np.random.SeedSequence) -> int:
    ent = ss.entropy
    if isinstance(ent, (list, tuple)):
        return int(ent[0])
    return int(ent)


def proxy_panel(g: Genotype, sk: MacroSkeleton, repeats: int = 3,
                seed: int | np.random.SeedSequence = 0,
                batch: np.ndarray | None = None) -> dict[str, float]:
    """All four proxies (incl. raw synflow) with the same seed derivation as
    evaluate(); used by the correlation harness."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(repeats)
    if batch is None:
        batch = default_batch(sk, _entropy_int(root))
    raw_vals, ls_vals, lr_vals = [], [], []
    for child in children:
        net = build_network(g, sk, np.random.default_rng(child))
        raw, damped = synflow_scores(net)
        raw_vals.append(raw)
        ls_vals.append(damped)
        lr_vals.append(linear_regions(g, sk, batch, np.random.default_rng(child)))
    return {
        "log_synflow": float(np.mean(ls_vals)),
        "synflow": float(np.mean(raw_vals)),
        "linear_regions": float(np.mean(lr_vals)),
        "skip_score": skip_score(g),
    }
