"""Dense float64 tensor engine with reverse-mode gradients for a fixed op set.

Supported node kinds: conv (1x1/3x3, same padding, stride 1 or 2), inference
batch-norm (suppressible affine), relu, avgpool3x3, maxpool3x3, elementwise
sum, global average pool, linear. Networks are static DAGs evaluated in
topological order; activations are cached for backward on request.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoForwardCache, ShapeMismatch


class Tensor:
    """Dense float64 array with optional accumulated gradient of equal shape."""

    __slots__ = ("values", "grad", "name")

    def __init__(self, values: np.ndarray, name: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def add_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor({self.name or 'unnamed'}, shape={self.values.shape})"


@dataclass(frozen=True)
class LayerNode:
    """One structural node of a network plan (no weights attached)."""

    kind: str                      # input|conv|bn|relu|avgpool|maxpool|sum|gap|linear
    inputs: tuple[int, ...] = ()
    c_in: int = 0
    c_out: int = 0
    kernel: int = 0                # conv only
    stride: int = 1
    shape_ref: int | None = None   # sum with no inputs: node whose H,W to mimic
    label: str = ""


# ---------------------------------------------------------------------------
# Per-kind forward/backward kernels (module level so tests can fault-inject).

def _pool_dims(h, w, k, stride):
    p = k // 2
    return (h + 2 * p - k) // stride + 1, (w + 2 * p - k) // stride + 1


def _im2col(x, k, stride):
    n, c, h, w = x.shape
    p = k // 2
    ho, wo = _pool_dims(h, w, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, k, k, ho, wo), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * ho:stride,
                                    kj:kj + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(gcols, xshape, k, stride):
    n, c, h, w = xshape
    p = k // 2
    ho, wo = _pool_dims(h, w, k, stride)
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.float64)
    g = gcols.reshape(n, c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += g[:, :, ki, kj]
    return gxp[:, :, p:p + h, p:p + w] if p else gxp


def _conv2d_forward(x, w, stride):
    c_out, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride)
    y = w.reshape(c_out, -1) @ cols
    return y.reshape(x.shape[0], c_out, ho, wo)


def _conv2d_backward(x, w, stride, gy):
    n = x.shape[0]
    c_out, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride)
    gy2 = gy.reshape(n, c_out, ho * wo)
    gw = np.matmul(gy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gcols = w.reshape(c_out, -1).T @ gy2
    gx = _col2im(gcols, x.shape, k, stride)
    return gx, gw


def _avgpool3_forward(x, stride):
    # divisor 9 everywhere: zero padding is counted in the average
    n, c, h, w = x.shape
    ho, wo = _pool_dims(h, w, 3, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros((n, c, ho, wo), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            y += xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    return y / 9.0


def _avgpool3_backward(xshape, stride, gy):
    n, c, h, w = xshape
    ho, wo = _pool_dims(h, w, 3, stride)
    gxp = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    g = gy / 9.0
    for ki in range(3):
        for kj in range(3):
            gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += g
    return gxp[:, :, 1:1 + h, 1:1 + w]


def _maxpool3_forward(x, stride):
    n, c, h, w = x.shape
    ho, wo = _pool_dims(h, w, 3, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    best = np.full((n, c, ho, wo), -np.inf, dtype=np.float64)
    arg = np.zeros((n, c, ho, wo), dtype=np.int8)
    for idx in range(9):
        ki, kj = divmod(idx, 3)
        cur = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
        better = cur > best
        best[better] = cur[better]
        arg[better] = idx
    return best, arg


def _maxpool3_backward(xshape, stride, arg, gy):
    n, c, h, w = xshape
    ho, wo = _pool_dims(h, w, 3, stride)
    gxp = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    for idx in range(9):
        ki, kj = divmod(idx, 3)
        view = gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
        view += np.where(arg == idx, gy, 0.0)
    return gxp[:, :, 1:1 + h, 1:1 + w]


def _maxpool3_tie_gap(x, stride):
    """Smallest margin between the window max and runner-up (for kink checks).

    Windows whose maximum is exactly zero are ignored: those arise
    structurally from ReLU clamping and are fixed points, not crossings.
    """
    n, c, h, w = x.shape
    ho, wo = _pool_dims(h, w, 3, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    windows = np.stack([
        xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
        for ki in range(3) for kj in range(3)
    ])
    windows = np.sort(windows, axis=0)
    top, second = windows[-1], windows[-2]
    keep = np.isfinite(second) & (top != 0.0)
    if not keep.any():
        return np.inf
    return float((top[keep] - second[keep]).min())


# ---------------------------------------------------------------------------


class Network:
    """Materialized computational graph: plan nodes plus initialized weights.

    Weight initialization is Kaiming fan-in scaled normal for conv/linear,
    scale=1 shift=0 for batch-norm affine, zero linear bias.
    """

    def __init__(self, nodes: list[LayerNode], input_shape: tuple[int, int, int],
                 num_classes: int, rng: np.random.Generator):
        self.nodes = list(nodes)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.params: dict[int, list[Tensor]] = {}
        self._consumers = [0] * len(self.nodes)
        for node in self.nodes:
            for i in node.inputs:
                self._consumers[i] += 1
            if node.kind == "sum" and not node.inputs and node.shape_ref is not None:
                self._consumers[node.shape_ref] += 1
        self._cache: dict[int, np.ndarray] | None = None
        self._argmax: dict[int, np.ndarray] = {}
        self._suppressed = False
        self._init_params(rng)

    def _init_params(self, rng):
        for nid, node in enumerate(self.nodes):
            if node.kind == "conv":
                fan_in = node.c_in * node.kernel * node.kernel
                w = rng.standard_normal((node.c_out, node.c_in, node.kernel, node.kernel))
                w *= np.sqrt(2.0 / fan_in)
                self.params[nid] = [Tensor(w, f"{node.label or node.kind}{nid}.w")]
            elif node.kind == "bn":
                self.params[nid] = [
                    Tensor(np.ones(node.c_out), f"{node.label or node.kind}{nid}.scale"),
                    Tensor(np.zeros(node.c_out), f"{node.label or node.kind}{nid}.shift"),
                ]
            elif node.kind == "linear":
                w = rng.standard_normal((node.c_out, node.c_in)) * np.sqrt(2.0 / node.c_in)
                self.params[nid] = [
                    Tensor(w, f"{node.label or node.kind}{nid}.w"),
                    Tensor(np.zeros(node.c_out), f"{node.label or node.kind}{nid}.b"),
                ]

    def parameters(self) -> list[Tensor]:
        out = []
        for nid in sorted(self.params):
            out.extend(self.params[nid])
        return out

    def n_params(self) -> int:
        return sum(p.values.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def abs_weights_(self):
        """Replace every parameter value by its absolute value, in place."""
        for p in self.parameters():
            np.abs(p.values, out=p.values)

    # -- forward ------------------------------------------------------------

    def forward(self, x: np.ndarray | Tensor, suppress_bn: bool = False,
                retain: bool = True, relu_mask_hook=None) -> np.ndarray:
        """Evaluate the graph; retain=True keeps activations for backward."""
        if isinstance(x, Tensor):
            x = x.values
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(
                f"input shape {x.shape} does not match (N, {self.input_shape})", node_id=0)
        outs: dict[int, np.ndarray] = {}
        remaining = list(self._consumers)
        self._argmax = {}
        self._suppressed = suppress_bn
        for nid, node in enumerate(self.nodes):
            ins = [outs[i] for i in node.inputs]
            if node.kind == "input":
                y = x
            elif node.kind == "conv":
                if ins[0].shape[1] != node.c_in:
                    raise ShapeMismatch(
                        f"conv expects {node.c_in} channels, got {ins[0].shape[1]}", node_id=nid)
                y = _conv2d_forward(ins[0], self.params[nid][0].values, node.stride)
            elif node.kind == "bn":
                if suppress_bn:
                    y = ins[0]
                else:
                    scale, shift = self.params[nid]
                    y = ins[0] * scale.values[None, :, None, None] \
                        + shift.values[None, :, None, None]
            elif node.kind == "relu":
                y = np.maximum(ins[0], 0.0)
                if relu_mask_hook is not None:
                    relu_mask_hook(nid, (y > 0.0).reshape(y.shape[0], -1))
            elif node.kind == "avgpool":
                y = _avgpool3_forward(ins[0], node.stride)
            elif node.kind == "maxpool":
                y, arg = _maxpool3_forward(ins[0], node.stride)
                if retain:
                    self._argmax[nid] = arg
            elif node.kind == "sum":
                if ins:
                    shape0 = ins[0].shape
                    for a in ins[1:]:
                        if a.shape != shape0:
                            raise ShapeMismatch(
                                f"sum inputs disagree: {a.shape} vs {shape0}", node_id=nid)
                    y = ins[0].copy()
                    for a in ins[1:]:
                        y += a
                else:
                    ref = outs[node.shape_ref]
                    y = np.zeros((ref.shape[0], node.c_out) + ref.shape[2:], dtype=np.float64)
            elif node.kind == "gap":
                y = ins[0].mean(axis=(2, 3))
            elif node.kind == "linear":
                if ins[0].ndim != 2 or ins[0].shape[1] != node.c_in:
                    raise ShapeMismatch(
                        f"linear expects (N, {node.c_in}), got {ins[0].shape}", node_id=nid)
                w, b = self.params[nid]
                y = ins[0] @ w.values.T + b.values
            else:
                raise ShapeMismatch(f"unknown node kind {node.kind!r}", node_id=nid)
            outs[nid] = y
            if not retain:
                # free inputs no longer needed to keep peak memory flat
                for i in node.inputs:
                    remaining[i] -= 1
                    if remaining[i] == 0:
                        outs.pop(i, None)
                if node.kind == "sum" and not node.inputs and node.shape_ref is not None:
                    remaining[node.shape_ref] -= 1
                    if remaining[node.shape_ref] == 0:
                        outs.pop(node.shape_ref, None)
        self._cache = outs if retain else None
        return outs[len(self.nodes) - 1]

    # -- backward -----------------------------------------------------------

    def backward(self, out_grad: np.ndarray | Tensor):
        """Accumulate parameter gradients; caller zeroes grads between passes."""
        if self._cache is None:
            raise NoForwardCache("backward requires a forward pass with retain=True")
        if isinstance(out_grad, Tensor):
            out_grad = out_grad.values
        out_grad = np.asarray(out_grad, dtype=np.float64)
        last = len(self.nodes) - 1
        if out_grad.shape != self._cache[last].shape:
            raise ShapeMismatch(
                f"output grad shape {out_grad.shape} != {self._cache[last].shape}",
                node_id=last)
        grads: dict[int, np.ndarray] = {last: out_grad}
        for nid in range(last, -1, -1):
            gy = grads.pop(nid, None)
            if gy is None:
                continue
            node = self.nodes[nid]
            ins = node.inputs

            def send(i, g):
                if i in grads:
                    grads[i] = grads[i] + g
                else:
                    grads[i] = g

            if node.kind == "input":
                continue
            if node.kind == "conv":
                x = self._cache[ins[0]]
                gx, gw = _conv2d_backward(x, self.params[nid][0].values, node.stride, gy)
                self.params[nid][0].add_grad(gw)
                send(ins[0], gx)
            elif node.kind == "bn":
                if self._suppressed:
                    send(ins[0], gy)
                else:
                    scale, shift = self.params[nid]
                    x = self._cache[ins[0]]
                    scale.add_grad((gy * x).sum(axis=(0, 2, 3)))
                    shift.add_grad(gy.sum(axis=(0, 2, 3)))
                    send(ins[0], gy * scale.values[None, :, None, None])
            elif node.kind == "relu":
                y = self._cache[nid]
                send(ins[0], gy * (y > 0.0))
            elif node.kind == "avgpool":
                send(ins[0], _avgpool3_backward(self._cache[ins[0]].shape, node.stride, gy))
            elif node.kind == "maxpool":
                send(ins[0], _maxpool3_backward(self._cache[ins[0]].shape, node.stride,
                                                self._argmax[nid], gy))
            elif node.kind == "sum":
                for i in ins:
                    send(i, gy)
            elif node.kind == "gap":
                x = self._cache[ins[0]]
                h, w = x.shape[2], x.shape[3]
                send(ins[0], np.broadcast_to(gy[:, :, None, None],
                                             x.shape).copy() / (h * w))
            elif node.kind == "linear":
                w, b = self.params[nid]
                x = self._cache[ins[0]]
                w.add_grad(gy.T @ x)
                b.add_grad(gy.sum(axis=0))
                send(ins[0], gy @ w.values)
        # parameters never reached by the output carry an exact zero gradient
        for p in self.parameters():
            if p.grad is None:
                p.grad = np.zeros_like(p.values)


@dataclass
class FiniteDiffReport:
    """Outcome of the analytic-vs-numeric gradient comparison."""

    max_rel_dev: float
    worst_param: str
    worst_index: int
    analytic_at_worst: float
    numeric_at_worst: float
    n_checked: int
    tolerance: float
    relu_kink_margin: float
    maxpool_tie_gap: float
    deviations: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_dev < self.tolerance

    @property
    def test_point_suspect(self) -> bool:
        """True when a ReLU kink or pooling tie could corrupt the comparison."""
        return self.relu_kink_margin < 1e-6 or self.maxpool_tie_gap < 1e-6


def finite_diff_check(net: Network, x: np.ndarray, tolerance: float = 1e-4,
                      rng: np.random.Generator | None = None,
                      max_coords: int = 200, eps: float = 1e-4,
                      suppress_bn: bool = False) -> FiniteDiffReport:
    """Compare analytic gradients against central finite differences.

    The loss is a fixed random projection of the logits. Coordinates are
    perturbed exhaustively when the parameter count allows, otherwise a
    random sample of max_coords coordinates is used.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    y = net.forward(x, suppress_bn=suppress_bn, retain=True)
    direction = rng.standard_normal(y.shape)

    kink = np.inf
    tie = np.inf
    for nid, node in enumerate(net.nodes):
        if node.kind == "relu":
            pre = net._cache[node.inputs[0]]
            nonzero = np.abs(pre[pre != 0.0])  # exact zeros are fixed points
            if nonzero.size:
                kink = min(kink, float(nonzero.min()))
        elif node.kind == "maxpool":
            tie = min(tie, _maxpool3_tie_gap(net._cache[node.inputs[0]], node.stride))

    net.zero_grad()
    net.backward(direction)
    params = net.parameters()
    analytic = [p.grad.copy() for p in params]

    flat_sizes = [p.values.size for p in params]
    total = sum(flat_sizes)
    if total <= max_coords:
        coords = np.arange(total)
    else:
        coords = rng.choice(total, size=max_coords, replace=False)

    offsets = np.cumsum([0] + flat_sizes)

    def locate(flat):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        return pi, int(flat - offsets[pi])

    def loss():
        out = net.forward(x, suppress_bn=suppress_bn, retain=False)
        return float((direction * out).sum())

    def numeric_at(values, local, saved, step):
        values[local] = saved + step
        lp = loss()
        values[local] = saved - step
        lm = loss()
        values[local] = saved
        return (lp - lm) / (2.0 * step)

    worst = (0.0, "", 0, 0.0, 0.0)
    deviations = []
    for flat in coords:
        pi, local = locate(int(flat))
        values = params[pi].values.reshape(-1)
        saved = values[local]
        a = float(analytic[pi].reshape(-1)[local])
        best = (np.inf, 0.0)
        # a kink crossing at the base step vanishes at smaller steps, while a
        # genuine backward defect deviates at every step size
        for step in (eps, eps / 10.0, eps / 100.0):
            numeric = numeric_at(values, local, saved, step)
            dev = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if dev < best[0]:
                best = (dev, numeric)
            if best[0] < tolerance:
                break
        deviations.append(best[0])
        if best[0] > worst[0]:
            worst = (best[0], params[pi].name, local, a, best[1])

    return FiniteDiffReport(
        max_rel_dev=worst[0], worst_param=worst[1], worst_index=worst[2],
        analytic_at_worst=worst[3], numeric_at_worst=worst[4],
        n_checked=len(coords), tolerance=tolerance,
        relu_kink_margin=kink, maxpool_tie_gap=tie, deviations=deviations)
