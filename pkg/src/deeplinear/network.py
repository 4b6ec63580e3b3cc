"""Deep linear networks: architecture, loss, gradients and gradient descent."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import matlin
from .errors import ContractViolation

DIVERGENCE_LOSS = 1e12

CONVERGED = "converged"
ITERATION_CAP = "iteration-cap"
DIVERGED = "diverged"


@dataclass(frozen=True)
class NetSpec:
    """Depth-N architecture given by its layer widths ``dims = [d_0, ..., d_N]``."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 2:
            raise ContractViolation("dims needs at least two entries (depth >= 1)")
        if any(d < 1 for d in dims):
            raise ContractViolation(f"dims must be positive, got {dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def uniform(cls, depth: int, width: int) -> NetSpec:
        return cls((width,) * (depth + 1))

    @property
    def depth(self) -> int:
        return len(self.dims) - 1

    @property
    def full_rank_capable(self) -> bool:
        """Every hidden width is at least min(d_0, d_N)."""
        hidden = self.dims[1:-1]
        return not hidden or min(hidden) >= min(self.dims[0], self.dims[-1])

    def layer_shape(self, j: int) -> tuple[int, int]:
        """Shape of layer ``j`` (1-based): d_j x d_{j-1}."""
        return self.dims[j], self.dims[j - 1]


@dataclass(frozen=True)
class WeightStack:
    """Layers ``W_1 .. W_N`` stored in ``layers[0] .. layers[N-1]``."""

    spec: NetSpec
    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        layers = tuple(np.asarray(w, dtype=np.float64) for w in self.layers)
        if len(layers) != self.spec.depth:
            raise ContractViolation(f"expected {self.spec.depth} layers, got {len(layers)}")
        for j, w in enumerate(layers, start=1):
            if w.shape != self.spec.layer_shape(j):
                raise ContractViolation(
                    f"layer {j} has shape {w.shape}, expected {self.spec.layer_shape(j)}"
                )
        object.__setattr__(self, "layers", layers)

    @classmethod
    def from_layers(cls, layers: Sequence) -> WeightStack:
        mats = [matlin.as_matrix(w, f"layer {j}") for j, w in enumerate(layers, start=1)]
        dims = [mats[0].shape[1]] + [w.shape[0] for w in mats]
        return cls(NetSpec(tuple(dims)), tuple(mats))

    @property
    def depth(self) -> int:
        return self.spec.depth

    def to_json(self) -> dict:
        return {
            "dims": list(self.spec.dims),
            "layers": [[float(x) for x in w.ravel()] for w in self.layers],
        }

    @classmethod
    def from_json(cls, obj: dict) -> WeightStack:
        spec = NetSpec(tuple(obj["dims"]))
        layers = []
        for j, flat in enumerate(obj["layers"], start=1):
            arr = np.array(flat, dtype=np.float64)
            rows, cols = spec.layer_shape(j)
            if arr.size != rows * cols:
                raise ContractViolation(f"layer {j} has {arr.size} entries, expected {rows * cols}")
            layers.append(arr.reshape(rows, cols))
        return cls(spec, tuple(layers))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> WeightStack:
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Problem:
    """Whitened regression target ``phi`` (= Lambda_yx) and the additive loss constant."""

    phi: np.ndarray
    opt_const: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "phi", matlin.as_matrix(self.phi, "phi"))

    def to_json(self) -> dict:
        return {
            "shape": list(self.phi.shape),
            "phi": [float(x) for x in self.phi.ravel()],
            "opt_const": float(self.opt_const),
        }

    @classmethod
    def from_json(cls, obj: dict) -> Problem:
        phi = np.array(obj["phi"], dtype=np.float64).reshape(obj["shape"])
        return cls(phi, float(obj.get("opt_const", 0.0)))


def end_to_end(w: WeightStack) -> np.ndarray:
    """The product ``W_N ... W_1``."""
    out = w.layers[0]
    for layer in w.layers[1:]:
        out = layer @ out
    return out


def _check_problem(w: WeightStack, p: Problem) -> None:
    expected = (w.spec.dims[-1], w.spec.dims[0])
    if p.phi.shape != expected:
        raise ContractViolation(f"phi has shape {p.phi.shape}, network maps to {expected}")


def loss(w: WeightStack, p: Problem) -> float:
    """0.5 * ||W_{1:N} - phi||_F^2 (the additive constant is not included)."""
    _check_problem(w, p)
    r = end_to_end(w) - p.phi
    return 0.5 * float(np.sum(r * r))


def _gradients(layers: Sequence[np.ndarray], phi: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    n = len(layers)
    # prefix[j] = W_j ... W_1 for j = 1..n; prefix[0] stands for the identity.
    prefix: list[np.ndarray | None] = [None]
    for j, layer in enumerate(layers):
        prefix.append(layer if j == 0 else layer @ prefix[j])
    residual = prefix[n] - phi
    grads: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    # suffix = W_N ... W_{j+1}, None meaning the identity.
    suffix = None
    for j in range(n, 0, -1):
        g = residual if suffix is None else suffix.T @ residual
        if prefix[j - 1] is not None:
            g = g @ prefix[j - 1].T
        grads[j - 1] = g
        layer = layers[j - 1]
        suffix = layer if suffix is None else suffix @ layer
    return grads, residual


def gradients(w: WeightStack, p: Problem) -> list[np.ndarray]:
    """Per-layer gradients ``W_{j+1:N}^T (W_{1:N} - phi) W_{1:j-1}^T``."""
    _check_problem(w, p)
    grads, _ = _gradients(w.layers, p.phi)
    return grads


def gd_step(w: WeightStack, p: Problem, eta: float) -> WeightStack:
    """One simultaneous gradient-descent update of every layer."""
    if eta < 0:
        raise ContractViolation(f"learning rate must be nonnegative, got {eta}")
    grads = gradients(w, p)
    return WeightStack(w.spec, tuple(layer - eta * g for layer, g in zip(w.layers, grads)))


def balancedness(layers: Sequence[np.ndarray]) -> float:
    """max_j ||W_{j+1}^T W_{j+1} - W_j W_j^T||_F (0 for a single layer)."""
    delta = 0.0
    for lower, upper in zip(layers[:-1], layers[1:]):
        diff = upper.T @ upper - lower @ lower.T
        delta = max(delta, float(np.sqrt(np.sum(diff * diff))))
    return delta


@dataclass(frozen=True)
class Monitors:
    """Which per-iteration diagnostics ``train`` records, and how often."""

    delta: bool = False
    sigma_min: bool = False
    margin: bool = False
    layer_norms: bool = False
    weight_scale: bool = False
    stride: int = 1

    @classmethod
    def all(cls, stride: int = 1) -> Monitors:
        return cls(True, True, True, True, True, stride)

    @property
    def any(self) -> bool:
        return self.delta or self.sigma_min or self.margin or self.layer_norms or self.weight_scale


@dataclass
class TrainTrace:
    """Loss at every iteration plus monitor values at the recorded iterations.

    ``loss[t]`` is the loss after ``t`` steps. Monitor arrays are aligned with
    ``monitor_t``; disabled monitors are ``None``.
    """

    loss: np.ndarray
    status: str
    eta: float
    depth: int
    monitors: Monitors
    monitor_t: np.ndarray
    delta: np.ndarray | None = None
    sigma_min: np.ndarray | None = None
    margin: np.ndarray | None = None
    layer_norms: np.ndarray | None = None
    weight_scale: np.ndarray | None = None
    final: WeightStack | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        """Number of gradient steps taken."""
        return len(self.loss) - 1

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def rows(self) -> list[dict]:
        rows = []
        for k, t in enumerate(self.monitor_t):
            row = {"t": int(t), "loss": float(self.loss[t])}
            for name in ("delta", "sigma_min", "margin", "weight_scale"):
                series = getattr(self, name)
                if series is not None:
                    row[name] = float(series[k])
            if self.layer_norms is not None:
                for j, v in enumerate(self.layer_norms[k], start=1):
                    row[f"norm_W{j}"] = float(v)
            rows.append(row)
        return rows

    def write_csv(self, path) -> None:
        """Write one row per recorded iteration (loss-only rows when monitors are off)."""
        if self.monitors.any:
            rows = self.rows()
        else:
            rows = [{"t": t, "loss": float(v)} for t, v in enumerate(self.loss)]
        write_rows(path, rows)


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def write_rows(path, rows: list[dict]) -> None:
    """CSV with a header row and 17-significant-digit floats."""
    if not rows:
        Path(path).write_text("")
        return
    names = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in rows:
            writer.writerow(
                [format_float(row[k]) if isinstance(row[k], float) else row[k] for k in names]
            )


class _Recorder:
    def __init__(self, monitors: Monitors, depth: int, phi: np.ndarray):
        self.m = monitors
        self.t: list[int] = []
        self.delta: list[float] = []
        self.sigma: list[float] = []
        self.margin: list[float] = []
        self.norms: list[list[float]] = []
        self.scale: list[float] = []
        self.depth = depth
        self.phi = phi
        self.phi_sigma_min = matlin.sigma_min(phi) if monitors.margin else 0.0

    def record(self, t: int, layers: Sequence[np.ndarray], e2e: np.ndarray) -> None:
        m = self.m
        self.t.append(t)
        if m.delta:
            self.delta.append(balancedness(layers))
        if m.sigma_min:
            self.sigma.append(matlin.sigma_min(e2e))
        if m.margin:
            self.margin.append(self.phi_sigma_min - matlin.frobenius(e2e - self.phi))
        if m.layer_norms:
            self.norms.append([matlin.sigma_max(w) for w in layers])
        if m.weight_scale:
            self.scale.append(min(matlin.frobenius(w @ w.T) for w in layers))

    def trace(self, losses, status, eta, final) -> TrainTrace:
        m = self.m

        def arr(flag, values):
            return np.array(values, dtype=np.float64) if flag else None

        return TrainTrace(
            loss=np.array(losses, dtype=np.float64),
            status=status,
            eta=eta,
            depth=self.depth,
            monitors=m,
            monitor_t=np.array(self.t, dtype=np.int64),
            delta=arr(m.delta, self.delta),
            sigma_min=arr(m.sigma_min, self.sigma),
            margin=arr(m.margin, self.margin),
            layer_norms=(
                np.array(self.norms, dtype=np.float64).reshape(len(self.t), self.depth)
                if m.layer_norms
                else None
            ),
            weight_scale=arr(m.weight_scale, self.scale),
            final=final,
        )


def train(
    w0: WeightStack,
    p: Problem,
    eta: float,
    eps: float,
    max_iters: int,
    monitors: Monitors = Monitors(),
    observer: Callable[[int, WeightStack], None] | None = None,
) -> TrainTrace:
    """Run gradient descent until the loss is at most ``eps``, ``max_iters``
    steps have been taken, or the iterates blow up (loss above 1e12 or a
    non-finite weight).

    ``observer(t, weights)`` is called at every iteration including t = 0.
    """
    if eps <= 0:
        raise ContractViolation(f"eps must be positive, got {eps}")
    if max_iters < 1:
        raise ContractViolation(f"max_iters must be >= 1, got {max_iters}")
    if monitors.stride < 1:
        raise ContractViolation("monitor stride must be >= 1")
    _check_problem(w0, p)
    if observer is None and all(d == 1 for d in w0.spec.dims):
        return _train_scalar(w0, p, eta, eps, max_iters, monitors)

    rec = _Recorder(monitors, w0.depth, p.phi)
    layers = list(w0.layers)
    phi = p.phi
    e2e = end_to_end(w0)
    r = e2e - phi
    losses = [0.5 * float(np.sum(r * r))]
    if monitors.any:
        rec.record(0, layers, e2e)
    if observer is not None:
        observer(0, w0)
    status = CONVERGED if losses[0] <= eps else None
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while status is None:
            grads, _ = _gradients(layers, phi)
            layers = [w - eta * g for w, g in zip(layers, grads)]
            t += 1
            e2e = layers[0]
            for w in layers[1:]:
                e2e = w @ e2e
            r = e2e - phi
            cur = 0.5 * float(np.sum(r * r))
            losses.append(cur)
            finite = math.isfinite(cur) and all(np.all(np.isfinite(w)) for w in layers)
            if not finite or cur > DIVERGENCE_LOSS:
                status = DIVERGED
            elif cur <= eps:
                status = CONVERGED
            elif t >= max_iters:
                status = ITERATION_CAP
            if monitors.any and finite and (t % monitors.stride == 0 or status is not None):
                rec.record(t, layers, e2e)
            if observer is not None:
                observer(t, WeightStack(w0.spec, tuple(layers)))
    return rec.trace(losses, status, eta, WeightStack(w0.spec, tuple(layers)))


def _train_scalar(w0, p, eta, eps, max_iters, monitors) -> TrainTrace:
    # Same iteration as the dense path with every matrix 1x1, on Python floats.
    n = w0.depth
    ws = [float(w[0, 0]) for w in w0.layers]
    phi = float(p.phi[0, 0])
    phi_smin = abs(phi)
    stride = monitors.stride
    mt, md, ms, mm, mn, mw = [], [], [], [], [], []

    def record(t, ws, prod):
        mt.append(t)
        if monitors.delta:
            md.append(max((abs(ws[j + 1] * ws[j + 1] - ws[j] * ws[j]) for j in range(n - 1)), default=0.0))
        if monitors.sigma_min:
            ms.append(abs(prod))
        if monitors.margin:
            mm.append(phi_smin - abs(prod - phi))
        if monitors.layer_norms:
            mn.append([abs(x) for x in ws])
        if monitors.weight_scale:
            mw.append(min(x * x for x in ws))

    prod = math.prod(ws)
    r0 = prod - phi
    losses = [0.5 * r0 * r0]
    if monitors.any:
        record(0, ws, prod)
    status = CONVERGED if losses[0] <= eps else None
    t = 0
    while status is None:
        r = prod - phi
        if n == 1:
            ws = [ws[0] - eta * r]
        elif n == 2:
            a, b = ws
            ws = [a - eta * r * b, b - eta * r * a]
        else:
            pre = [1.0] * (n + 1)
            for j in range(n):
                pre[j + 1] = pre[j] * ws[j]
            suf = 1.0
            new = [0.0] * n
            for j in range(n - 1, -1, -1):
                new[j] = ws[j] - eta * r * pre[j] * suf
                suf *= ws[j]
            ws = new
        t += 1
        prod = math.prod(ws)
        cur = 0.5 * (prod - phi) * (prod - phi)
        losses.append(cur)
        finite = math.isfinite(cur) and all(math.isfinite(x) for x in ws)
        if not finite or cur > DIVERGENCE_LOSS:
            status = DIVERGED
        elif cur <= eps:
            status = CONVERGED
        elif t >= max_iters:
            status = ITERATION_CAP
        if monitors.any and finite and (t % stride == 0 or status is not None):
            record(t, ws, prod)

    final = WeightStack(w0.spec, tuple(np.array([[x]]) for x in ws))
    return TrainTrace(
        loss=np.array(losses),
        status=status,
        eta=eta,
        depth=n,
        monitors=monitors,
        monitor_t=np.array(mt, dtype=np.int64),
        delta=np.array(md) if monitors.delta else None,
        sigma_min=np.array(ms) if monitors.sigma_min else None,
        margin=np.array(mm) if monitors.margin else None,
        layer_norms=np.array(mn).reshape(len(mt), n) if monitors.layer_norms else None,
        weight_scale=np.array(mw) if monitors.weight_scale else None,
        final=final,
    )
