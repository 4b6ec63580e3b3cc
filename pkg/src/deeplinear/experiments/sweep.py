"""Convergence time as a function of initialization scale, with a learning-rate
grid search per scale."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ContractViolation
from ..initialization import balanced_init, gaussian_layerwise, trial_rng
from ..network import DIVERGENCE_LOSS, Monitors, NetSpec, Problem, TrainTrace, WeightStack, train, write_rows

SCHEMES = ("layerwise", "balanced")
DEFAULT_EPS = 1e-5
DEFAULT_CAP = 10**6


def default_lr_grid(points: int = 5) -> np.ndarray:
    """Log-spaced learning rates from 1e-4 to 1 (one per decade by default)."""
    return np.logspace(-4, 0, points)


def init_stack(spec: NetSpec, scheme: str, s: float, rng) -> WeightStack:
    if scheme == "layerwise":
        return gaussian_layerwise(spec, s, rng)
    if scheme == "balanced":
        return balanced_init(spec, std=s, seed=rng)
    raise ContractViolation(f"unknown init scheme {scheme!r}")


@dataclass
class SweepResult:
    """Best convergence time per initialization scale.

    ``iterations[i]`` counts recorded iterates (steps taken + 1) for the
    fastest converging learning rate, or is ``None`` when no learning rate
    reached ``eps`` within ``cap`` steps.
    """

    scheme: str
    dims: tuple[int, ...]
    eps: float
    cap: int
    seed: int
    std_grid: np.ndarray
    lr_grid: np.ndarray
    best_lr: list[float | None]
    iterations: list[int | None]
    statuses: np.ndarray = field(repr=False)  # (len(std_grid), len(lr_grid)) status strings

    @property
    def converged(self) -> np.ndarray:
        return np.array([it is not None for it in self.iterations])

    @property
    def n_converged(self) -> int:
        return int(self.converged.sum())

    def rows(self) -> list[dict]:
        return [
            {
                "std": float(s),
                "best_lr": "" if lr is None else float(lr),
                "iterations": "" if it is None else int(it),
                "converged": int(it is not None),
            }
            for s, lr, it in zip(self.std_grid, self.best_lr, self.iterations)
        ]

    def write_csv(self, path) -> None:
        write_rows(path, self.rows())

    def to_json(self) -> dict:
        return {
            "scheme": self.scheme,
            "dims": list(self.dims),
            "eps": self.eps,
            "cap": self.cap,
            "seed": self.seed,
            "std_grid": [float(s) for s in self.std_grid],
            "lr_grid": [float(x) for x in self.lr_grid],
            "best_lr": self.best_lr,
            "iterations": self.iterations,
            "statuses": self.statuses.tolist(),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))


def _forward(layers):
    prefix = [layers[0]]
    for w in layers[1:]:
        prefix.append(np.matmul(w, prefix[-1]))
    return prefix


def batched_descent(
    layers: Sequence[np.ndarray],
    phi: np.ndarray,
    etas: np.ndarray,
    eps: float,
    cap: int,
    groups: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient descent on a batch of independent stacks in lockstep.

    ``layers[j]`` has shape (B, d_{j+1}, d_j) and member ``b`` uses learning
    rate ``etas[b]``. Returns per-member iteration counts (iterates recorded,
    i.e. steps + 1) and status strings with the same stopping rules as
    ``network.train``. When ``groups`` is given, a group stops as soon as one
    of its members converges; its remaining members get status "dropped"
    and the iterate count at which they were stopped.
    """
    layers = [np.array(w, dtype=np.float64) for w in layers]
    b_total = layers[0].shape[0]
    etas = np.asarray(etas, dtype=np.float64)
    groups = np.arange(b_total) if groups is None else np.asarray(groups)
    iters = np.zeros(b_total, dtype=np.int64)
    status = np.full(b_total, "", dtype=object)
    alive = np.arange(b_total)
    eta_col = etas[:, None, None]
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while alive.size:
            prefix = _forward(layers)
            resid = prefix[-1] - phi
            cur = 0.5 * np.einsum("bij,bij->b", resid, resid)
            done = cur <= eps
            bad = ~np.isfinite(cur) | (cur > DIVERGENCE_LOSS)
            if t == 0:
                bad[:] = False
            conv = done & ~bad
            cap_hit = ~(conv | bad) & (t >= cap)
            finish = conv | bad | cap_hit
            if finish.any():
                idx = alive[finish]
                iters[idx] = t + 1
                status[alive[bad]] = "diverged"
                status[alive[conv]] = "converged"
                status[alive[cap_hit]] = "iteration-cap"
                keep = ~finish
                if conv.any():
                    won = np.isin(groups[alive], groups[alive[conv]])
                    status[alive[won & keep]] = "dropped"
                    iters[alive[won & keep]] = t + 1
                    keep &= ~won
                alive = alive[keep]
                if not alive.size:
                    break
                layers = [w[keep] for w in layers]
                prefix = [p[keep] for p in prefix]
                resid = resid[keep]
                eta_col = eta_col[keep]
            n = len(layers)
            suffix = None
            new = [None] * n
            for j in range(n - 1, -1, -1):
                g = resid if suffix is None else np.matmul(np.swapaxes(suffix, 1, 2), resid)
                if j > 0:
                    g = np.matmul(g, np.swapaxes(prefix[j - 1], 1, 2))
                new[j] = layers[j] - eta_col * g
                suffix = layers[j] if suffix is None else np.matmul(suffix, layers[j])
            layers = new
            t += 1
    return iters, status


def std_sweep(
    spec: NetSpec,
    phi,
    scheme: str,
    std_grid: Sequence[float],
    lr_grid: Sequence[float] | None = None,
    eps: float = DEFAULT_EPS,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
) -> SweepResult:
    """For each initialization scale, the fastest convergence over the learning-rate grid.

    Scale ``std_grid[i]`` uses one initialization drawn from the stream
    ``(seed, i)``, shared by every learning rate.
    """
    phi = Problem(phi).phi
    std_grid = np.asarray(std_grid, dtype=np.float64)
    lr_grid = default_lr_grid() if lr_grid is None else np.asarray(lr_grid, dtype=np.float64)
    if std_grid.size == 0 or lr_grid.size == 0:
        raise ContractViolation("std and learning-rate grids must be non-empty")
    if eps <= 0 or cap < 1:
        raise ContractViolation("eps must be positive and cap >= 1")
    if phi.shape != (spec.dims[-1], spec.dims[0]):
        raise ContractViolation(f"phi has shape {phi.shape}, network maps to {(spec.dims[-1], spec.dims[0])}")
    n_s, n_lr = std_grid.size, lr_grid.size
    inits = [init_stack(spec, scheme, float(s), trial_rng(seed, i)) for i, s in enumerate(std_grid)]
    layers = [
        np.repeat(np.stack([w.layers[j] for w in inits]), n_lr, axis=0) for j in range(spec.depth)
    ]
    etas = np.tile(lr_grid, n_s)
    groups = np.repeat(np.arange(n_s), n_lr)
    iters, status = batched_descent(layers, phi, etas, eps, cap, groups)
    iters = iters.reshape(n_s, n_lr)
    status = status.reshape(n_s, n_lr)
    best_lr: list[float | None] = []
    best_it: list[int | None] = []
    for i in range(n_s):
        conv = np.flatnonzero(status[i] == "converged")
        if conv.size:
            k = conv[np.argmin(iters[i, conv])]
            best_lr.append(float(lr_grid[k]))
            best_it.append(int(iters[i, k]))
        else:
            best_lr.append(None)
            best_it.append(None)
    return SweepResult(scheme, spec.dims, eps, cap, seed, std_grid, lr_grid, best_lr, best_it, status)


@dataclass
class BalanceSeries:
    t: np.ndarray
    min_gram_norm: np.ndarray
    delta: np.ndarray
    trace: TrainTrace = field(repr=False)

    def write_csv(self, path) -> None:
        write_rows(
            path,
            [
                {"t": int(t), "min_gram_norm": float(g), "delta": float(d)}
                for t, g, d in zip(self.t, self.min_gram_norm, self.delta)
            ],
        )


def balancedness_trace(
    spec: NetSpec,
    phi,
    scheme: str,
    s: float,
    eta: float,
    steps: int,
    seed=0,
    stride: int = 1,
) -> BalanceSeries:
    """Weight scale (min_j ||W_j W_j^T||_F) and balancedness along one run."""
    p = Problem(phi)
    w0 = init_stack(spec, scheme, s, trial_rng(seed, 0) if isinstance(seed, int) else seed)
    mon = Monitors(delta=True, weight_scale=True, stride=stride)
    trace = train(w0, p, eta, np.finfo(float).tiny, steps, mon)
    return BalanceSeries(trace.monitor_t, trace.weight_scale, trace.delta, trace)
