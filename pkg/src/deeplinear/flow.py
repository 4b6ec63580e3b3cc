"""Continuous-time gradient flow of the end-to-end matrix of a balanced network,
and its comparison with discrete gradient descent on the layers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import matlin
from .errors import ContractViolation
from .network import WeightStack, _gradients, balancedness, end_to_end, write_rows

BALANCE_TOL = 1e-8


@dataclass(frozen=True)
class FlowConfig:
    depth: int
    h: float
    tau_max: float
    integrator: str = "rk4"

    def __post_init__(self):
        if self.depth < 1:
            raise ContractViolation("depth must be >= 1")
        if not (self.h > 0 and self.tau_max > 0):
            raise ContractViolation("step and horizon must be positive")
        if self.h > self.tau_max:
            raise ContractViolation(f"step {self.h} exceeds horizon {self.tau_max}")
        if self.integrator not in ("euler", "rk4"):
            raise ContractViolation(f"unknown integrator {self.integrator!r}")


def default_step(phi, depth: int) -> float:
    """1e-3 scaled down for large targets, where the flow gets stiffer."""
    scale = max(1.0, matlin.frobenius(matlin.as_matrix(phi)))
    return 1e-3 * scale ** (-2 * (depth - 1) / depth)


def flow_rhs(W, phi, depth: int) -> np.ndarray:
    """dW/dtau = -sum_j (W W^T)^{(N-j)/N} (W - phi) (W^T W)^{(j-1)/N}."""
    W = np.asarray(W, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if W.shape != phi.shape:
        raise ContractViolation(f"shape mismatch {W.shape} vs {phi.shape}")
    grad = W - phi
    n = depth
    if n == 1:
        return -grad
    if W.shape == (1, 1):
        w2 = W[0, 0] ** 2
        total = sum(w2 ** ((n - j) / n) * w2 ** ((j - 1) / n) for j in range(1, n + 1))
        return -total * grad
    exps = [k / n for k in range(n)]
    left = matlin.psd_powers(W @ W.T, exps)
    right = matlin.psd_powers(W.T @ W, exps)
    out = np.zeros_like(W)
    for j in range(1, n + 1):
        out += left[n - j] @ grad @ right[j - 1]
    return -out


@dataclass
class FlowTrajectory:
    tau: np.ndarray
    states: list[np.ndarray]
    loss: np.ndarray
    sigma_min: np.ndarray
    status: str

    def write_csv(self, path, gd_deviation: np.ndarray | None = None) -> None:
        rows = []
        for k, tau in enumerate(self.tau):
            row = {
                "tau": float(tau),
                "loss": float(self.loss[k]),
                "sigma_min": float(self.sigma_min[k]),
            }
            if gd_deviation is not None:
                row["frob_dev_from_gd"] = float(gd_deviation[k])
            rows.append(row)
        write_rows(path, rows)


def _step(f, W, h, integrator):
    if integrator == "euler":
        return W + h * f(W)
    k1 = f(W)
    k2 = f(W + 0.5 * h * k1)
    k3 = f(W + 0.5 * h * k2)
    k4 = f(W + h * k3)
    return W + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_flow(W0, phi, cfg: FlowConfig, times=None) -> FlowTrajectory:
    """Fixed-step integration of the end-to-end flow.

    Without ``times`` the state is recorded after every step up to
    ``tau_max``. With ``times`` (increasing, within (0, tau_max]) the state is
    recorded exactly at those times; each interval is split into equal
    substeps no longer than ``h``.
    """
    W = matlin.as_matrix(W0, "W0")
    phi = matlin.as_matrix(phi, "phi")
    if W.shape != phi.shape:
        raise ContractViolation(f"shape mismatch {W.shape} vs {phi.shape}")
    if times is None:
        nsteps = math.ceil(cfg.tau_max / cfg.h - 1e-9)
        times = np.linspace(0.0, cfg.tau_max, nsteps + 1)[1:]
    times = np.asarray(times, dtype=np.float64)
    if times.size and (np.any(np.diff(times) <= 0) or times[0] <= 0):
        raise ContractViolation("output times must be positive and increasing")

    def f(x):
        return flow_rhs(x, phi, cfg.depth)

    def observe(x):
        r = x - phi
        return 0.5 * float(np.sum(r * r)), matlin.sigma_min(x)

    taus, states, losses, sigmas = [0.0], [W.copy()], [], []
    l0, s0 = observe(W)
    losses.append(l0)
    sigmas.append(s0)
    status = "ok"
    tau = 0.0
    for target in times:
        with np.errstate(over="ignore", invalid="ignore"):
            span = target - tau
            sub = max(1, math.ceil(span / cfg.h - 1e-9))
            h = span / sub
            for _ in range(sub):
                W = _step(f, W, h, cfg.integrator)
        tau = float(target)
        if not np.all(np.isfinite(W)):
            status = "integration-failure"
            break
        taus.append(tau)
        states.append(W.copy())
        lv, sv = observe(W)
        losses.append(lv)
        sigmas.append(sv)
    return FlowTrajectory(np.array(taus), states, np.array(losses), np.array(sigmas), status)


@dataclass
class FlowComparison:
    t: np.ndarray
    tau: np.ndarray
    deviation: np.ndarray
    max_deviation: float
    trajectory: FlowTrajectory


def compare_flow_gd(
    w0: WeightStack,
    phi,
    eta: float,
    steps: int,
    cfg: FlowConfig | None = None,
    checkpoints: int = 100,
) -> FlowComparison:
    """Run ``steps`` gradient-descent iterations and the end-to-end flow from
    the same start, aligned by tau = eta * t. Deviations are Frobenius
    distances of the end-to-end matrices divided by max(1, ||phi||_F)."""
    phi = matlin.as_matrix(phi, "phi")
    delta = balancedness(w0.layers)
    if delta > BALANCE_TOL:
        raise ContractViolation(f"flow comparison needs a balanced start, delta = {delta:.3e}")
    if steps < 1 or eta <= 0:
        raise ContractViolation("steps and eta must be positive")
    if cfg is None:
        cfg = FlowConfig(w0.depth, min(default_step(phi, w0.depth), eta * steps), eta * steps)
    elif cfg.depth != w0.depth:
        raise ContractViolation("flow depth does not match the network")

    marks = np.unique(np.linspace(0, steps, min(checkpoints, steps) + 1).round().astype(np.int64))[1:]
    marks_set = set(int(m) for m in marks)
    layers = list(w0.layers)
    gd = []
    for t in range(1, steps + 1):
        grads, _ = _gradients(layers, phi)
        layers = [w - eta * g for w, g in zip(layers, grads)]
        if t in marks_set:
            gd.append(end_to_end(WeightStack(w0.spec, tuple(layers))))
    traj = integrate_flow(end_to_end(w0), phi, cfg, times=eta * marks)
    scale = max(1.0, matlin.frobenius(phi))
    dev = np.array([matlin.frobenius(a - b) / scale for a, b in zip(gd, traj.states[1:])])
    dev = np.concatenate([[0.0], dev])
    return FlowComparison(
        t=np.concatenate([[0], marks]),
        tau=traj.tau,
        deviation=dev,
        max_deviation=float(dev.max()),
        trajectory=traj,
    )
