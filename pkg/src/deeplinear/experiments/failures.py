"""Constructions where gradient descent fails: an unbalanced start with a
deficiency margin, and a balanced identity start without one."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import matlin
from ..errors import ContractViolation
from ..network import NetSpec, Problem, TrainTrace, WeightStack, _gradients, end_to_end, train
from ..theory import deficiency_margin

NEVER_CONVERGE = 1e-300
DIAG_TOL = 1e-8


@dataclass
class FailureResult:
    trace: TrainTrace
    verdict: bool
    message: str
    details: dict = field(default_factory=dict)


def unbalanced_scale(c: float, eta: float, depth: int) -> float:
    """Magnitude A used to split the product c between the two halves of the network."""
    n = depth
    return max(
        math.sqrt(eta * n),
        2.0 / (eta * (1.0 - c) * c ** ((n - 1) / n)),
        2000.0,
        20.0 / eta,
        (20.0 * 10.0 ** (2 * n - 1) / eta ** (2 * n)) ** (1.0 / (2 * n - 2)),
    )


def unbalanced_stack(c: float, eta: float, depth: int, d: int = 1) -> tuple[WeightStack, float, float]:
    """Diagonal d x d layers whose leading entries are A c^{1/N} (first half)
    and c^{1/N} / A (second half); other diagonal entries are 1.
    Returns (stack, clamped c, A)."""
    if depth % 2 or depth < 2:
        raise ContractViolation(f"construction needs an even depth, got {depth}")
    if not 0 < c < 1:
        raise ContractViolation(f"c must lie in (0, 1), got {c}")
    if eta <= 0 or d < 1:
        raise ContractViolation("eta and d must be positive")
    c = max(c, 0.75)
    a = unbalanced_scale(c, eta, depth)
    root = c ** (1.0 / depth)
    layers = []
    for j in range(1, depth + 1):
        w = np.eye(d)
        w[0, 0] = a * root if j <= depth // 2 else root / a
        layers.append(w)
    return WeightStack(NetSpec((d,) * (depth + 1)), tuple(layers)), c, a


def failure_unbalanced(
    c: float, eta: float, depth: int, d: int = 1, max_iters: int = 1000
) -> FailureResult:
    """Run gradient descent from the unbalanced construction against phi = I_d.

    Verdict: the initial margin is c and, for every t >= 1 until the divergence
    guard fires, the loss is at least (2^N - 1)^2 / 2; with d > 1 the
    non-leading diagonal entries stay 1.
    """
    w0, c_used, a = unbalanced_stack(c, eta, depth, d)
    phi = np.eye(d)
    margin0 = deficiency_margin(end_to_end(w0), phi)
    floor = 0.5 * (2.0**depth - 1.0) ** 2

    drift = [0.0]

    def watch(t, w):
        for layer in w.layers:
            rest = layer.copy()
            rest[0, 0] = 1.0
            drift[0] = max(drift[0], float(np.max(np.abs(rest - np.eye(d)))))

    trace = train(w0, Problem(phi), eta, NEVER_CONVERGE, max_iters, observer=watch if d > 1 else None)
    after = trace.loss[1:]
    floor_held = bool(np.all(after >= floor))
    increasing = bool(np.all(np.diff(after) > 0))
    ok = floor_held and abs(margin0 - c_used) <= 1e-12 and drift[0] == 0.0
    msg = (
        f"loss floor {floor:g} held" if ok else f"loss floor {floor:g} violated or construction off"
    )
    details = {
        "c": c_used,
        "A": a,
        "initial_margin": margin0,
        "floor": floor,
        "floor_held": floor_held,
        "strictly_increasing": increasing,
        "status": trace.status,
        "steps": trace.iterations,
        "other_diagonal_drift": drift[0],
    }
    return FailureResult(trace, ok, msg, details)


def default_negative_target(d: int, lam: float) -> np.ndarray:
    diag = np.ones(d)
    diag[-1] = -lam
    return np.diag(diag)


def failure_no_margin(
    d: int, depth: int, eta: float, lam: float = 1.0, steps: int = 1000, phi=None
) -> FailureResult:
    """Run gradient descent from the identity towards a symmetric target with
    eigenvalue -lam.

    Verdict: the loss never drops below lam^2 / 2 and every layer stays of the
    form U D(t) U^T with U the target's eigenbasis and D(t) one diagonal matrix
    shared by all layers.
    """
    if depth % 2 or depth < 2:
        raise ContractViolation(f"construction needs an even depth, got {depth}")
    if d < 2:
        raise ContractViolation(f"construction needs d >= 2, got {d}")
    if lam <= 0 or eta <= 0 or steps < 1:
        raise ContractViolation("lambda, eta and steps must be positive")
    phi = default_negative_target(d, lam) if phi is None else matlin.as_matrix(phi, "phi")
    if phi.shape != (d, d):
        raise ContractViolation(f"phi must be {d} x {d}")
    q, eig = matlin.sym_eig(phi)
    if np.min(np.abs(eig + lam)) > 1e-9 * max(1.0, lam):
        raise ContractViolation(f"phi has no eigenvalue -{lam}")

    spec = NetSpec((d,) * (depth + 1))
    w0 = WeightStack(spec, tuple(np.eye(d) for _ in range(depth)))
    grads, _ = _gradients(w0.layers, phi)
    start_grad = max(matlin.frobenius(g - (np.eye(d) - phi)) for g in grads)
    if all(matlin.frobenius(g) == 0 for g in grads):
        raise ContractViolation("identity is stationary for this target")

    worst = [0.0]

    def watch(t, w):
        rot = [q.T @ layer @ q for layer in w.layers]
        shared = np.mean([np.diag(r) for r in rot], axis=0)
        for r in rot:
            worst[0] = max(worst[0], matlin.frobenius(r - np.diag(shared)))

    trace = train(w0, Problem(phi), eta, NEVER_CONVERGE, steps, observer=watch)
    floor = 0.5 * lam * lam
    finite = trace.loss[np.isfinite(trace.loss)]
    floor_held = bool(np.all(finite >= floor)) and finite.size == trace.loss.size
    diag_ok = worst[0] <= DIAG_TOL
    ok = floor_held and diag_ok
    if ok:
        msg = f"loss floor {floor:g} held"
    elif not floor_held:
        msg = f"loss dropped below {floor:g}: min {float(np.nanmin(trace.loss)):.6g}"
    else:
        msg = f"layers left the shared eigenbasis: residual {worst[0]:.3e}"
    details = {
        "floor": floor,
        "min_loss": float(np.nanmin(trace.loss)),
        "diagonal_residual": worst[0],
        "initial_gradient_error": start_grad,
        "status": trace.status,
        "steps": trace.iterations,
    }
    return FailureResult(trace, ok, msg, details)
