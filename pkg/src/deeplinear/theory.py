"""Balancedness and deficiency-margin diagnostics, convergence certificates,
and per-trajectory checks of the descent guarantees."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from . import matlin
from .errors import ContractViolation
from .network import NetSpec, TrainTrace, WeightStack, balancedness, end_to_end

ABS_TOL = 1e-12
REL_TOL = 1e-9


def balancedness_delta(w: WeightStack) -> float:
    """Smallest delta for which the stack is delta-balanced."""
    return balancedness(w.layers)


def deficiency_margin(W, phi) -> float:
    """sigma_min(phi) - ||W - phi||_F; positive means W has that margin."""
    W = matlin.as_matrix(W, "W")
    phi = matlin.as_matrix(phi, "phi")
    if W.shape != phi.shape:
        raise ContractViolation(f"shape mismatch {W.shape} vs {phi.shape}")
    return matlin.sigma_min(phi) - matlin.frobenius(W - phi)


def margin_implies_sigma(Wprime, phi, c: float) -> bool:
    """Whether sigma_min(W') >= c.

    Meant for matrices with ||W' - phi||_F <= sigma_min(phi) - c, where the
    answer must always be True.
    """
    if c <= 0:
        raise ContractViolation(f"margin must be positive, got {c}")
    return matlin.sigma_min(Wprime) >= c


def required_delta(c: float, depth: int, phi_norm: float) -> float:
    return c**2 / (256 * depth**3 * phi_norm ** (2 * (depth - 1) / depth))


def eta_max(c: float, depth: int, phi_norm: float) -> float:
    """Largest learning rate covered by the linear-rate guarantee."""
    n = depth
    return c ** ((4 * n - 2) / n) / (6144 * n**3 * phi_norm ** ((6 * n - 4) / n))


def iteration_bound(eta: float, c: float, depth: int, loss0: float, eps: float) -> int:
    """ceil(ln(loss0 / eps) / (eta * c^{2(N-1)/N})), floored at 0."""
    if eps >= loss0:
        return 0
    rate = eta * c ** (2 * (depth - 1) / depth)
    return math.ceil(math.log(loss0 / eps) / rate)


def geometric_envelope(loss0: float, eta: float, c: float, depth: int, t: np.ndarray) -> np.ndarray:
    """loss0 * (1 - eta * c^{2(N-1)/N})^t."""
    factor = 1.0 - eta * c ** (2 * (depth - 1) / depth)
    return loss0 * np.power(max(factor, 0.0), t)


@dataclass
class Certificate:
    """Numbers and preconditions of the linear-rate guarantee for one initialization."""

    depth: int
    margin: float
    phi_norm: float
    loss0: float
    eps: float
    required_delta: float
    eta_max: float
    t_bound: int | None
    initial_delta: float
    has_margin: bool
    balanced_enough: bool
    full_rank_capable: bool

    @property
    def satisfied(self) -> bool:
        return self.has_margin and self.balanced_enough and self.full_rank_capable

    def iterations(self, eta: float | None = None, eps: float | None = None) -> int | None:
        """Iteration bound for a learning rate (default ``eta_max``) and target loss."""
        if not self.has_margin:
            return None
        return iteration_bound(
            self.eta_max if eta is None else eta,
            self.margin,
            self.depth,
            self.loss0,
            self.eps if eps is None else eps,
        )

    def to_json(self) -> dict:
        out = asdict(self)
        out["satisfied"] = self.satisfied
        return out


def theorem1_certificate(w0: WeightStack, phi, eps: float) -> Certificate:
    """Evaluate the linear-rate guarantee at the initialization ``w0``.

    A nonpositive margin yields a certificate with ``has_margin=False``
    rather than an error.
    """
    if eps <= 0:
        raise ContractViolation(f"eps must be positive, got {eps}")
    phi = matlin.as_matrix(phi, "phi")
    e2e = end_to_end(w0)
    if e2e.shape != phi.shape:
        raise ContractViolation(f"network maps to {e2e.shape}, phi is {phi.shape}")
    n = w0.depth
    c = deficiency_margin(e2e, phi)
    phi_norm = matlin.frobenius(phi)
    loss0 = 0.5 * matlin.frobenius(e2e - phi) ** 2
    delta0 = balancedness_delta(w0)
    has_margin = c > 0
    if has_margin:
        rd = required_delta(c, n, phi_norm)
        em = eta_max(c, n, phi_norm)
        tb = iteration_bound(em, c, n, loss0, eps)
    else:
        rd, em, tb = 0.0, 0.0, None
    return Certificate(
        depth=n,
        margin=c,
        phi_norm=phi_norm,
        loss0=loss0,
        eps=eps,
        required_delta=rd,
        eta_max=em,
        t_bound=tb,
        initial_delta=delta0,
        has_margin=has_margin,
        balanced_enough=has_margin and (n == 1 or delta0 <= rd),
        full_rank_capable=w0.spec.full_rank_capable,
    )


@dataclass
class Theorem2Certificate:
    """Learning rate, iteration count and success probability for balanced
    initialization in scalar regression."""

    depth: int
    d0: int
    std: float
    phi_spectral: float
    eps: float
    eta_max: float
    t_bound: float
    margin: float
    probability: float
    d0_min: int
    a: float
    d0_ok: bool
    std_ok: bool

    @property
    def satisfied(self) -> bool:
        return self.d0_ok and self.std_ok

    def to_json(self) -> dict:
        out = asdict(self)
        out["satisfied"] = self.satisfied
        return out


def theorem2_eta_max(std: float, d0: int, depth: int, phi_spectral: float) -> float:
    n = depth
    return (std**2 * d0) ** (4 - 2 / n) / (1e5 * n**3 * phi_spectral ** (10 - 6 / n))


def theorem2_iterations(
    eta: float, std: float, d0: int, depth: int, phi_spectral: float, eps: float
) -> float:
    n = depth
    warmup = math.log(4) * (phi_spectral / (std**2 * d0)) ** (2 - 2 / n)
    tail = phi_spectral ** (2 / n - 2) * math.log(phi_spectral**2 / (8 * eps))
    return 4.0 / eta * (warmup + tail)


def theorem2_probability(std: float, d0: int, phi_spectral: float) -> float:
    """Lower bound on the chance that a balanced Gaussian initialization has
    margin std^2 d0 / (2 ||phi||_2)."""
    b1 = phi_spectral**2 / (2 * std**2 * d0**2)
    return (1 - 2 * math.exp(-d0 / 16)) * (3 - 4 * norm.cdf(2 / math.sqrt(b1))) / 2


def theorem2_certificate(
    spec: NetSpec, phi, s: float, eps: float, d0_min: int = 100, a: float = 100.0
) -> Theorem2Certificate:
    phi = matlin.as_matrix(phi, "phi")
    if spec.dims[-1] != 1:
        raise ContractViolation(f"scalar regression needs d_N = 1, got {spec.dims[-1]}")
    if phi.shape != (1, spec.dims[0]):
        raise ContractViolation(f"phi has shape {phi.shape}, expected (1, {spec.dims[0]})")
    if s <= 0 or eps <= 0:
        raise ContractViolation("std and eps must be positive")
    n, d0 = spec.depth, spec.dims[0]
    ps = matlin.sigma_max(phi)
    em = theorem2_eta_max(s, d0, n, ps)
    return Theorem2Certificate(
        depth=n,
        d0=d0,
        std=s,
        phi_spectral=ps,
        eps=eps,
        eta_max=em,
        t_bound=theorem2_iterations(em, s, d0, n, ps, eps),
        margin=s**2 * d0 / (2 * ps),
        probability=theorem2_probability(s, d0, ps),
        d0_min=d0_min,
        a=a,
        d0_ok=d0 >= d0_min,
        std_ok=s <= ps / math.sqrt(a * d0**2),
    )


@dataclass
class TrajectoryReport:
    """Outcome of checking a recorded run against the descent guarantees.

    Each ``*_ok`` array is aligned with ``t`` (the recorded iterations);
    ``descent_residual`` is NaN where the next loss is unavailable.
    """

    t: np.ndarray
    descent_residual: np.ndarray
    descent_ok: np.ndarray
    balance_ok: np.ndarray
    norm_ok: np.ndarray
    margin_ok: np.ndarray
    envelope_ok: np.ndarray

    def first_failure(self) -> int | None:
        bad = ~(self.descent_ok & self.balance_ok & self.norm_ok & self.margin_ok)
        return int(self.t[np.argmax(bad)]) if bad.any() else None

    @property
    def passed(self) -> bool:
        return bool(
            self.descent_ok.all()
            and self.balance_ok.all()
            and self.norm_ok.all()
            and self.margin_ok.all()
            and self.envelope_ok.all()
        )

    def summary(self) -> dict:
        return {
            "checked_points": int(self.t.size),
            "descent": bool(self.descent_ok.all()),
            "balance": bool(self.balance_ok.all()),
            "layer_norms": bool(self.norm_ok.all()),
            "margin": bool(self.margin_ok.all()),
            "envelope": bool(self.envelope_ok.all()),
            "max_descent_residual": float(np.nanmax(self.descent_residual))
            if np.isfinite(self.descent_residual).any()
            else None,
            "first_failure": self.first_failure(),
            "passed": self.passed,
        }


def verify_trajectory(trace: TrainTrace, phi, eta: float, cert: Certificate) -> TrajectoryReport:
    """Check the per-step descent inequality, 2*delta balancedness, the
    per-layer spectral-norm bound, margin persistence and the geometric
    loss envelope along a recorded run."""
    m = trace.monitors
    if not (m.delta and m.sigma_min and m.margin and m.layer_norms):
        raise ContractViolation("verify_trajectory needs delta, sigma_min, margin and layer_norms monitors")
    phi = matlin.as_matrix(phi, "phi")
    n = trace.depth
    loss = trace.loss
    t = trace.monitor_t
    lt = loss[t]
    expo = 2 * (n - 1) / n

    nxt = np.full(t.shape, np.nan)
    has_next = t + 1 < loss.size
    nxt[has_next] = loss[t[has_next] + 1]
    with np.errstate(over="ignore", invalid="ignore"):
        residual = nxt - lt + eta * trace.sigma_min**expo * lt
        descent_ok = ~(residual > ABS_TOL + REL_TOL * lt)
    descent_ok &= np.isfinite(lt)

    phi_norm = matlin.frobenius(phi)
    balance_ok = trace.delta <= 2 * cert.required_delta + ABS_TOL
    norm_cap = (4 * phi_norm) ** (1.0 / n)
    norm_ok = np.all(trace.layer_norms <= norm_cap * (1 + REL_TOL), axis=1)
    margin_ok = trace.margin >= cert.margin - ABS_TOL - REL_TOL * abs(cert.margin)

    if cert.has_margin:
        steps = np.arange(loss.size)
        env = geometric_envelope(loss[0], eta, cert.margin, n, steps)
        with np.errstate(invalid="ignore"):
            envelope_ok = ~(loss > env * (1 + REL_TOL) + ABS_TOL)
        envelope_ok = envelope_ok[t]
    else:
        envelope_ok = np.zeros(t.shape, dtype=bool)

    return TrajectoryReport(
        t=t,
        descent_residual=residual,
        descent_ok=descent_ok,
        balance_ok=balance_ok,
        norm_ok=norm_ok,
        margin_ok=margin_ok,
        envelope_ok=envelope_ok,
    )


def _prefix_gram_gap(layers, j: int) -> float:
    # ||W_{1:j}^T W_{1:j} - (W_1^T W_1)^j||_F
    prod = layers[0]
    for w in layers[1:j]:
        prod = w @ prod
    g1 = layers[0].T @ layers[0]
    return matlin.frobenius(prod.T @ prod - np.linalg.matrix_power(g1, j))


def _suffix_gram_gap(layers, j: int) -> float:
    # ||W_{j:N} W_{j:N}^T - (W_N W_N^T)^{N-j+1}||_F
    n = len(layers)
    prod = layers[j - 1]
    for w in layers[j:]:
        prod = w @ prod
    gn = layers[-1] @ layers[-1].T
    return matlin.frobenius(prod @ prod.T - np.linalg.matrix_power(gn, n - j + 1))


def gram_power_gaps(w: WeightStack) -> list[tuple[float, float, float, float]]:
    """For each j, (prefix gap, prefix bound, suffix gap, suffix bound) where
    the bounds are 1.5 * nu * M^{2(k-1)} * k^2 with nu the balancedness,
    M the largest layer spectral norm and k the number of layers involved.

    Valid when d_0 <= d_1 and d_N <= d_{N-1}.
    """
    dims = w.spec.dims
    if w.depth > 1 and (dims[0] > dims[1] or dims[-1] > dims[-2]):
        raise ContractViolation("gram_power_gaps needs d_0 <= d_1 and d_N <= d_{N-1}")
    layers = w.layers
    n = len(layers)
    nu = balancedness(layers)
    big_m = max(matlin.sigma_max(x) for x in layers)
    out = []
    for j in range(1, n + 1):
        kp, ks = j, n - j + 1
        out.append(
            (
                _prefix_gram_gap(layers, j),
                1.5 * nu * big_m ** (2 * (kp - 1)) * kp**2,
                _suffix_gram_gap(layers, j),
                1.5 * nu * big_m ** (2 * (ks - 1)) * ks**2,
            )
        )
    return out


def layer_norm_bound(w: WeightStack) -> tuple[bool, float, float]:
    """Whether the balancedness is small enough relative to ||W_{1:N}||_sigma
    for the per-layer bound to apply, the largest layer norm, and the bound
    C^{1/N} 2^{1/(2N)} with C the end-to-end spectral norm."""
    n = w.depth
    c = matlin.sigma_max(end_to_end(w))
    nu = balancedness(w.layers)
    applicable = c > 0 and nu <= c ** (2 / n) / (30 * n**2)
    largest = max(matlin.sigma_max(x) for x in w.layers)
    return applicable, largest, c ** (1 / n) * 2 ** (1 / (2 * n))
