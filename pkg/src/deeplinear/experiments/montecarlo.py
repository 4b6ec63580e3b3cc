"""Monte Carlo estimates of the probabilities that random initializations are
balanced or start with a deficiency margin."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

from .. import matlin
from ..errors import ContractViolation
from ..initialization import balanced_init, gaussian_layerwise, make_rng, trial_rng
from ..network import NetSpec, balancedness, end_to_end, write_rows
from ..theory import deficiency_margin, theorem2_probability

MIN_TRIALS = 100
MODES = ("balanced_lemma6", "layerwise_claim3")


@dataclass(frozen=True)
class MCReport:
    trials: int
    successes: int
    bound: float | None

    @property
    def empirical_p(self) -> float:
        return self.successes / self.trials

    @property
    def slack(self) -> float:
        """Three binomial standard deviations at the empirical frequency."""
        p = self.empirical_p
        return 3.0 * math.sqrt(p * (1.0 - p) / self.trials)

    @property
    def consistent(self) -> bool:
        """Empirical frequency is not significantly below the bound."""
        return bool(self.bound is None or self.empirical_p >= self.bound - self.slack)

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(empirical_p=self.empirical_p, slack=self.slack, consistent=self.consistent)
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))

    def write_csv(self, path) -> None:
        row = self.to_json()
        row["bound"] = "" if self.bound is None else float(self.bound)
        row["consistent"] = int(self.consistent)
        write_rows(path, [row])


def _check_trials(trials: int) -> None:
    if trials < MIN_TRIALS:
        raise ContractViolation(f"need at least {MIN_TRIALS} trials, got {trials}")


def balance_probability_bound(spec: NetSpec, s: float, delta: float) -> float:
    """max{0, 1 - 10 delta^-2 N s^4 d_max^3}."""
    d_max = max(spec.dims)
    return max(0.0, 1.0 - 10.0 * spec.depth * s**4 * d_max**3 / delta**2)


def mc_balance_probability(spec: NetSpec, s: float, delta: float, trials: int, seed: int = 0) -> MCReport:
    """Frequency with which layer-wise Gaussian stacks at scale ``s`` are delta-balanced."""
    _check_trials(trials)
    if delta <= 0:
        raise ContractViolation(f"delta must be positive, got {delta}")
    hits = 0
    for i in range(trials):
        w = gaussian_layerwise(spec, s, trial_rng(seed, i))
        hits += int(balancedness(w.layers) <= delta)
    return MCReport(trials, hits, balance_probability_bound(spec, s, delta))


def mc_margin_probability(
    spec: NetSpec,
    phi,
    mode: str,
    s: float,
    trials: int,
    seed: int = 0,
) -> MCReport:
    """Frequency of an initial deficiency margin.

    ``balanced_lemma6``: balanced stacks whose product has i.i.d. N(0, s^2)
    entries; success means a margin of at least s^2 d_0 / (2 ||phi||_2), and
    the reported bound is the success probability of the balanced-init
    guarantee. ``layerwise_claim3``: layer-wise Gaussian stacks; success means
    any positive margin, no bound is reported.
    """
    _check_trials(trials)
    phi = matlin.as_matrix(phi, "phi")
    if spec.dims[-1] != 1:
        raise ContractViolation(f"margin probability needs scalar output, got d_N = {spec.dims[-1]}")
    if phi.shape != (1, spec.dims[0]):
        raise ContractViolation(f"phi has shape {phi.shape}, expected {(1, spec.dims[0])}")
    if mode not in MODES:
        raise ContractViolation(f"unknown mode {mode!r}")
    phi_norm = matlin.frobenius(phi)  # equals the spectral norm for a row
    hits = 0
    if mode == "balanced_lemma6":
        d0 = spec.dims[0]
        target = s * s * d0 / (2.0 * phi_norm) if phi_norm > 0 else math.inf
        for i in range(trials):
            w = balanced_init(spec, std=s, seed=trial_rng(seed, i))
            hits += int(deficiency_margin(end_to_end(w), phi) >= target)
        bound = float(theorem2_probability(s, d0, phi_norm)) if phi_norm > 0 else None
        return MCReport(trials, hits, bound)
    for i in range(trials):
        w = gaussian_layerwise(spec, s, trial_rng(seed, i))
        hits += int(deficiency_margin(end_to_end(w), phi) > 0)
    return MCReport(trials, hits, None)


@dataclass(frozen=True)
class MarginSigmaReport:
    trials: int
    violations: int
    worst_gap: float  # min over trials of sigma_min(W') - c


def mc_margin_implies_sigma(
    trials: int, max_dim: int = 5, seed: int = 0, tol: float = 1e-12
) -> MarginSigmaReport:
    """Search for a counterexample to: ||W' - phi||_F <= sigma_min(phi) - c
    implies sigma_min(W') >= c.

    Each trial draws a random phi (up to ``max_dim`` per side), a margin c in
    (0, sigma_min(phi)) and W' = phi + E with ||E||_F uniform in
    [0, sigma_min(phi) - c]. A violation is sigma_min(W') < c - tol.
    """
    rng = make_rng(seed)
    violations = 0
    worst = math.inf
    done = 0
    while done < trials:
        rows, cols = rng.integers(1, max_dim + 1, size=2)
        phi = rng.normal(size=(rows, cols))
        smin = matlin.sigma_min(phi)
        if smin <= 1e-6:
            continue
        c = rng.uniform(0.0, smin)
        e = rng.normal(size=phi.shape)
        e *= rng.uniform(0.0, smin - c) / matlin.frobenius(e)
        gap = matlin.sigma_min(phi + e) - c
        worst = min(worst, gap)
        violations += int(gap < -tol)
        done += 1
    return MarginSigmaReport(trials, violations, worst)
