"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line through the ``acceptance`` fixture (also
collected in the terminal summary) and then asserts the same condition.
"""

import math
import time

import numpy as np

from deeplinear import matlin
from deeplinear.data import Dataset, empirical_moments, regression_loss, rescale_labels, synth_problem, whiten
from deeplinear.experiments import (
    failure_no_margin,
    failure_unbalanced,
    mc_balance_probability,
    mc_margin_implies_sigma,
    mc_margin_probability,
    std_sweep,
)
from deeplinear.flow import FlowConfig, compare_flow_gd
from deeplinear.initialization import balanced_init
from deeplinear.network import Monitors, NetSpec, Problem, WeightStack, gradients, train
from deeplinear.theory import gram_power_gaps, layer_norm_bound, theorem1_certificate, verify_trajectory


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def _r_squared(x, y):
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    return 1.0 - float(np.sum(resid**2)) / float(np.sum((y - y.mean()) ** 2))


def test_scalar_linear_rate_end_to_end(acceptance):
    with Clock() as clk:
        w0 = balanced_init(NetSpec((1, 1, 1)), np.array([[0.9]]))
        cert = theorem1_certificate(w0, [[1.0]], 1e-5)
        t_bound = cert.t_bound
        # run exactly t_bound steps so the loss at T itself is observed
        trace = train(w0, Problem(1.0), cert.eta_max, 1e-300, t_bound, Monitors.all())
        rep = verify_trajectory(trace, [[1.0]], cert.eta_max, cert)
    final = trace.loss[t_bound]
    ok = (
        cert.satisfied
        and trace.iterations == t_bound
        and final <= 1e-5
        and bool(np.all(rep.descent_ok))
        and bool(np.all(rep.envelope_ok))
        and clk.seconds < 5
    )
    acceptance(
        1,
        "scalar depth-2 run reaches eps by the certified T",
        ok,
        f"eta={cert.eta_max:.5g}, T={t_bound}, loss(T)={final:.3g}, "
        f"descent/envelope ok={rep.descent_ok.all()}/{rep.envelope_ok.all()}, {clk.seconds:.2f}s",
    )
    assert ok


def test_matrix_case_property_suite(acceptance):
    with Clock() as clk:
        spec = NetSpec.uniform(3, 5)
        phi = np.eye(5)
        w0 = balanced_init(spec, 0.8 * np.eye(5))
        cert = theorem1_certificate(w0, phi, 1e-5)
        trace = train(w0, Problem(phi), cert.eta_max, 1e-300, 10**4, Monitors.all())
        rep = verify_trajectory(trace, phi, cert.eta_max, cert)
    expected_c = 1 - 0.2 * math.sqrt(5)
    ok = (
        abs(cert.margin - expected_c) <= 1e-12
        and trace.iterations == 10**4
        and bool(rep.descent_ok.all() and rep.balance_ok.all() and rep.norm_ok.all() and rep.margin_ok.all())
        and clk.seconds < 30
    )
    acceptance(
        2,
        "5x5 depth-3 certified run keeps descent, balance, norm and margin",
        ok,
        f"c={cert.margin:.5f}, eta={cert.eta_max:.4g}, first failure={rep.first_failure()}, {clk.seconds:.2f}s",
    )
    assert ok


def test_empirical_linear_rate(acceptance):
    with Clock() as clk:
        spec = NetSpec.uniform(3, 5)
        phi = np.eye(5)
        w0 = balanced_init(spec, 0.8 * np.eye(5))
        best = None
        for eta in np.logspace(-4, 0, 5):
            tr = train(w0, Problem(phi), float(eta), 1e-5, 10**4)
            if tr.converged and (best is None or tr.iterations < best[1].iterations):
                best = (float(eta), tr)
    if best is None:
        acceptance(3, "grid-searched run converges at a linear rate", False, "no learning rate converged")
        assert False
    eta, tr = best
    steps = tr.iterations
    start = int(math.floor(0.2 * steps))
    t = np.arange(start, steps + 1, dtype=float)
    r2 = _r_squared(t, np.log(tr.loss[start:]))
    ok = steps <= 10**4 and r2 >= 0.99 and clk.seconds < 60
    acceptance(
        3,
        "grid-searched run converges at a linear rate",
        ok,
        f"best eta={eta:g}, steps={steps}, R^2={r2:.5f} over last 80%, {clk.seconds:.2f}s",
    )
    assert ok


def test_unbalanced_start_diverges(acceptance):
    with Clock() as clk:
        res = failure_unbalanced(0.75, 0.01, 2, 1, max_iters=50)
    loss = res.trace.loss
    after = loss[1:]
    ok = (
        abs(res.details["initial_margin"] - 0.75) <= 1e-12
        and after.size >= 1
        and bool(np.all(after >= 4.5))
        and bool(np.all(np.diff(after) > 0))
        and res.trace.status == "diverged"
        and res.trace.iterations <= 50
        and clk.seconds < 1
    )
    acceptance(
        4,
        "unbalanced start with margin 0.75 stays above the floor and diverges",
        ok,
        f"margin0={res.details['initial_margin']!r}, guard at t={res.trace.iterations}, "
        f"loss={after[-1]:.3g}, {clk.seconds:.3f}s",
    )
    assert ok


def test_identity_start_without_margin_floor(acceptance):
    details = []
    ok = True
    with Clock() as clk:
        for eta in (1e-3, 1e-2, 1e-1, 1.0):
            res = failure_no_margin(2, 2, eta, lam=1.0, steps=10**4, phi=np.diag([1.0, -1.0]))
            good = res.verdict and res.details["min_loss"] >= 0.5 and res.details["diagonal_residual"] <= 1e-8
            ok &= bool(good and res.trace.iterations == 10**4)
            details.append(f"eta={eta:g}: min loss {res.details['min_loss']:.4g}")
    ok &= clk.seconds < 5
    acceptance(5, "identity start towards diag(1,-1) never beats loss 0.5", ok, "; ".join(details) + f", {clk.seconds:.2f}s")
    assert ok


def test_flow_matches_gradient_descent(acceptance):
    with Clock() as clk:
        w0 = balanced_init(NetSpec((1, 1, 1, 1)), np.array([[0.5]]))
        cfg = FlowConfig(3, 1e-4, 1.0, "rk4")
        full = compare_flow_gd(w0, [[1.0]], 1e-4, 10**4, cfg)
        half = compare_flow_gd(w0, [[1.0]], 5e-5, 2 * 10**4, cfg)
    ratio = half.max_deviation / full.max_deviation
    ok = full.max_deviation <= 1e-2 and 0.3 <= ratio <= 0.7 and clk.seconds < 10
    acceptance(
        6,
        "depth-3 scalar descent tracks the end-to-end flow to first order",
        ok,
        f"dev(eta)={full.max_deviation:.3e}, dev(eta/2)={half.max_deviation:.3e}, ratio={ratio:.3f}, {clk.seconds:.2f}s",
    )
    assert ok


def test_layerwise_balance_probability(acceptance):
    with Clock() as clk:
        rep = mc_balance_probability(NetSpec.uniform(3, 4), 0.1, 1.386, 1000, seed=0)
    threshold = 0.900 - 3 * math.sqrt(0.9 * 0.1 / 1000)
    ok = rep.empirical_p >= threshold and rep.bound >= 0.9 and clk.seconds < 5
    acceptance(
        7,
        "layer-wise Gaussian stacks are 1.386-balanced often enough",
        ok,
        f"{rep.successes}/{rep.trials}={rep.empirical_p:.3f} >= {threshold:.4f}, bound {rep.bound:.4f}, {clk.seconds:.2f}s",
    )
    assert ok


def test_balanced_init_margin_probability(acceptance):
    with Clock() as clk:
        phi = synth_problem("random_gaussian_target", (1, 100), seed=0).phi
        spec = NetSpec((100, 10, 10, 1))
        rep = mc_margin_probability(spec, phi, "balanced_lemma6", 1e-3, 2000, seed=0)
    ok = rep.empirical_p >= 0.25 - rep.slack and clk.seconds < 30
    acceptance(
        8,
        "balanced init at s=1e-3, d0=100 has margin >= 5e-5 with probability >= 0.25",
        ok,
        f"{rep.successes}/{rep.trials}={rep.empirical_p:.4f}, slack {rep.slack:.4f}, "
        f"closed-form p={rep.bound:.4f}, {clk.seconds:.2f}s",
    )
    assert ok


def test_whitening_pipeline(acceptance):
    with Clock() as clk:
        rng = np.random.default_rng(0)
        mix = rng.normal(size=(16, 16))
        raw = Dataset(mix @ rng.normal(size=(16, 256)), rng.normal(size=(3, 256)))
        _, white = whiten(raw)
        white = rescale_labels(white)
        mo = empirical_moments(white)
        cov_err = matlin.frobenius(mo.lxx - np.eye(16))
        worst = 0.0
        for _ in range(20):
            W = rng.normal(size=(3, 16))
            direct = regression_loss(W, white)
            via = 0.5 * float(np.sum((W - mo.lyx) ** 2)) + mo.opt_const
            worst = max(worst, abs(via - direct) / abs(direct))
    ok = cov_err <= 1e-10 and worst <= 1e-9 and clk.seconds < 1
    acceptance(
        9,
        "whitened covariance is the identity and the loss decomposes",
        ok,
        f"||cov - I||_F={cov_err:.2e}, worst relative loss gap={worst:.2e}, {clk.seconds:.3f}s",
    )
    assert ok


def _direct_loss(layers, phi):
    prod = layers[0]
    for w in layers[1:]:
        prod = w @ prod
    r = prod - phi
    return 0.5 * float(np.sum(r * r))


def test_gradients_match_finite_differences(acceptance):
    rng = np.random.default_rng(1)
    h = 1e-5
    worst = 0.0
    with Clock() as clk:
        for _ in range(50):
            depth = int(rng.integers(1, 5))
            dims = tuple(int(x) for x in rng.integers(1, 7, size=depth + 1))
            layers = [rng.normal(size=(dims[j + 1], dims[j])) for j in range(depth)]
            phi = rng.normal(size=(dims[-1], dims[0]))
            analytic = gradients(WeightStack.from_layers(layers), Problem(phi))
            for j, layer in enumerate(layers):
                fd = np.zeros_like(layer)
                for idx in np.ndindex(layer.shape):
                    saved = layer[idx]
                    layer[idx] = saved + h
                    up = _direct_loss(layers, phi)
                    layer[idx] = saved - h
                    down = _direct_loss(layers, phi)
                    layer[idx] = saved
                    fd[idx] = (up - down) / (2 * h)
                scale = max(matlin.frobenius(analytic[j]), 1e-12)
                worst = max(worst, matlin.frobenius(analytic[j] - fd) / scale)
    ok = worst <= 1e-6 and clk.seconds < 5
    acceptance(10, "analytic gradients match central differences", ok, f"worst relative error {worst:.2e}, {clk.seconds:.2f}s")
    assert ok


def _near_balanced_stack(rng, noise):
    depth = int(rng.integers(1, 6))
    d0, dn = (int(x) for x in rng.integers(1, 9, size=2))
    hidden = [int(rng.integers(max(d0, dn), 9)) for _ in range(depth - 1)]
    spec = NetSpec((d0, *hidden, dn))
    w = balanced_init(spec, rng.normal(size=(dn, d0)) * rng.uniform(0.2, 2.0))
    return WeightStack(spec, tuple(x + noise * rng.normal(size=x.shape) for x in w.layers))


def test_gram_powers_layer_norms_and_margin_claim(acceptance):
    rng = np.random.default_rng(2)
    with Clock() as clk:
        gap_ok = 0
        for _ in range(200):
            w = _near_balanced_stack(rng, 1e-3)
            gap_ok += all(
                pg <= pb + 1e-10 * max(1.0, pb) and sg <= sb + 1e-10 * max(1.0, sb)
                for pg, pb, sg, sb in gram_power_gaps(w)
            )
        norm_ok = applicable = 0
        while applicable < 200:
            applicable_now, largest, bound = layer_norm_bound(_near_balanced_stack(rng, 1e-5))
            if not applicable_now:
                continue
            applicable += 1
            norm_ok += largest <= bound * (1 + 1e-12)
        claim = mc_margin_implies_sigma(10**4, max_dim=5, seed=3)
    ok = gap_ok == 200 and norm_ok == 200 and claim.violations == 0 and clk.seconds < 30
    acceptance(
        11,
        "Gram-power gaps, layer-norm bound and margin claim hold on random instances",
        ok,
        f"gap {gap_ok}/200, norm {norm_ok}/200, claim violations {claim.violations}/{claim.trials} "
        f"(worst slack {claim.worst_gap:.2e}), {clk.seconds:.2f}s",
    )
    assert ok


def test_balanced_init_converges_over_wider_scale_range(acceptance):
    phi = synth_problem("scalar_regression", (1, 32), seed=0).phi
    grid = np.logspace(-3, 0, 12)
    counts = {}
    with Clock() as clk:
        for depth in (3, 8):
            spec = NetSpec((32,) + (8,) * (depth - 1) + (1,))
            for scheme in ("layerwise", "balanced"):
                res = std_sweep(spec, phi, scheme, grid, eps=1e-5, cap=2 * 10**5, seed=0)
                counts[(scheme, depth)] = res.n_converged
    n = grid.size
    ok = (
        counts[("layerwise", 8)] < counts[("balanced", 8)]
        and counts[("balanced", 8)] >= 0.8 * n
        and clk.seconds < 600
    )
    detail = ", ".join(f"{s} depth {d}: {c}/{n}" for (s, d), c in sorted(counts.items()))
    acceptance(12, "balanced init converges over a wider range of scales at depth 8", ok, f"{detail}, {clk.seconds:.1f}s")
    assert ok
