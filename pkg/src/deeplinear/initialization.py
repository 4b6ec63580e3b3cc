"""Weight initialization: layer-wise Gaussian, identity, and balanced."""

from __future__ import annotations

import numpy as np

from . import matlin
from .errors import ContractViolation
from .network import NetSpec, WeightStack

DEFAULT_SEED = 20190101


def make_rng(seed=None) -> np.random.Generator:
    """A numpy Generator from an int seed, a seed tuple, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        seed = DEFAULT_SEED
    return np.random.default_rng(seed)


def trial_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for trial ``index``; depends only on (master_seed, index)."""
    return np.random.default_rng([int(master_seed), int(index)])


def gaussian_layerwise(spec: NetSpec, s: float, seed=None) -> WeightStack:
    """Every entry of every layer drawn i.i.d. from N(0, s^2)."""
    if s <= 0:
        raise ContractViolation(f"standard deviation must be positive, got {s}")
    rng = make_rng(seed)
    layers = tuple(rng.normal(0.0, s, size=spec.layer_shape(j)) for j in range(1, spec.depth + 1))
    return WeightStack(spec, layers)


def identity_residual(spec: NetSpec) -> WeightStack:
    """All layers equal to the identity (requires uniform widths)."""
    if len(set(spec.dims)) != 1:
        raise ContractViolation(f"identity initialization needs equal widths, got {spec.dims}")
    d = spec.dims[0]
    return WeightStack(spec, tuple(np.eye(d) for _ in range(spec.depth)))


def balanced_init(spec: NetSpec, A=None, *, std: float | None = None, seed=None) -> WeightStack:
    """Perfectly balanced weights whose product is ``A``.

    If ``A`` is not given it is sampled with i.i.d. N(0, std^2) entries. With
    ``A = U S V^T`` (thin SVD, k = min(d_0, d_N)) the layers are
    ``W_N = U S^{1/N}``, ``W_j = S^{1/N}`` for hidden layers and
    ``W_1 = S^{1/N} V^T``, each placed in the top-left corner of an
    otherwise zero matrix of the right shape.
    """
    if not spec.full_rank_capable:
        raise ContractViolation(
            f"hidden widths {spec.dims[1:-1]} must be >= min(d_0, d_N) = "
            f"{min(spec.dims[0], spec.dims[-1])}"
        )
    target_shape = (spec.dims[-1], spec.dims[0])
    if A is None:
        if std is None or std <= 0:
            raise ContractViolation("balanced_init needs either A or a positive std")
        A = make_rng(seed).normal(0.0, std, size=target_shape)
    A = matlin.as_matrix(A, "A")
    if A.shape != target_shape:
        raise ContractViolation(f"A has shape {A.shape}, expected {target_shape}")

    n = spec.depth
    if n == 1:
        return WeightStack(spec, (A.copy(),))
    u, s, v = matlin.svd_thin(A)
    k = s.size
    root = s ** (1.0 / n)
    layers = []
    for j in range(1, n + 1):
        w = np.zeros(spec.layer_shape(j))
        if j == 1:
            w[:k, :] = root[:, None] * v.T
        elif j == n:
            w[:, :k] = u * root
        else:
            w[:k, :k] = np.diag(root)
        layers.append(w)
    return WeightStack(spec, tuple(layers))
