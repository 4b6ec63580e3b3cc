"""Datasets, whitening, label rescaling and synthetic problems."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import matlin
from .errors import ContractViolation, IngestionError
from .initialization import make_rng
from .network import Problem, format_float

RANK_TOL = 1e-10


@dataclass(frozen=True)
class Dataset:
    """Instances ``X`` (d_x x m) and labels ``Y`` (d_y x m), one example per column."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = matlin.as_matrix(self.X, "X")
        Y = matlin.as_matrix(self.Y, "Y")
        if X.shape[1] != Y.shape[1]:
            raise ContractViolation(f"X has {X.shape[1]} examples, Y has {Y.shape[1]}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def m(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class Moments:
    lxx: np.ndarray
    lyx: np.ndarray
    lyy: np.ndarray
    opt_const: float

    def problem(self) -> Problem:
        return Problem(self.lyx, self.opt_const)

    def to_json(self) -> dict:
        def enc(a):
            return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}

        return {
            "lxx": enc(self.lxx),
            "lyx": enc(self.lyx),
            "lyy": enc(self.lyy),
            "opt_const": float(self.opt_const),
        }


def empirical_moments(d: Dataset) -> Moments:
    """Uncentered second moments and the constant separating the regression
    loss from 0.5 * ||W - Lambda_yx||_F^2 on whitened data."""
    m = d.m
    lxx = d.X @ d.X.T / m
    lyx = d.Y @ d.X.T / m
    lyy = d.Y @ d.Y.T / m
    lxx = 0.5 * (lxx + lxx.T)
    lyy = 0.5 * (lyy + lyy.T)
    opt_const = -0.5 * float(np.sum(lyx * lyx)) + 0.5 * float(np.trace(lyy))
    return Moments(lxx, lyx, lyy, opt_const)


def regression_loss(W, d: Dataset) -> float:
    """(1 / 2m) ||W X - Y||_F^2."""
    r = np.asarray(W) @ d.X - d.Y
    return 0.5 * float(np.sum(r * r)) / d.m


def whitening_transform(lxx: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of the instance covariance."""
    q, lam = matlin.sym_eig(lxx)
    if lam[-1] <= RANK_TOL * max(lam[0], 0.0):
        raise ContractViolation(
            f"instance covariance is rank deficient: eigenvalue {lam[-1]:.3e} "
            f"vs largest {lam[0]:.3e}"
        )
    t = (q / np.sqrt(lam)) @ q.T
    return 0.5 * (t + t.T)


def whiten(d: Dataset) -> tuple[np.ndarray, Dataset]:
    """Map instances by T = Lambda_xx^{-1/2} so their covariance is the identity."""
    lxx = d.X @ d.X.T / d.m
    t = whitening_transform(0.5 * (lxx + lxx.T))
    return t, Dataset(t @ d.X, d.Y)


def rescale_labels(d: Dataset) -> Dataset:
    """Scale labels so that ||Lambda_yx||_F = 1."""
    lyx = d.Y @ d.X.T / d.m
    scale = matlin.frobenius(lyx)
    if scale == 0:
        raise ContractViolation("cross-covariance is zero; labels cannot be rescaled")
    return Dataset(d.X, d.Y / scale)


def prepare(d: Dataset, rescale: bool = True) -> tuple[Dataset, Moments]:
    """Whiten, optionally rescale labels, and compute the moments."""
    _, white = whiten(d)
    if rescale:
        white = rescale_labels(white)
    return white, empirical_moments(white)


@dataclass(frozen=True)
class CsvLayout:
    """Column selection for :func:`load_csv`.

    ``labels`` lists label column indices (negative indices count from the
    end); ``features`` defaults to every other column.
    """

    labels: tuple[int, ...] = (-1,)
    features: tuple[int, ...] | None = None
    header: bool = False


def load_csv(path, layout: CsvLayout = CsvLayout()) -> Dataset:
    """Read a numeric CSV with one example per row."""
    rows: list[list[float]] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(csv.reader(fh), start=1):
            if lineno == 1 and layout.header:
                continue
            if not raw or all(not c.strip() for c in raw):
                continue
            if width is None:
                width = len(raw)
            elif len(raw) != width:
                raise IngestionError(f"{path}:{lineno}: expected {width} fields, found {len(raw)}")
            try:
                rows.append([float(c) for c in raw])
            except ValueError:
                bad = next(c for c in raw if not _is_float(c))
                raise IngestionError(f"{path}:{lineno}: non-numeric value {bad!r}") from None
            if not all(math.isfinite(v) for v in rows[-1]):
                raise IngestionError(f"{path}:{lineno}: non-finite value")
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    cols = range(width)
    try:
        labels = sorted({cols[i] for i in layout.labels})
        features = (
            sorted({cols[i] for i in layout.features})
            if layout.features is not None
            else [c for c in cols if c not in labels]
        )
    except IndexError:
        raise IngestionError(f"{path}: column index out of range for {width} columns") from None
    if not features or not labels:
        raise IngestionError(f"{path}: layout selects no feature or no label columns")
    return Dataset(table[:, features].T, table[:, labels].T)


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def save_csv(d: Dataset, path, header: bool = True) -> None:
    """Write features then labels, one example per row, 17 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(
                [f"x{i}" for i in range(d.X.shape[0])] + [f"y{i}" for i in range(d.Y.shape[0])]
            )
        for k in range(d.m):
            writer.writerow([format_float(v) for v in np.concatenate([d.X[:, k], d.Y[:, k]])])


def synthetic_regression(d_x: int, m: int, d_y: int = 1, noise: float = 0.1, seed=None) -> Dataset:
    """Gaussian instances with labels from a random linear teacher plus noise."""
    rng = make_rng(seed)
    X = rng.normal(size=(d_x, m))
    teacher = rng.normal(size=(d_y, d_x)) / math.sqrt(d_x)
    Y = teacher @ X + noise * rng.normal(size=(d_y, m))
    return Dataset(X, Y)


def synth_problem(kind: str, dims: Sequence[int], seed=None, **params) -> Problem:
    """Desk-scale targets.

    ``dims = (d_N, d_0)``. Kinds:

    * ``random_gaussian_target``: i.i.d. normal entries scaled to unit Frobenius norm.
    * ``near_identity``: ``I + E`` with ``||E||_F = r`` (param ``r``, square only).
    * ``scalar_regression``: whitened synthetic dataset with rescaled labels
      (params ``m``, ``noise``); ``d_N`` must be 1.
    """
    d_out, d_in = (int(x) for x in dims)
    rng = make_rng(seed)
    if kind == "random_gaussian_target":
        phi = rng.normal(size=(d_out, d_in))
        return Problem(phi / matlin.frobenius(phi))
    if kind == "near_identity":
        if d_out != d_in:
            raise ContractViolation("near_identity needs a square target")
        r = float(params.get("r", 0.3))
        e = rng.normal(size=(d_out, d_in))
        return Problem(np.eye(d_out) + r * e / matlin.frobenius(e))
    if kind == "scalar_regression":
        if d_out != 1:
            raise ContractViolation("scalar_regression needs d_N = 1")
        m = int(params.get("m", 8 * d_in))
        noise = float(params.get("noise", 0.1))
        data = synthetic_regression(d_in, m, 1, noise, rng)
        _, moments = prepare(data)
        return moments.problem()
    raise ContractViolation(f"unknown problem kind {kind!r}")
