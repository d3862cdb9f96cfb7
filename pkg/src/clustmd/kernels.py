"""Latent-dimension layout and the probability/moment kernels.

Ordinal levels are intervals of a univariate latent Gaussian, so their
probabilities and conditional moments are closed form. Nominal responses
are argmax regions of a (K-1)-dimensional Gaussian and are handled by
Monte Carlo.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfcx, log_ndtr, ndtr

from .dataset import CONTINUOUS, NOMINAL, ORDINAL, ColumnSpec

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)
_SQRT_HALF_PI = np.sqrt(np.pi / 2)
_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


@dataclass(frozen=True)
class LatentLayout:
    """Map from observed columns to latent dimensions.

    Dimensions ``[0, C)`` are continuous, ``[C, C+O)`` ordinal and each
    nominal variable owns a contiguous block of width ``K_j - 1`` after that.
    """

    C: int
    O: int  # noqa: E741
    nominal_levels: tuple[int, ...]
    nominal_blocks: tuple[tuple[int, int], ...]

    @property
    def P(self) -> int:
        return self.C + self.O + sum(k - 1 for k in self.nominal_levels)

    @property
    def CO(self) -> int:
        return self.C + self.O

    @property
    def n_nominal_dims(self) -> int:
        return self.P - self.CO

    @property
    def has_nominal(self) -> bool:
        return bool(self.nominal_levels)


def build_layout(schema: list[ColumnSpec] | tuple[ColumnSpec, ...]) -> LatentLayout:
    C = sum(c.kind == CONTINUOUS for c in schema)
    O = sum(c.kind == ORDINAL for c in schema)  # noqa: E741
    levels = tuple(int(c.levels) for c in schema if c.kind == NOMINAL)
    blocks, start = [], C + O
    for k in levels:
        blocks.append((start, start + k - 1))
        start += k - 1
    return LatentLayout(C, O, levels, tuple(blocks))


# --------------------------------------------------------------------------
# univariate truncated normal
# --------------------------------------------------------------------------

def _mills(t):
    """Upper-tail Mills ratio (1 - Phi(t)) / phi(t), finite for all t >= -big."""
    return _SQRT_HALF_PI * erfcx(t / np.sqrt(2.0))


def standard_truncated(a, b):
    """Log-mass and first two moments of N(0, 1) truncated to ``(a, b)``.

    Returns ``(log_z, m1, m2)`` arrays broadcast from ``a`` and ``b``. The
    interval is reflected so most of it lies at or below zero; one-sided tail
    intervals use the scaled complementary error function so nothing
    underflows, and intervals that are narrow on the local scale use
    Gauss-Legendre quadrature to avoid cancellation.
    """
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        return _standard_truncated(a, b)


def _standard_truncated(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    a = a.astype(float, copy=True)
    b = b.astype(float, copy=True)
    if np.any(~(a <= b)):
        raise ValueError("truncation interval must satisfy lo <= hi")
    # a point interval carries no mass; its conditional law is the point itself
    point = a == b
    flip = (a + b) > 0
    a[flip], b[flip] = -b[flip], -a[flip]
    a_, b_ = a.copy(), b.copy()
    log_z = np.empty_like(a)
    m1 = np.empty_like(a)
    m2 = np.empty_like(a)

    width = b - a
    scale = np.abs(a) + np.abs(b) + 1.0
    narrow = np.isfinite(width) & (width * scale < 1.0) & ~point
    tail = ~narrow & ~point & (b <= 0)
    mid = ~narrow & ~point & ~tail
    log_z[point] = -np.inf
    m1[point] = a_[point]
    m2[point] = a_[point] ** 2

    if np.any(narrow):
        lo, hi = a_[narrow], b_[narrow]
        c = np.where(hi < 0, hi, np.where(lo > 0, lo, 0.0))
        half = 0.5 * (hi - lo)
        x = 0.5 * (hi + lo)[:, None] + half[:, None] * _GL_X[None, :]
        w = _GL_W[None, :] * np.exp(-0.5 * (x * x - (c * c)[:, None]))
        sw = w.sum(1)
        log_z[narrow] = np.log(sw * half) - 0.5 * c * c - _LOG_SQRT_2PI
        m1[narrow] = (w * x).sum(1) / sw
        m2[narrow] = (w * x * x).sum(1) / sw

    if np.any(tail):
        lo, hi = a_[tail], b_[tail]
        e = np.exp(0.5 * (hi * hi - lo * lo))  # 0 when lo = -inf
        e = np.where(np.isneginf(lo), 0.0, e)
        d = _mills(-hi) - e * _mills(-lo)
        log_z[tail] = -0.5 * hi * hi - _LOG_SQRT_2PI + np.log(d)
        m1[tail] = (e - 1.0) / d
        ae = np.where(np.isneginf(lo), 0.0, lo * e)
        m2[tail] = 1.0 + (ae - hi) / d

    if np.any(mid):
        lo, hi = a_[mid], b_[mid]
        z = ndtr(hi) - ndtr(lo)
        pa = np.where(np.isinf(lo), 0.0, np.exp(-0.5 * lo * lo))
        pb = np.where(np.isinf(hi), 0.0, np.exp(-0.5 * hi * hi))
        log_z[mid] = np.log(z)
        zz = z * np.sqrt(2 * np.pi)
        m1[mid] = (pa - pb) / zz
        apa = np.where(np.isinf(lo), 0.0, lo * pa)
        bpb = np.where(np.isinf(hi), 0.0, hi * pb)
        m2[mid] = 1.0 + (apa - bpb) / zz

    m1[flip] = -m1[flip]
    # conditional variance can round slightly negative for very narrow cells
    m2 = np.maximum(m2, m1 * m1)
    return log_z, m1, m2


def log_interval_prob(mu, sigma, lo, hi):
    """Vectorised ``log P(lo < z < hi)`` for ``z ~ N(mu, sigma^2)``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    a = (np.asarray(lo, dtype=float) - mu) / sigma
    b = (np.asarray(hi, dtype=float) - mu) / sigma
    a, b = np.broadcast_arrays(a, b)
    # reflect so the upper endpoint is the one nearer -inf-safe evaluation
    flip = (a + b) > 0
    a2 = np.where(flip, -b, a)
    b2 = np.where(flip, -a, b)
    lb = log_ndtr(b2)
    la = log_ndtr(a2)
    with np.errstate(divide="ignore"):
        out = lb + np.log1p(-np.exp(la - lb))
    # narrow cells lose precision in the log-difference; use quadrature there
    width = b2 - a2
    with np.errstate(invalid="ignore"):
        narrow = np.isfinite(width) & (width > 0) & (width * (np.abs(a2) + np.abs(b2) + 1.0) < 1.0)
    if np.any(narrow):
        out = np.array(out, dtype=float)
        out[narrow] = standard_truncated(a2[narrow], b2[narrow])[0]
    return out


def ordinal_interval_prob(mu: float, sigma: float, gamma_lo: float, gamma_hi: float) -> float:
    """P(gamma_lo < z < gamma_hi) for z ~ N(mu, sigma^2)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if gamma_lo > gamma_hi:
        raise ValueError("gamma_lo must not exceed gamma_hi")
    if gamma_lo == gamma_hi:
        return 0.0
    a = (gamma_lo - mu) / sigma
    b = (gamma_hi - mu) / sigma
    if a + b > 0:
        return float(ndtr(-a) - ndtr(-b))
    return float(ndtr(b) - ndtr(a))


def truncated_moments(mu, sigma, lo, hi):
    """Vectorised ``(log_z, E[z], E[z^2])`` for N(mu, sigma^2) truncated to (lo, hi)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    log_z, m1, m2 = standard_truncated((lo - mu) / sigma, (hi - mu) / sigma)
    m = mu + sigma * m1
    s = mu * mu + 2 * mu * sigma * m1 + sigma * sigma * m2
    return log_z, m, np.maximum(s, m * m)


def truncated_normal_moments(mu: float, sigma: float, gamma_lo: float, gamma_hi: float) -> tuple[float, float]:
    """First and second raw moments of N(mu, sigma^2) conditioned on (gamma_lo, gamma_hi).

    Raises ``ValueError`` when the interval carries no numerical mass.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not gamma_lo < gamma_hi:
        raise ValueError("empty truncation interval")
    log_z, m, s = truncated_moments(mu, sigma, gamma_lo, gamma_hi)
    if log_z < np.log(1e-300):
        raise ValueError(
            f"interval ({gamma_lo}, {gamma_hi}) has negligible mass under N({mu}, {sigma}^2); "
            "degenerate cluster/level pairing")
    return float(m), float(s)


# --------------------------------------------------------------------------
# nominal Monte Carlo
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MCEntry:
    """Monte Carlo summary for one (cluster, nominal variable) pair.

    ``mean[k]`` and ``sq[k]`` are per-dimension E[z] and E[z^2] among draws
    producing category ``k + 1``.
    """

    probs: np.ndarray
    counts: np.ndarray
    mean: np.ndarray
    sq: np.ndarray
    S: int
    seed: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"S": self.S, "seed": list(self.seed), "probs": self.probs.tolist(),
                "counts": self.counts.tolist(), "mean": self.mean.tolist(), "sq": self.sq.tolist()}


def classify_nominal(z: np.ndarray) -> np.ndarray:
    """0-based category of each row: 0 if every component is negative, else 1 + argmax.

    Ties go to the lowest index.
    """
    z = np.atleast_2d(z)
    return _classify_columns(np.ascontiguousarray(z.T))


def _classify_columns(zt: np.ndarray) -> np.ndarray:
    # zt is d x S; a column loop beats argmax(axis=1) for small d
    mx = zt[0].copy()
    am = np.zeros(zt.shape[1], dtype=np.intp)
    for p in range(1, zt.shape[0]):
        col = zt[p]
        am[col > mx] = p
        np.maximum(mx, col, out=mx)
    am += 1
    am[mx < 0] = 0
    return am


def mc_seed(master_seed: int, iteration: int, g: int, j: int) -> tuple[int, ...]:
    return (int(master_seed), int(iteration), int(g), int(j))


def nominal_mc_table(mu_j, var_j, S: int, seed) -> MCEntry:
    """Simulate ``S`` latent vectors and tabulate category frequencies and moments.

    Zero-count categories get probability ``1/(2S)`` before renormalising and
    fall back to the untruncated moments.
    """
    mu_j = np.atleast_1d(np.asarray(mu_j, dtype=float))
    var_j = np.atleast_1d(np.asarray(var_j, dtype=float))
    if S < 1:
        raise ValueError("S must be at least 1")
    if np.any(var_j <= 0):
        raise ValueError("variances must be positive")
    d = mu_j.size
    K = d + 1
    seed = tuple(int(s) for s in np.atleast_1d(seed))
    rng = np.random.default_rng(np.random.SeedSequence(list(seed)))
    zt = rng.standard_normal((d, S))
    zt *= np.sqrt(var_j)[:, None]
    zt += mu_j[:, None]
    cat = _classify_columns(zt)
    counts = np.bincount(cat, minlength=K)
    sums = np.empty((K, d))
    sqs = np.empty((K, d))
    for p in range(d):
        sums[:, p] = np.bincount(cat, weights=zt[p], minlength=K)
        sqs[:, p] = np.bincount(cat, weights=zt[p] * zt[p], minlength=K)
    probs = counts / S
    empty = counts == 0
    if empty.any():
        probs = np.where(empty, 0.5 / S, probs)
        probs = probs / probs.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / counts[:, None]
        sq = sqs / counts[:, None]
    mean[empty] = mu_j
    sq[empty] = mu_j ** 2 + var_j
    for arr in (probs, counts, mean, sq):
        arr.setflags(write=False)
    return MCEntry(probs, counts, mean, sq, int(S), seed)


@dataclass(frozen=True)
class NominalMCTable:
    """``entries[g][j]`` for cluster ``g`` and nominal variable ``j``."""

    entries: tuple[tuple[MCEntry, ...], ...]
    master_seed: int
    iteration: int

    def __getitem__(self, gj):
        g, j = gj
        return self.entries[g][j]

    def to_dict(self) -> dict:
        return {"master_seed": self.master_seed, "iteration": self.iteration,
                "clusters": [[e.to_dict() for e in row] for row in self.entries]}


def build_mc_table(mu: np.ndarray, var: np.ndarray, layout: LatentLayout, S: int,
                   master_seed: int, iteration: int) -> NominalMCTable:
    """Tables for every cluster and nominal variable from G x P means and variances."""
    rows = []
    for g in range(mu.shape[0]):
        rows.append(tuple(
            nominal_mc_table(mu[g, lo:hi], var[g, lo:hi], S, mc_seed(master_seed, iteration, g, j))
            for j, (lo, hi) in enumerate(layout.nominal_blocks)))
    return NominalMCTable(tuple(rows), int(master_seed), int(iteration))
