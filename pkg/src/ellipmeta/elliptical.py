"""Elliptical density generators, the J1/J2 information constants, and the
base random samplers (standard elliptical matrices, inverse Wishart and its
generalized form, multivariate t, and random-effects model data).

Conventions
-----------
The inverse Wishart ``IW_p(nu, A)`` is parameterized by its kernel

    density(Psi)  proportional to  det(Psi)^(-nu/2) * exp(-tr(Psi^{-1} A) / 2),

i.e. ``Psi = W^{-1}`` with ``W ~ Wishart(dof = nu - p - 1, scale = A^{-1})``.
This convention is forced by the proposal factorizations used in
:mod:`ellipmeta.mcmc`; external libraries often use ``nu - p - 1`` as the
degrees-of-freedom label instead.

The generalized inverse Wishart ``GIW_p(nu, A, f)`` has kernel
``det(Psi)^(-nu/2) * f(tr(Psi^{-1} A))`` where ``f`` is the model's density
generator for a p x n data matrix.  For the Student-t generator it is sampled
exactly as ``Psi = (xi / d) * Omega`` with ``Omega ~ IW_p(nu, A)`` and
``xi ~ chi^2`` whose degrees of freedom are chosen so the mixture's tail
exponent matches the kernel: ``mix_dof = p*n + d - p*(nu - p - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaln

from .linalg import SpdMatrix, cholesky_lower, symmetrize

MC_J_SAMPLES = 200_000


class UnsupportedSamplerError(ValueError):
    """Sampling requested for a generator that only supports evaluation."""


class InvalidDofError(ValueError):
    """Degrees of freedom outside the range where the sampler is defined."""


class GeneratorUnusableError(ValueError):
    """A custom generator produced non-finite values during Monte Carlo."""


@dataclass(frozen=True)
class DensityGenerator:
    """Descriptor of the elliptical family through its density generator f.

    ``kind`` is one of ``"normal"``, ``"student_t"``, ``"custom"``.  Custom
    generators supply ``log_f(u)`` (log density generator, any fixed
    normalization) and ``score(u) = f'(u)/f(u)``, both vectorized over u >= 0.
    """

    kind: str
    df: float | None = None
    log_f: Callable[[np.ndarray], np.ndarray] | None = None
    score: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("normal", "student_t", "custom"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.kind == "student_t" and not (self.df is not None and self.df > 0):
            raise ValueError("student_t generator requires df > 0")
        if self.kind == "custom" and (self.log_f is None or self.score is None):
            raise ValueError("custom generator requires log_f and score callables")

    @classmethod
    def normal(cls) -> "DensityGenerator":
        return cls(kind="normal")

    @classmethod
    def student_t(cls, df: float) -> "DensityGenerator":
        return cls(kind="student_t", df=float(df))

    @classmethod
    def custom(cls, log_f, score) -> "DensityGenerator":
        return cls(kind="custom", log_f=log_f, score=score)


def _check_nonnegative(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("density generator argument must be >= 0")
    return u


def log_generator(gen: DensityGenerator, u, p: int, n: int):
    """log f(u) for a p x n data matrix, normalizing constant included.

    Including the constant keeps kernels from different (mu, Psi) comparable;
    it still cancels in Metropolis-Hastings ratios.
    """
    u = _check_nonnegative(u)
    pn = p * n
    if gen.kind == "normal":
        out = -0.5 * u - 0.5 * pn * np.log(2.0 * np.pi)
    elif gen.kind == "student_t":
        d = gen.df
        logk = gammaln((d + pn) / 2.0) - gammaln(d / 2.0) - 0.5 * pn * np.log(np.pi * d)
        out = logk - 0.5 * (pn + d) * np.log1p(u / d)
    else:
        out = np.asarray(gen.log_f(u), dtype=float)
    return out if out.ndim else float(out)


def score_ratio(gen: DensityGenerator, u, p: int, n: int):
    """f'(u)/f(u); constantly -1/2 for the normal generator."""
    u = _check_nonnegative(u)
    pn = p * n
    if gen.kind == "normal":
        out = np.full_like(u, -0.5)
    elif gen.kind == "student_t":
        out = -(pn + gen.df) / (2.0 * (gen.df + u))
    else:
        out = np.asarray(gen.score(u), dtype=float)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class JConstants:
    """The two scalar information constants J_i = E[(R^2)^i (f'/f)^2(R^2)].

    ``method`` records how the pair was obtained; Monte Carlo estimates carry
    their standard errors (None for closed forms).
    """

    j1: float
    j2: float
    method: str  # "closed_form" | "monte_carlo" | "mixed"
    sample_count: int | None = None
    seed: int | None = None
    se_j1: float | None = None
    se_j2: float | None = None


def sample_r2(gen: DensityGenerator, p: int, n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw the squared radius R^2 = ||vec(Z)||^2 of the standard elliptical.

    Normal: chi-square with p*n dof.  Student-t: d * chi2_pn / chi2_d.
    Custom: inverse-CDF sampling on a log grid of the radial density
    r^(pn/2 - 1) f(r), normalized numerically.
    """
    pn = p * n
    if gen.kind == "normal":
        return rng.chisquare(pn, size=size)
    if gen.kind == "student_t":
        return gen.df * rng.chisquare(pn, size=size) / rng.chisquare(gen.df, size=size)
    # Custom: grid-based inverse CDF.  Expand the grid until the log radial
    # density has dropped 60 nats below its maximum at both ends.
    lo, hi = 1e-10, 1e4
    for _ in range(60):
        r = np.geomspace(lo, hi, 4097)
        logd = (0.5 * pn - 1.0) * np.log(r) + np.asarray(gen.log_f(r), dtype=float)
        if not np.all(np.isfinite(logd)):
            raise GeneratorUnusableError("custom generator produced non-finite log density")
        peak = np.max(logd)
        if logd[-1] > peak - 60.0:
            hi *= 100.0
            continue
        if logd[0] > peak - 60.0 and lo > 1e-300:
            lo /= 100.0
            continue
        break
    dens = np.exp(logd - peak)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(r))])
    if cdf[-1] <= 0 or not np.isfinite(cdf[-1]):
        raise GeneratorUnusableError("custom generator radial density does not normalize")
    cdf /= cdf[-1]
    return np.interp(rng.uniform(size=size), cdf, r)


def j_constants(
    gen: DensityGenerator,
    p: int,
    n: int,
    rng: np.random.Generator | None = None,
    samples: int = MC_J_SAMPLES,
) -> JConstants:
    """Compute (J1, J2) for the given generator and model shape.

    Closed forms: normal J1 = pn/4, J2 = (2pn + (pn)^2)/4; Student-t
    J2 = pn(pn+2)(pn+d) / (4(pn+2+d)) with J1 estimated by Monte Carlo.
    Custom generators get both constants by Monte Carlo with recorded
    standard errors.
    """
    pn = p * n
    if pn < 1:
        raise ValueError("p*n must be >= 1")
    if gen.kind == "normal":
        return JConstants(j1=pn / 4.0, j2=(2.0 * pn + pn * pn) / 4.0, method="closed_form")

    if rng is None:
        rng = np.random.default_rng(0)
    seed = None
    r2 = sample_r2(gen, p, n, samples, rng)
    s = np.asarray(score_ratio(gen, r2, p, n), dtype=float)
    g1 = r2 * s * s
    if not np.all(np.isfinite(g1)):
        raise GeneratorUnusableError("non-finite values in Monte Carlo J estimation")
    j1 = float(np.mean(g1))
    se1 = float(np.std(g1, ddof=1) / np.sqrt(samples))

    if gen.kind == "student_t":
        d = gen.df
        j2 = pn * (pn + 2.0) * (pn + d) / (4.0 * (pn + 2.0 + d))
        return JConstants(
            j1=j1, j2=j2, method="mixed", sample_count=samples, seed=seed, se_j1=se1
        )

    g2 = r2 * g1
    if not np.all(np.isfinite(g2)):
        raise GeneratorUnusableError("non-finite values in Monte Carlo J estimation")
    j2 = float(np.mean(g2))
    se2 = float(np.std(g2, ddof=1) / np.sqrt(samples))
    return JConstants(
        j1=j1, j2=j2, method="monte_carlo", sample_count=samples, seed=seed, se_j1=se1, se_j2=se2
    )


def sample_standard_elliptical(
    gen: DensityGenerator, p: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw a p x n matrix from the standard elliptical family.

    For Student-t a single chi-square mixing variable is shared by all
    entries, matching the joint matrix-variate law.
    """
    z = rng.standard_normal((p, n))
    if gen.kind == "normal":
        return z
    if gen.kind == "student_t":
        return z / np.sqrt(rng.chisquare(gen.df) / gen.df)
    raise UnsupportedSamplerError("custom generators support evaluation only")


def _bartlett_lower(dof: float, p: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Batched lower-triangular Bartlett factors T with T T^T ~ Wishart(dof, I)."""
    t = np.zeros((size, p, p))
    for j in range(p):
        t[:, j, j] = np.sqrt(rng.chisquare(dof - j, size=size))
    if p > 1:
        rows, cols = np.tril_indices(p, k=-1)
        t[:, rows, cols] = rng.standard_normal((size, rows.size))
    return t


def inverse_wishart_batch(
    nu: float, a: np.ndarray, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Batched draws from IW_p(nu, A); see the module docstring convention.

    ``a`` may be a single (p, p) matrix or a (size, p, p) stack of scales.
    """
    a = np.asarray(a, dtype=float)
    p = a.shape[-1]
    if not nu > 2 * p:
        raise InvalidDofError(f"inverse Wishart requires nu > 2p, got nu={nu}, p={p}")
    dof = nu - p - 1  # implied Wishart dof for W = Psi^{-1}
    t = _bartlett_lower(dof, p, size, rng)
    if a.ndim == 2:
        c = np.linalg.cholesky(np.linalg.inv(a))
        m = np.einsum("ij,bjk->bik", c, t)
    else:
        c = np.linalg.cholesky(np.linalg.inv(a))
        m = c @ t
    # W = M M^T with M lower, so Psi = W^{-1} = M^{-T} M^{-1}.
    minv = np.linalg.inv(m)
    out = np.swapaxes(minv, -1, -2) @ minv
    return symmetrize(out)


def sample_inverse_wishart(nu: float, a: SpdMatrix, rng: np.random.Generator) -> SpdMatrix:
    """One draw from IW_p(nu, A)."""
    mat = a.mat if isinstance(a, SpdMatrix) else np.asarray(a, dtype=float)
    draw = inverse_wishart_batch(nu, mat, 1, rng)[0]
    return SpdMatrix.from_sym(draw)


def giw_mixing_dof(gen: DensityGenerator, nu: float, p: int, pn: int) -> float:
    """Chi-square mixing dof that makes (xi/d)*IW_p(nu, A) match GIW_p(nu, A, f).

    Matching the tail exponents gives mix_dof = pn + d - p*(nu - p - 1); this
    reduces to d itself when nu = n + p + 1.
    """
    d = gen.df
    mix = pn + d - p * (nu - p - 1)
    if mix <= 0:
        raise InvalidDofError(
            f"generalized inverse Wishart with nu={nu}, p={p}, pn={pn} needs "
            f"generator df > {d - mix:g} (got {d:g}); the kernel is not integrable"
        )
    return mix


def giw_batch(
    gen: DensityGenerator,
    nu: float,
    a: np.ndarray,
    pn: int,
    size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Batched draws from GIW_p(nu, A, f) for the normal or Student-t generator."""
    a = np.asarray(a, dtype=float)
    p = a.shape[-1]
    if gen.kind == "normal":
        return inverse_wishart_batch(nu, a, size, rng)
    if gen.kind == "student_t":
        mix = giw_mixing_dof(gen, nu, p, pn)
        xi = rng.chisquare(mix, size=size)
        omega = inverse_wishart_batch(nu, a, size, rng)
        return (xi / gen.df)[:, None, None] * omega
    raise UnsupportedSamplerError("custom generators support evaluation only")


def sample_giw(
    gen: DensityGenerator, nu: float, a: SpdMatrix, pn: int, rng: np.random.Generator
) -> SpdMatrix:
    """One draw from GIW_p(nu, A, f); ``pn`` is the model's total dimension p*n."""
    mat = a.mat if isinstance(a, SpdMatrix) else np.asarray(a, dtype=float)
    return SpdMatrix.from_sym(giw_batch(gen, nu, mat, pn, 1, rng)[0])


def log_giw_density(
    gen: DensityGenerator, nu: float, a: np.ndarray, pn: int, psi: np.ndarray
) -> float:
    """Unnormalized log GIW_p(nu, A, f) density, keeping all A-dependence.

    The scale enters the normalization through det(A)^((nu-p-1)/2); constants
    independent of (A, Psi) are dropped.
    """
    a = np.asarray(a, dtype=float)
    p = a.shape[-1]
    _, logdet_a = cholesky_lower(a)
    _, logdet_psi = cholesky_lower(np.asarray(psi, dtype=float))
    tr = float(np.trace(np.linalg.solve(psi, a)))
    n = pn // p
    return 0.5 * (nu - p - 1) * logdet_a - 0.5 * nu * logdet_psi + float(
        log_generator(gen, tr, p, n)
    )


def multivariate_t_batch(
    df: float,
    loc: np.ndarray,
    scale_chol: np.ndarray,
    size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Batched t_p(df, loc, scale) draws given the scale's Cholesky factor(s)."""
    p = loc.shape[-1]
    z = rng.standard_normal((size, p))
    mix = np.sqrt(rng.chisquare(df, size=size) / df)
    if scale_chol.ndim == 2:
        step = z @ scale_chol.T
    else:
        step = np.einsum("bij,bj->bi", scale_chol, z)
    return loc + step / mix[:, None]


def sample_multivariate_t(
    df: float, loc: np.ndarray, scale: SpdMatrix | np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """One draw from the p-variate t with the given location and scale matrix."""
    if df <= 0:
        raise InvalidDofError(f"t distribution requires df > 0, got {df}")
    loc = np.atleast_1d(np.asarray(loc, dtype=float))
    chol = scale.chol if isinstance(scale, SpdMatrix) else cholesky_lower(np.atleast_2d(scale))[0]
    return multivariate_t_batch(df, loc, chol, 1, rng)[0]


def sample_model_data(
    mu: np.ndarray,
    psi: np.ndarray,
    u: list[np.ndarray] | np.ndarray,
    gen: DensityGenerator,
    rng: np.random.Generator,
) -> np.ndarray:
    """Simulate a p x n data matrix from the random-effects model.

    Normal: x_i = mu + lambda_i + eps_i with independent lambda_i ~ N(0, Psi)
    and eps_i ~ N(0, U_i).  Student-t: the same Gaussian construction divided
    by a single shared sqrt(chi2_d / d), giving the joint matrix-variate t
    with dispersion blockdiag(Psi + U_i).
    """
    return sample_model_data_batch(mu, psi, u, gen, 1, rng)[0]


def sample_model_data_batch(
    mu: np.ndarray,
    psi: np.ndarray,
    u: list[np.ndarray] | np.ndarray,
    gen: DensityGenerator,
    size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Batched model-data simulation; returns (size, p, n)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    psi = np.atleast_2d(np.asarray(psi, dtype=float))
    u = np.asarray(u, dtype=float)
    p = mu.shape[0]
    n = u.shape[0]
    if psi.shape != (p, p) or u.shape != (n, p, p):
        raise ValueError(
            f"dimension mismatch: mu has p={p}, psi {psi.shape}, within-study stack {u.shape}"
        )
    if gen.kind not in ("normal", "student_t"):
        raise UnsupportedSamplerError("custom generators support evaluation only")
    # Factor Psi + U_i once per study; PSD inputs (e.g. zero matrices) are
    # handled through the eigendecomposition fallback.
    roots = np.empty((n, p, p))
    for i in range(n):
        a = symmetrize(psi + u[i])
        try:
            roots[i] = cholesky_lower(a)[0]
        except Exception:
            w, v = np.linalg.eigh(a)
            w = np.clip(w, 0.0, None)
            roots[i] = (v * np.sqrt(w)) @ v.T
    z = rng.standard_normal((size, n, p))
    x = np.einsum("nij,bnj->bin", roots, z)  # (size, p, n)
    if gen.kind == "student_t":
        mix = np.sqrt(rng.chisquare(gen.df, size=size) / gen.df)
        x /= mix[:, None, None]
    return mu[None, :, None] + x
