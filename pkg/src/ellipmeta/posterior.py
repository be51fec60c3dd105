"""Unnormalized log-posterior kernels for the overall mean and the
between-study covariance: the joint kernel, the conditional law of the mean
given the covariance, the marginal covariance kernel, and Rao-Blackwellized
posterior moments.

The boundary Psi = 0 (positive semidefinite) is admitted wherever every
Psi + U_i stays positive definite; priors are always evaluated through the
shifted matrices, never at Psi alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln

from .elliptical import DensityGenerator, log_generator
from .linalg import duplication_matrix, symmetrize
from .priors import GateResult, PriorSpec, PriorEvaluationError, log_prior_batch, propriety_gate


class UndefinedSecondMomentError(ValueError):
    """The conditional second moment does not exist for the given shape."""


class MarginalEvaluationError(ValueError):
    """Quadrature for the generic marginal kernel failed to converge."""


@dataclass(frozen=True)
class Dataset:
    """n studies, each a p-vector of effects with a known within-study
    covariance.  ``effects`` is (n, p) with one study per row; ``within_cov``
    is (n, p, p), validated symmetric positive semidefinite (strict
    definiteness is enforced at file ingestion, while the zero boundary is
    allowed for analytic checks)."""

    effects: np.ndarray
    within_cov: np.ndarray
    labels: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.effects.shape[0]

    @property
    def p(self) -> int:
        return self.effects.shape[1]

    @classmethod
    def create(cls, effects, within_cov, labels=None) -> "Dataset":
        effects = np.atleast_2d(np.asarray(effects, dtype=float))
        within_cov = np.asarray(within_cov, dtype=float)
        n, p = effects.shape
        if within_cov.shape != (n, p, p):
            raise ValueError(
                f"within-study covariance stack must be shape {(n, p, p)}, got {within_cov.shape}"
            )
        within_cov = symmetrize(within_cov)
        for i in range(n):
            w = np.linalg.eigvalsh(within_cov[i])
            tol = 1e-10 * max(1.0, float(np.max(np.abs(w))))
            if w[0] < -tol:
                raise ValueError(
                    f"within-study covariance of study {i} is not positive semidefinite "
                    f"(min eigenvalue {w[0]:.3g})"
                )
        if labels is None:
            labels = tuple(str(i + 1) for i in range(n))
        else:
            labels = tuple(str(x) for x in labels)
            if len(labels) != n:
                raise ValueError("number of labels must match the number of studies")
        effects.flags.writeable = False
        within_cov.flags.writeable = False
        return cls(effects=effects, within_cov=within_cov, labels=labels)


@dataclass(frozen=True)
class PosteriorKernel:
    """Dataset + prior + generator bound into a log-posterior evaluator."""

    dataset: Dataset
    prior: PriorSpec
    gate: GateResult = field(repr=False)

    @property
    def generator(self) -> DensityGenerator:
        return self.prior.generator

    @property
    def p(self) -> int:
        return self.dataset.p

    @property
    def n(self) -> int:
        return self.dataset.n

    @classmethod
    def build(
        cls,
        dataset: Dataset,
        prior_kind: str,
        generator: DensityGenerator,
        rng: np.random.Generator | None = None,
        enforce_gate: bool = True,
    ) -> "PosteriorKernel":
        prior = PriorSpec.build(prior_kind, generator, dataset.p, dataset.n, rng)
        gate = propriety_gate(prior_kind, dataset.p, dataset.n, generator, prior.j)
        if enforce_gate:
            gate.raise_if_rejected()
        if generator.kind == "student_t":
            m2 = dataset.p * dataset.n + generator.df - dataset.p - 2.0
            if m2 <= 0:
                raise UndefinedSecondMomentError(
                    f"p*n + df - p - 2 = {m2:g} <= 0: conditional mean covariance undefined"
                )
        return cls(dataset=dataset, prior=prior, gate=gate)

    @classmethod
    def from_prior(
        cls, dataset: Dataset, prior: PriorSpec, enforce_gate: bool = True
    ) -> "PosteriorKernel":
        """Bind a pre-built prior (e.g. with externally supplied J constants)."""
        if (prior.p, prior.n) != (dataset.p, dataset.n):
            raise ValueError("prior was built for a different model shape")
        gate = propriety_gate(prior.kind, dataset.p, dataset.n, prior.generator, prior.j)
        if enforce_gate:
            gate.raise_if_rejected()
        return cls(dataset=dataset, prior=prior, gate=gate)


def _per_study_inverses(psi: np.ndarray, data: Dataset):
    a = symmetrize(np.asarray(psi, dtype=float)[None, :, :] + data.within_cov)
    chol = np.linalg.cholesky(a)
    inv = symmetrize(np.linalg.inv(a))
    logdets = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return inv, logdets


def weighted_mean(psi: np.ndarray, data: Dataset) -> np.ndarray:
    """Precision-weighted pooled mean (sum_i A_i^{-1})^{-1} sum_i A_i^{-1} x_i
    with A_i = Psi + U_i."""
    inv, _ = _per_study_inverses(psi, data)
    rhs = np.einsum("nij,nj->i", inv, data.effects)
    return np.linalg.solve(inv.sum(axis=0), rhs)


def residual_quadform(psi: np.ndarray, data: Dataset) -> float:
    """sum_i (x_i - xtilde)^T (Psi + U_i)^{-1} (x_i - xtilde), nonnegative."""
    inv, _ = _per_study_inverses(psi, data)
    xt = np.linalg.solve(inv.sum(axis=0), np.einsum("nij,nj->i", inv, data.effects))
    d = data.effects - xt
    return float(np.einsum("ni,nij,nj->", d, inv, d))


@dataclass
class BatchEval:
    """Vectorized kernel evaluation at a batch of (mu, psi) points."""

    log_post: np.ndarray  # (B,)
    log_prior: np.ndarray  # (B,)
    xtilde: np.ndarray  # (B, p)
    residual: np.ndarray  # (B,)
    cond_cov: np.ndarray  # (B, p, p): (sum_i (Psi+U_i)^{-1})^{-1}
    c: np.ndarray  # (B,) conditional covariance factor


def batch_evaluate(kernel: PosteriorKernel, mu: np.ndarray, psi: np.ndarray) -> BatchEval:
    """Evaluate the joint log posterior and its conditional-law ingredients
    at B points.  Points where any Psi + U_i fails to be positive definite
    (or where the prior is undefined) get log-posterior -inf.
    """
    data = kernel.dataset
    gen = kernel.generator
    p, n = data.p, data.n
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    psi = np.asarray(psi, dtype=float).reshape(-1, p, p)
    b = psi.shape[0]

    a = symmetrize(psi[:, None, :, :] + data.within_cov[None, :, :, :])
    bad = np.zeros(b, dtype=bool)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        chol = np.empty_like(a)
        for k in range(b):
            try:
                chol[k] = np.linalg.cholesky(a[k])
            except np.linalg.LinAlgError:
                bad[k] = True
                chol[k] = np.eye(p)
                a[k] = np.eye(p)
    inv = symmetrize(np.linalg.inv(a))
    logdets = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1).sum(axis=-1)

    sum_inv = inv.sum(axis=1)
    cond_cov = symmetrize(np.linalg.inv(sum_inv))
    wsum = np.einsum("bnij,nj->bi", inv, data.effects)
    xtilde = np.einsum("bij,bj->bi", cond_cov, wsum)

    diff = data.effects[None, :, :] - xtilde[:, None, :]
    residual = np.einsum("bni,bnij,bnj->b", diff, inv, diff)
    dmu = data.effects[None, :, :] - mu[:, None, :]
    quad = np.einsum("bni,bnij,bnj->b", dmu, inv, dmu)

    log_prior = log_prior_batch(
        kernel.prior.kind, kernel.prior.j, p, n, inv, sum_inv, duplication_matrix(p)
    )
    log_post = log_prior - 0.5 * logdets + log_generator(gen, np.maximum(quad, 0.0), p, n)
    log_post = np.where(bad, -np.inf, log_post)

    if gen.kind == "student_t":
        denom = p * n + gen.df - p - 2.0
        c = (gen.df + residual) / denom if denom > 0 else np.full(b, np.nan)
    else:
        c = np.ones(b)
    return BatchEval(
        log_post=log_post,
        log_prior=log_prior,
        xtilde=xtilde,
        residual=residual,
        cond_cov=cond_cov,
        c=c,
    )


def log_joint_posterior(kernel: PosteriorKernel, mu: np.ndarray, psi: np.ndarray) -> float:
    """log pi(Psi) - (1/2) sum_i logdet(Psi+U_i) + log f(quadratic form)."""
    ev = batch_evaluate(kernel, np.asarray(mu, dtype=float)[None, :], psi)
    if not np.isfinite(ev.log_prior[0]):
        raise PriorEvaluationError("prior is not defined at this point")
    return float(ev.log_post[0])


@dataclass(frozen=True)
class ConditionalLaw:
    """Conditional law of the overall mean given the covariance matrix."""

    family: str  # "normal" | "student_t"
    mean: np.ndarray
    dispersion: np.ndarray  # covariance for normal, scale matrix for t
    dof: float | None = None

    def covariance(self) -> np.ndarray:
        if self.family == "normal":
            return self.dispersion
        if self.dof is None or self.dof <= 2:
            raise UndefinedSecondMomentError("t law needs dof > 2 for a covariance")
        return self.dof / (self.dof - 2.0) * self.dispersion


def conditional_mu_params(kernel: PosteriorKernel, psi: np.ndarray) -> ConditionalLaw:
    """Conditional posterior of the mean given Psi (normal or Student-t)."""
    gen = kernel.generator
    if gen.kind not in ("normal", "student_t"):
        raise ValueError("conditional law available for normal and student_t generators only")
    ev = batch_evaluate(kernel, np.zeros((1, kernel.p)), psi)
    if gen.kind == "normal":
        return ConditionalLaw(family="normal", mean=ev.xtilde[0], dispersion=ev.cond_cov[0])
    pn = kernel.p * kernel.n
    dof = pn + gen.df - kernel.p
    scale = (gen.df + ev.residual[0]) / dof * ev.cond_cov[0]
    return ConditionalLaw(family="student_t", mean=ev.xtilde[0], dispersion=scale, dof=dof)


def c_factor(kernel: PosteriorKernel, psi: np.ndarray) -> float:
    """Factor C(Psi) so Var(mu | Psi, X) = C(Psi) (sum_i (Psi+U_i)^{-1})^{-1}."""
    gen = kernel.generator
    if gen.kind == "normal":
        return 1.0
    if gen.kind != "student_t":
        raise ValueError("conditional moments available for normal and student_t only")
    denom = kernel.p * kernel.n + gen.df - kernel.p - 2.0
    if denom <= 0:
        raise UndefinedSecondMomentError(
            f"p*n + df - p - 2 = {denom:g} <= 0: second moment undefined"
        )
    return (gen.df + residual_quadform(psi, kernel.dataset)) / denom


def _log_radial_integral(gen: DensityGenerator, p: int, n: int, r: float) -> float:
    """log of integral_0^inf u^(p-1) f(u^2 + r) du for the three families."""
    pn = p * n
    logk = float(log_generator(gen, 0.0, p, n))
    if gen.kind == "normal":
        return logk - 0.5 * r + (0.5 * p - 1.0) * np.log(2.0) + float(gammaln(0.5 * p))
    if gen.kind == "student_t":
        d = gen.df
        return (
            logk
            - 0.5 * (pn + d) * np.log1p(r / d)
            + 0.5 * p * np.log(d + r)
            - np.log(2.0)
            + float(gammaln(0.5 * p))
            + float(gammaln(0.5 * (pn + d - p)))
            - float(gammaln(0.5 * (pn + d)))
        )
    # Generic path: substitute u = tan(theta) to map onto a finite interval
    # and scale the integrand by f(r) so it is O(1).
    lf_r = float(np.asarray(gen.log_f(np.asarray([r]))).item())

    def integrand(theta):
        u = np.tan(theta)
        lf = float(np.asarray(gen.log_f(np.asarray([u * u + r]))).item())
        return np.exp(lf - lf_r) * u ** (p - 1) / np.cos(theta) ** 2

    val, err = quad(integrand, 0.0, 0.5 * np.pi, epsrel=1e-9, epsabs=0.0, limit=256)
    if not np.isfinite(val) or val <= 0 or err > 1e-6 * val:
        raise MarginalEvaluationError(
            f"radial quadrature did not converge (value {val:.3g}, error {err:.3g})"
        )
    return lf_r + float(np.log(val))


def log_marginal_psi(kernel: PosteriorKernel, psi: np.ndarray) -> float:
    """Marginal log kernel of Psi after integrating the mean out.

    For the built-in families the radial integral has a closed form; custom
    generators use adaptive quadrature.  The normalizing constant shared by
    all three paths (the surface measure factor) is dropped consistently.
    """
    data = kernel.dataset
    ev = batch_evaluate(kernel, np.zeros((1, kernel.p)), psi)
    if not np.isfinite(ev.log_prior[0]):
        raise PriorEvaluationError("prior is not defined at this point")
    inv, logdets = _per_study_inverses(psi, data)
    sign, logdet_sum = np.linalg.slogdet(inv.sum(axis=0))
    if sign <= 0:
        raise PriorEvaluationError("precision sum is singular")
    r = float(ev.residual[0])
    return (
        float(ev.log_prior[0])
        - 0.5 * logdet_sum
        - 0.5 * float(np.sum(logdets))
        + _log_radial_integral(kernel.generator, kernel.p, kernel.n, r)
    )


def posterior_moments_mu(draws) -> tuple[np.ndarray, np.ndarray]:
    """Rao-Blackwellized posterior mean and covariance of the overall mean.

    mean = average of the pooled means xtilde(Psi_b); covariance = average of
    C(Psi_b) * (sum_i (Psi_b+U_i)^{-1})^{-1} plus the empirical covariance of
    the pooled means.
    """
    xt = np.asarray(draws.xtilde, dtype=float)
    c = np.asarray(draws.c, dtype=float)
    cc = np.asarray(draws.cond_cov, dtype=float)
    if xt.shape[0] == 0:
        raise ValueError("no draws")
    mean = xt.mean(axis=0)
    within = np.einsum("b,bij->ij", c, cc) / xt.shape[0]
    dev = xt - mean
    if xt.shape[0] > 1:
        between = dev.T @ dev / (xt.shape[0] - 1)
    else:
        between = np.zeros((xt.shape[1], xt.shape[1]))
    return mean, symmetrize(within + between)
