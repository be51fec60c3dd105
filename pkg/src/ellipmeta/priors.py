"""Fisher information blocks of the elliptical random-effects model and the
two noninformative log-priors built from them, plus the posterior-propriety
gate.

The generic Fisher-block path is the single source of truth for both priors;
the homoscedastic closed forms (det(Psi+V)^(-(p+1)/2) for the reference
prior, exponent -(p+2)/2 for Jeffreys) are used as test oracles only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .elliptical import DensityGenerator, JConstants, j_constants, log_generator
from .linalg import duplication_matrix, symmetrize

MONOTONE_GRID = np.geomspace(1e-8, 1e8, 1024)


class PriorEvaluationError(ValueError):
    """The information block F22 failed to be positive definite."""


@dataclass(frozen=True)
class GateResult:
    """Outcome of the propriety gate; ``reasons`` lists every failed check."""

    ok: bool
    reasons: tuple[str, ...] = ()
    checks: dict = field(default_factory=dict)

    def raise_if_rejected(self):
        if not self.ok:
            raise GateRejectionError("; ".join(self.reasons))


class GateRejectionError(ValueError):
    """Raised when a run is attempted despite a gate rejection."""


@dataclass(frozen=True)
class PriorSpec:
    """Prior choice bound to a generator and the model shape it was built for."""

    kind: str  # "reference" | "jeffreys"
    generator: DensityGenerator
    j: JConstants
    p: int
    n: int

    def __post_init__(self):
        if self.kind not in ("reference", "jeffreys"):
            raise ValueError(f"unknown prior kind {self.kind!r}")

    @classmethod
    def build(
        cls,
        kind: str,
        generator: DensityGenerator,
        p: int,
        n: int,
        rng: np.random.Generator | None = None,
    ) -> "PriorSpec":
        return cls(kind=kind, generator=generator, j=j_constants(generator, p, n, rng), p=p, n=n)


def _coefficients(j: JConstants, p: int, n: int) -> tuple[float, float]:
    """(alpha, beta) multiplying the rank-one and Kronecker-sum terms of F22."""
    m = 2.0 * p * n + (p * n) ** 2
    return j.j2 / m - 0.25, 2.0 * j.j2 / m


def _inverses(psi: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-study (Psi+U_i)^{-1} stack and its sum."""
    a = symmetrize(psi[None, :, :] + u)
    inv = np.linalg.inv(a)
    inv = symmetrize(inv)
    return inv, inv.sum(axis=0)


def fisher_f11(psi: np.ndarray, u, j: JConstants, p: int, n: int) -> np.ndarray:
    """(4 J1 / (p n)) * sum_i (Psi + U_i)^{-1}."""
    _, sum_inv = _inverses(np.asarray(psi, dtype=float), np.asarray(u, dtype=float))
    return (4.0 * j.j1 / (p * n)) * sum_inv


def f22_batch(
    inv_stack: np.ndarray, sum_inv: np.ndarray, alpha: float, beta: float, gp: np.ndarray
) -> np.ndarray:
    """Batched F22 = G^T [alpha vec(P) vec(P)^T + beta sum_i K_i] G.

    ``inv_stack`` has shape (B, n, p, p); ``sum_inv`` is (B, p, p) with
    P = sum_i (Psi+U_i)^{-1}; K_i is the Kronecker square of the i-th inverse.
    """
    b, _, p, _ = inv_stack.shape
    ksum = np.einsum("bnij,bnkl->bikjl", inv_stack, inv_stack).reshape(b, p * p, p * p)
    v = sum_inv.reshape(b, p * p)
    f = beta * ksum
    if alpha != 0.0:
        f = f + alpha * v[:, :, None] * v[:, None, :]
    return np.einsum("ri,brc,cj->bij", gp, f, gp)


def fisher_f22(psi: np.ndarray, u, j: JConstants, p: int, n: int) -> np.ndarray:
    """Information block for vech(Psi); shape (p(p+1)/2,) squared."""
    inv, sum_inv = _inverses(np.asarray(psi, dtype=float), np.asarray(u, dtype=float))
    alpha, beta = _coefficients(j, p, n)
    return f22_batch(inv[None], sum_inv[None], alpha, beta, duplication_matrix(p))[0]


def log_prior_batch(
    kind: str,
    j: JConstants,
    p: int,
    n: int,
    inv_stack: np.ndarray,
    sum_inv: np.ndarray,
    gp: np.ndarray,
) -> np.ndarray:
    """Batched unnormalized log prior; -inf where F22 is not positive definite."""
    alpha, beta = _coefficients(j, p, n)
    f22 = f22_batch(inv_stack, sum_inv, alpha, beta, gp)
    sign, logdet = np.linalg.slogdet(f22)
    out = np.where(sign > 0, 0.5 * logdet, -np.inf)
    if kind == "jeffreys":
        s1, ld1 = np.linalg.slogdet((4.0 * j.j1 / (p * n)) * sum_inv)
        out = out + np.where(s1 > 0, 0.5 * ld1, -np.inf)
    return out


def _log_prior_scalar(spec: PriorSpec, psi: np.ndarray, u: np.ndarray) -> float:
    inv, sum_inv = _inverses(np.asarray(psi, dtype=float), np.asarray(u, dtype=float))
    val = log_prior_batch(
        spec.kind, spec.j, spec.p, spec.n, inv[None], sum_inv[None], duplication_matrix(spec.p)
    )[0]
    if not np.isfinite(val):
        raise PriorEvaluationError("information block is not positive definite")
    return float(val)


def log_reference_prior(spec: PriorSpec, psi: np.ndarray, u) -> float:
    """(1/2) log det F22, unnormalized."""
    if spec.kind != "reference":
        raise ValueError("prior spec is not a reference prior")
    return _log_prior_scalar(spec, psi, np.asarray(u, dtype=float))


def log_jeffreys_prior(spec: PriorSpec, psi: np.ndarray, u) -> float:
    """(1/2) log det F11 + (1/2) log det F22, unnormalized."""
    if spec.kind != "jeffreys":
        raise ValueError("prior spec is not a Jeffreys prior")
    return _log_prior_scalar(spec, psi, np.asarray(u, dtype=float))


def propriety_gate(
    kind: str,
    p: int,
    n: int,
    gen: DensityGenerator,
    j: JConstants | None = None,
) -> GateResult:
    """Check the sufficient conditions for a proper posterior.

    Jeffreys requires n >= p, the reference prior n >= p+1.  The generator
    must have a non-increasing density generator (checked on a 1024-point
    log grid over [1e-8, 1e8]) and J2/(2pn + (pn)^2) <= 1/4; the equality
    boundary (the normal case) is accepted, and Monte Carlo J2 estimates
    get a 3-standard-error slack.
    """
    reasons = []
    checks = {}

    need = p + 1 if kind == "reference" else p
    checks["sample_size"] = n >= need
    if n < need:
        reasons.append(f"n >= {'p+1' if kind == 'reference' else 'p'} required (p={p}, n={n})")

    logf = np.asarray(log_generator(gen, MONOTONE_GRID, p, n), dtype=float)
    local = 1.0 + np.maximum(np.abs(logf[:-1]), np.abs(logf[1:]))
    nonincreasing = bool(np.all(np.diff(logf) <= 1e-12 * local))
    checks["generator_nonincreasing"] = nonincreasing
    if not nonincreasing:
        reasons.append("density generator is not non-increasing on the test grid")

    if j is None:
        j = j_constants(gen, p, n)
    m = 2.0 * p * n + (p * n) ** 2
    slack = 3.0 * (j.se_j2 / m) if j.se_j2 is not None else 1e-12
    excess = j.j2 / m - 0.25
    checks["j2_bound"] = excess <= slack
    checks["j2_excess"] = float(excess)
    if excess > slack:
        reasons.append(f"J2/(2pn+p^2n^2) - 1/4 = {excess:.3g} > 0 violates the propriety bound")

    return GateResult(ok=not reasons, reasons=tuple(reasons), checks=checks)
