"""Independence Metropolis-Hastings samplers for the joint posterior of the
overall mean and the between-study covariance.

Two factorizations of the same joint proposal are available:

* variant "A": draw the mean from its marginal t law, then the covariance
  from the conditional generalized inverse Wishart;
* variant "B": draw the covariance from its marginal, then the mean from the
  conditional law.

The proposal is the zero-within-covariance special case of the posterior:
``q(mu, Psi) = det(Psi)^(-nu/2) f(tr(Psi^{-1} A(mu)))`` with
``A(mu) = (n-1) S + n (mu - xbar)(mu - xbar)^T`` and ``nu = n+p+1`` under the
reference prior, ``n+p+2`` under Jeffreys.  The Metropolis-Hastings ratio
always evaluates this closed-form kernel, never the factorized pdf product,
so a factorization bug cannot bias the ratio (the product is checked
separately by the oracle module).

Because the proposal does not depend on the chain state, all proposals and
their kernel values are precomputed in vectorized batches; only the
accept/reject scan is sequential.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from .elliptical import (
    giw_batch,
    giw_mixing_dof,
    inverse_wishart_batch,
    log_generator,
    multivariate_t_batch,
)
from .linalg import NotPositiveDefiniteError, cholesky_lower, symmetrize
from .posterior import Dataset, PosteriorKernel, batch_evaluate

_EVAL_CHUNK = 16384


class DegenerateDataError(ValueError):
    """The between-study scatter matrix is singular; the proposal is undefined."""


@dataclass(frozen=True)
class SamplerConfig:
    """Chain configuration; defaults follow the reported analysis settings
    (1e5 draws with a 10% burn-in)."""

    variant: str = "A"
    prior_kind: str = "reference"
    draws: int = 100_000
    burn_in_fraction: float = 0.10
    seed: int = 0
    thin: int = 1
    chains: int = 1

    def __post_init__(self):
        if self.variant not in ("A", "B"):
            raise ValueError(f"variant must be 'A' or 'B', got {self.variant!r}")
        if self.prior_kind not in ("reference", "jeffreys"):
            raise ValueError(f"unknown prior kind {self.prior_kind!r}")
        if self.draws < 1:
            raise ValueError("draws must be >= 1")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.thin < 1 or self.chains < 1:
            raise ValueError("thin and chains must be >= 1")


@dataclass
class Draws:
    """Retained posterior sample with conditional-law caches for
    Rao-Blackwellized summaries."""

    mu: np.ndarray  # (M, p)
    psi: np.ndarray  # (M, p, p)
    accepted: np.ndarray  # (M,) bool
    log_posterior: np.ndarray  # (M,)
    xtilde: np.ndarray  # (M, p)
    c: np.ndarray  # (M,)
    cond_cov: np.ndarray  # (M, p, p)
    acceptance_rate: float
    ess: np.ndarray  # (p,) effective sample size per mean coordinate
    config: SamplerConfig
    seed_lineage: tuple = ()

    def __len__(self) -> int:
        return self.mu.shape[0]


def sufficient_stats(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and (n-1)-denominator scatter matrix of the effects."""
    if data.n < 2:
        raise DegenerateDataError("at least two studies are needed to form the scatter matrix")
    xbar = data.effects.mean(axis=0)
    dev = data.effects - xbar
    s = dev.T @ dev / (data.n - 1)
    return xbar, symmetrize(s)


@dataclass(frozen=True)
class _Proposal:
    """Precomputed constants of the joint proposal for one (config, kernel)."""

    prior_kind: str
    xbar: np.ndarray
    scatter: np.ndarray  # (n-1) S
    scatter_chol: np.ndarray
    nu: float  # generalized inverse Wishart dof of the conditional Psi | mu
    t_dof: float  # dof of the marginal t law of mu
    t_scale_chol: np.ndarray
    p: int
    n: int


def _build_proposal(prior_kind: str, kernel: PosteriorKernel) -> _Proposal:
    data = kernel.dataset
    p, n = data.p, data.n
    xbar, s = sufficient_stats(data)
    try:
        s_chol, _ = cholesky_lower(s)
    except NotPositiveDefiniteError as exc:
        raise DegenerateDataError(
            f"between-study scatter matrix is singular (pivot {exc.pivot_index})"
        ) from exc
    if prior_kind == "reference":
        nu, t_dof = n + p + 1.0, float(n - p)
    else:
        nu, t_dof = n + p + 2.0, float(n - p + 1)
    if t_dof <= 0:
        raise DegenerateDataError(f"proposal t law needs positive dof, got {t_dof}")
    gen = kernel.generator
    if gen.kind == "student_t":
        giw_mixing_dof(gen, nu, p, p * n)  # raises if the conditional is not integrable
    t_scale_chol = s_chol * np.sqrt((n - 1.0) / (n * t_dof))
    return _Proposal(
        prior_kind=prior_kind,
        xbar=xbar,
        scatter=(n - 1.0) * s,
        scatter_chol=s_chol * np.sqrt(n - 1.0),
        nu=nu,
        t_dof=t_dof,
        t_scale_chol=t_scale_chol,
        p=p,
        n=n,
    )


def _centered_scatter(prop: _Proposal, mu: np.ndarray) -> np.ndarray:
    """A(mu) = (n-1) S + n (mu - xbar)(mu - xbar)^T for a batch of means."""
    dev = mu - prop.xbar
    return prop.scatter[None, :, :] + prop.n * np.einsum("bi,bj->bij", dev, dev)


def proposal_sample_batch(
    config: SamplerConfig,
    kernel: PosteriorKernel,
    size: int,
    rng: np.random.Generator,
    variant: str | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``size`` proposal points (mu, Psi) via the configured factorization."""
    prop = _build_proposal(config.prior_kind, kernel)
    gen = kernel.generator
    p, n = prop.p, prop.n
    variant = config.variant if variant is None else variant

    if variant == "A":
        mu = multivariate_t_batch(prop.t_dof, prop.xbar, prop.t_scale_chol, size, rng)
        psi = giw_batch(gen, prop.nu, _centered_scatter(prop, mu), p * n, size, rng)
        return mu, psi

    # Variant B: Psi from its marginal, then mu | Psi.
    if gen.kind == "normal":
        psi = inverse_wishart_batch(prop.nu - 1.0, prop.scatter, size, rng)
        z = rng.standard_normal((size, p))
        mu = prop.xbar + np.einsum("bij,bj->bi", np.linalg.cholesky(psi), z) / np.sqrt(n)
        return mu, psi
    if gen.kind == "student_t":
        d = gen.df
        mix = giw_mixing_dof(gen, prop.nu, p, p * n)
        xi = rng.chisquare(mix, size=size)
        omega = inverse_wishart_batch(prop.nu - 1.0, prop.scatter, size, rng)
        psi = (xi / d)[:, None, None] * omega
        m = p * n + d - p
        tr = np.trace(np.linalg.solve(psi, prop.scatter[None, :, :]), axis1=-2, axis2=-1)
        coef = (d + tr) / (n * m)
        chol = np.sqrt(coef)[:, None, None] * np.linalg.cholesky(psi)
        mu = multivariate_t_batch(m, prop.xbar, chol, size, rng)
        return mu, psi
    raise ValueError("sampling requires a normal or student_t generator")


def log_proposal_batch(
    prior_kind: str, kernel: PosteriorKernel, mu: np.ndarray, psi: np.ndarray
) -> np.ndarray:
    """Closed-form joint proposal kernel log q(mu, Psi), vectorized.

    Returns -inf where Psi is not positive definite.
    """
    prop = _build_proposal(prior_kind, kernel)
    p, n = prop.p, prop.n
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    psi = np.asarray(psi, dtype=float).reshape(-1, p, p)
    a = _centered_scatter(prop, mu)
    sign, logdet = np.linalg.slogdet(psi)
    ok = sign > 0
    tr = np.zeros(mu.shape[0])
    if np.any(ok):
        tr[ok] = np.trace(np.linalg.solve(psi[ok], a[ok]), axis1=-2, axis2=-1)
    ok &= tr >= 0
    val = -0.5 * prop.nu * logdet + log_generator(
        kernel.generator, np.where(ok, tr, 0.0), p, n
    )
    return np.where(ok, val, -np.inf)


def log_proposal(
    prior_kind: str, kernel: PosteriorKernel, mu: np.ndarray, psi: np.ndarray
) -> float:
    return float(log_proposal_batch(prior_kind, kernel, np.asarray(mu)[None, :], psi)[0])


def propose(
    config: SamplerConfig, kernel: PosteriorKernel, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, float]:
    """One proposal draw together with its closed-form log kernel value."""
    mu, psi = proposal_sample_batch(config, kernel, 1, rng)
    lq = log_proposal(config.prior_kind, kernel, mu[0], psi[0])
    return mu[0], psi[0], lq


@dataclass
class ChainState:
    mu: np.ndarray
    psi: np.ndarray
    log_post: float
    log_q: float
    accepted: bool = False


def mh_step(
    state: ChainState,
    proposal: tuple[np.ndarray, np.ndarray, float],
    kernel: PosteriorKernel,
    rng: np.random.Generator,
) -> ChainState:
    """One accept/reject move of the independence sampler.

    Accepts with probability min{1, exp[(log pi(w) + log q(prev)) -
    (log pi(prev) + log q(w))]}; a non-finite proposal log posterior is an
    automatic (recorded) rejection.
    """
    if not np.isfinite(state.log_post):
        raise ValueError("chain state has non-finite log posterior")
    mu_w, psi_w, lq_w = proposal
    ev = batch_evaluate(kernel, np.asarray(mu_w)[None, :], psi_w)
    lp_w = float(ev.log_post[0])
    log_ratio = (lp_w + state.log_q) - (state.log_post + lq_w)
    u = rng.uniform()
    if np.isfinite(lp_w) and np.isfinite(log_ratio) and np.log(u) < min(0.0, log_ratio):
        return ChainState(mu=np.asarray(mu_w), psi=np.asarray(psi_w), log_post=lp_w, log_q=lq_w, accepted=True)
    return ChainState(
        mu=state.mu, psi=state.psi, log_post=state.log_post, log_q=state.log_q, accepted=False
    )


def effective_sample_size(x: np.ndarray) -> float:
    """Effective sample size of a scalar chain via the initial-positive-pairs
    autocorrelation estimator."""
    x = np.asarray(x, dtype=float)
    m = x.size
    if m < 4:
        return float(m)
    dev = x - x.mean()
    var = dev @ dev / m
    if var <= 0:
        return float(m)
    nfft = int(2 ** np.ceil(np.log2(2 * m)))
    f = np.fft.rfft(dev, nfft)
    acov = np.fft.irfft(f * np.conjugate(f), nfft)[: m // 2] / m
    rho = acov / var
    total = 0.0
    for k in range(1, len(rho) - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        total += pair
    return float(m / (1.0 + 2.0 * total))


def _evaluate_all(kernel: PosteriorKernel, prior_kind: str, mu: np.ndarray, psi: np.ndarray):
    """Chunked batch evaluation of posterior and proposal kernels."""
    b = mu.shape[0]
    lp = np.empty(b)
    lq = np.empty(b)
    xt = np.empty_like(mu)
    c = np.empty(b)
    cc = np.empty_like(psi)
    for lo in range(0, b, _EVAL_CHUNK):
        hi = min(lo + _EVAL_CHUNK, b)
        ev = batch_evaluate(kernel, mu[lo:hi], psi[lo:hi])
        lp[lo:hi] = ev.log_post
        lq[lo:hi] = log_proposal_batch(prior_kind, kernel, mu[lo:hi], psi[lo:hi])
        xt[lo:hi] = ev.xtilde
        c[lo:hi] = ev.c
        cc[lo:hi] = ev.cond_cov
    return lp, lq, xt, c, cc


def _run_single_chain(config: SamplerConfig, kernel: PosteriorKernel, chain_index: int):
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(chain_index,)))
    b = config.draws
    p = kernel.p

    mu_w, psi_w = proposal_sample_batch(config, kernel, b, rng)
    uniforms = rng.uniform(size=b)

    lp, lq, xt, c, cc = _evaluate_all(kernel, config.prior_kind, mu_w, psi_w)

    xbar, s = sufficient_stats(kernel.dataset)
    ev0 = batch_evaluate(kernel, xbar[None, :], s[None, :, :])
    lq0 = log_proposal_batch(config.prior_kind, kernel, xbar[None, :], s[None, :, :])[0]
    if not np.isfinite(ev0.log_post[0]):
        raise DegenerateDataError("initial state has non-finite log posterior")

    # Index 0 is the initial state; proposal j lives at index j+1.
    mu_all = np.concatenate([xbar[None, :], mu_w])
    psi_all = np.concatenate([s[None, :, :], psi_w])
    lp_all = np.concatenate([ev0.log_post, lp])
    xt_all = np.concatenate([ev0.xtilde, xt])
    c_all = np.concatenate([ev0.c, c])
    cc_all = np.concatenate([ev0.cond_cov, cc])
    lq_all = np.concatenate([[lq0], lq])

    state_idx = np.empty(b, dtype=np.int64)
    accept = np.zeros(b, dtype=bool)
    cur = 0
    log_u = np.log(uniforms)
    for i in range(b):
        j = i + 1
        num = lp_all[j] + lq_all[cur]
        den = lp_all[cur] + lq_all[j]
        if np.isfinite(num) and log_u[i] < min(0.0, num - den):
            cur = j
            accept[i] = True
        state_idx[i] = cur

    start = int(b * config.burn_in_fraction)
    keep = np.arange(start, b, config.thin)
    rows = state_idx[keep]
    return {
        "mu": mu_all[rows],
        "psi": psi_all[rows],
        "accepted": accept[keep],
        "log_posterior": lp_all[rows],
        "xtilde": xt_all[rows],
        "c": c_all[rows],
        "cond_cov": cc_all[rows],
        "n_accept": int(accept.sum()),
        "chain_index": chain_index,
    }


def run_chain(config: SamplerConfig, kernel: PosteriorKernel, workers: int = 1) -> Draws:
    """Run the configured chains and merge retained draws by chain index.

    Deterministic given the seed: chain k uses the seed's spawn key (k,), so
    sequential and parallel execution produce identical output.  The chain
    initializes at the sample mean and scatter matrix.
    """
    kernel.gate.raise_if_rejected()
    if kernel.dataset.n < 2:
        raise DegenerateDataError("need n >= 2 studies to run the sampler")

    indices = list(range(config.chains))
    if workers > 1 and config.chains > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_run_single_chain, config, kernel, k) for k in indices]
            results = [f.result() for f in futs]
        results.sort(key=lambda r: r["chain_index"])
    else:
        results = [_run_single_chain(config, kernel, k) for k in indices]

    mu = np.concatenate([r["mu"] for r in results])
    ess = np.array(
        [
            sum(effective_sample_size(r["mu"][:, k]) for r in results)
            for k in range(kernel.p)
        ]
    )
    return Draws(
        mu=mu,
        psi=np.concatenate([r["psi"] for r in results]),
        accepted=np.concatenate([r["accepted"] for r in results]),
        log_posterior=np.concatenate([r["log_posterior"] for r in results]),
        xtilde=np.concatenate([r["xtilde"] for r in results]),
        c=np.concatenate([r["c"] for r in results]),
        cond_cov=np.concatenate([r["cond_cov"] for r in results]),
        acceptance_rate=sum(r["n_accept"] for r in results) / (config.draws * config.chains),
        ess=ess,
        config=config,
        seed_lineage=tuple((config.seed, k) for k in indices),
    )
