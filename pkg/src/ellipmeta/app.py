"""Command-line orchestration: dataset ingestion and validation, fit and
coverage-study subcommands, the oracle validation suite, and prior
evaluation over a covariance grid.

Outputs are single structured JSON documents (plus optional CSV sidecars)
carrying full provenance, so a rerun with the embedded config and seed
reproduces the document bit for bit.  Exit codes: 0 success, 2 validation
failure, 3 propriety-gate rejection, 4 input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .elliptical import DensityGenerator, j_constants
from .linalg import (
    NotPositiveDefiniteError,
    duplication_matrix,
    haar_orthogonal,
    kron,
    spd_from_sym,
    sym_sqrt,
    symmetrize,
)
from .mcmc import SamplerConfig, run_chain, sufficient_stats
from .oracle import (
    OracleCheck,
    OracleReport,
    factorization_consistency,
    mc_fisher_info,
)
from .posterior import Dataset, PosteriorKernel
from .priors import GateRejectionError, fisher_f11, fisher_f22, log_prior_batch, propriety_gate
from .report import credible_region_2d, summarize


class InputError(ValueError):
    """Malformed input file or inconsistent configuration."""


EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_GATE = 3
EXIT_INPUT = 4


@dataclass(frozen=True)
class RunConfig:
    """One fit's settings; echoed verbatim into every output document."""

    model: str = "normal"  # "normal" | "t"
    t_dof: float | None = None
    rescale_u: bool = False
    prior: str = "reference"
    variant: str = "A"
    draws: int = 100_000
    burn_in_fraction: float = 0.10
    thin: int = 1
    chains: int = 1
    seed: int = 0
    level: float = 0.95

    def __post_init__(self):
        if self.model not in ("normal", "t"):
            raise InputError(f"model must be 'normal' or 't', got {self.model!r}")
        if self.model == "t" and (self.t_dof is None or self.t_dof <= 0):
            raise InputError("model 't' requires --t-dof > 0")
        if self.rescale_u:
            if self.model != "t":
                raise InputError("--rescale-u only applies to the t model")
            if self.t_dof <= 2:
                raise InputError("--rescale-u needs t dof > 2")
        if not 0.0 < self.level < 1.0:
            raise InputError("level must lie in (0, 1)")

    def generator(self) -> DensityGenerator:
        if self.model == "normal":
            return DensityGenerator.normal()
        return DensityGenerator.student_t(self.t_dof)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "t_dof": self.t_dof,
            "rescale_u": self.rescale_u,
            "prior": self.prior,
            "variant": self.variant,
            "draws": self.draws,
            "burn_in_fraction": self.burn_in_fraction,
            "thin": self.thin,
            "chains": self.chains,
            "seed": self.seed,
            "level": self.level,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def ingest(path: str, fmt: str) -> Dataset:
    """Load a dataset from JSON (any p) or the two-outcome CSV convenience
    format with columns study,x1,x2,sd1,rho12,sd2."""
    if not os.path.exists(path):
        raise InputError(f"input file not found: {path}")
    if fmt == "json":
        return _ingest_json(path)
    if fmt == "csv":
        return _ingest_csv(path)
    raise InputError(f"unknown input format {fmt!r}")


def _validate_study_cov(mat: np.ndarray, study_id: str) -> np.ndarray:
    try:
        return spd_from_sym(mat).mat
    except NotPositiveDefiniteError as exc:
        raise InputError(
            f"within-study covariance of study {study_id!r} is not positive definite "
            f"(pivot {exc.pivot_index})"
        ) from exc


def _ingest_json(path: str) -> Dataset:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"cannot parse JSON input: {exc}") from exc
    try:
        p = int(doc["p"])
        studies = doc["studies"]
    except (KeyError, TypeError) as exc:
        raise InputError("JSON input must carry 'p' and a 'studies' list") from exc
    effects, covs, labels = [], [], []
    for k, st in enumerate(studies):
        sid = str(st.get("id", k + 1))
        eff = np.asarray(st["effects"], dtype=float)
        cov = np.asarray(st["cov"], dtype=float)
        if eff.shape != (p,) or cov.shape != (p, p):
            raise InputError(
                f"study {sid!r} has effects shape {eff.shape} and cov shape {cov.shape}; "
                f"expected ({p},) and ({p}, {p})"
            )
        covs.append(_validate_study_cov(cov, sid))
        effects.append(eff)
        labels.append(sid)
    if not effects:
        raise InputError("no studies in input")
    return Dataset.create(np.array(effects), np.stack(covs), labels)


def _ingest_csv(path: str) -> Dataset:
    effects, covs, labels = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"study", "x1", "x2", "sd1", "rho12", "sd2"}
        if reader.fieldnames is None or not need.issubset(set(reader.fieldnames)):
            raise InputError(f"CSV input needs columns {sorted(need)}, got {reader.fieldnames}")
        for row in reader:
            sid = row["study"]
            try:
                x1, x2 = float(row["x1"]), float(row["x2"])
                sd1, rho, sd2 = float(row["sd1"]), float(row["rho12"]), float(row["sd2"])
            except ValueError as exc:
                raise InputError(f"study {sid!r}: non-numeric field ({exc})") from exc
            if abs(rho) > 1.0:
                raise InputError(f"study {sid!r}: correlation {rho} outside [-1, 1]")
            cov = np.array(
                [[sd1 * sd1, rho * sd1 * sd2], [rho * sd1 * sd2, sd2 * sd2]]
            )
            covs.append(_validate_study_cov(cov, sid))
            effects.append([x1, x2])
            labels.append(sid)
    if not effects:
        raise InputError("no studies in input")
    return Dataset.create(np.array(effects), np.stack(covs), labels)


def export_json(data: Dataset) -> dict:
    """Dataset as the canonical JSON document structure."""
    return {
        "p": data.p,
        "studies": [
            {
                "id": data.labels[i],
                "effects": data.effects[i].tolist(),
                "cov": data.within_cov[i].tolist(),
            }
            for i in range(data.n)
        ],
    }


def apply_model_scaling(config: RunConfig, data: Dataset) -> Dataset:
    """Apply the (d-2)/d rescaling of the within-study covariances when
    requested; under the t model this makes the implied per-study covariance
    match the supplied matrices."""
    if not config.rescale_u:
        return data
    factor = (config.t_dof - 2.0) / config.t_dof
    return Dataset.create(data.effects, data.within_cov * factor, data.labels)


def _run_fit(config: RunConfig, data: Dataset, workers: int = 1):
    """Shared fit core: returns (document, draws, regions-or-None)."""
    scaled = apply_model_scaling(config, data)
    kernel = PosteriorKernel.build(scaled, config.prior, config.generator())
    sampler_cfg = SamplerConfig(
        variant=config.variant,
        prior_kind=config.prior,
        draws=config.draws,
        burn_in_fraction=config.burn_in_fraction,
        seed=config.seed,
        thin=config.thin,
        chains=config.chains,
    )
    draws = run_chain(sampler_cfg, kernel, workers=workers)
    summary = summarize(draws, config.level)
    doc = {
        "kind": "fit",
        "version": __version__,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed_lineage": [list(x) for x in draws.seed_lineage],
        "dataset": {"p": data.p, "n": data.n, "labels": list(data.labels)},
        "summary": summary.to_dict(),
    }
    regions = None
    if data.p >= 2 and len(draws) >= 1000:
        regions = credible_region_2d(draws)
        doc["credible_regions"] = {
            str(level): {"area": reg.area, "n_polygons": len(reg.polygons)}
            for level, reg in regions.regions.items()
        }
    return doc, draws, regions


def fit(config: RunConfig, data: Dataset, workers: int = 1) -> dict:
    """Run the sampler and produce the structured summary document."""
    doc, _, _ = _run_fit(config, data, workers)
    return doc


def _fit_sidecars(config: RunConfig, data: Dataset, outdir: str, write_draws: bool, workers: int) -> dict:
    """Fit plus CSV sidecars (contour vertices; optionally raw draws)."""
    doc, draws, regions = _run_fit(config, data, workers)
    if regions is not None:
        with open(os.path.join(outdir, "contours.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "polygon", "vertex", "x", "y"])
            for level, reg in sorted(regions.regions.items()):
                for pi, poly in enumerate(reg.polygons):
                    for vi, (vx, vy) in enumerate(poly):
                        w.writerow([level, pi, vi, repr(float(vx)), repr(float(vy))])
    if write_draws:
        with open(os.path.join(outdir, "draws.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            p = data.p
            head = [f"mu{i+1}" for i in range(p)]
            head += [f"psi{i+1}{j+1}" for i in range(p) for j in range(i, p)]
            head += ["accepted", "log_posterior"]
            w.writerow(head)
            for k in range(len(draws)):
                row = [repr(float(v)) for v in draws.mu[k]]
                row += [
                    repr(float(draws.psi[k, i, j])) for i in range(p) for j in range(i, p)
                ]
                row += [int(draws.accepted[k]), repr(float(draws.log_posterior[k]))]
                w.writerow(row)
    return doc


def priors_eval(config: RunConfig, data: Dataset, psi_grid: list[np.ndarray]) -> dict:
    """Tabulate both unnormalized log priors over a grid of candidate
    covariance matrices; grid entries that break the SPD shift are flagged
    but do not stop the run."""
    scaled = apply_model_scaling(config, data)
    gen = config.generator()
    p, n = scaled.p, scaled.n
    j = j_constants(gen, p, n)
    for kind in ("reference", "jeffreys"):
        propriety_gate(kind, p, n, gen, j).raise_if_rejected()
    gp = duplication_matrix(p)
    rows = []
    for psi in psi_grid:
        psi = symmetrize(np.asarray(psi, dtype=float))
        if psi.shape != (p, p):
            rows.append({"psi": psi.tolist(), "error": f"expected shape {(p, p)}"})
            continue
        try:
            a = symmetrize(psi[None, :, :] + scaled.within_cov)
            inv = np.linalg.inv(a)
            np.linalg.cholesky(a)
        except np.linalg.LinAlgError:
            rows.append({"psi": psi.tolist(), "error": "psi + U_i not positive definite"})
            continue
        sum_inv = symmetrize(inv.sum(axis=0))
        lr = log_prior_batch("reference", j, p, n, inv[None], sum_inv[None], gp)[0]
        lj = log_prior_batch("jeffreys", j, p, n, inv[None], sum_inv[None], gp)[0]
        rows.append(
            {
                "psi": psi.tolist(),
                "log_reference": float(lr),
                "log_jeffreys": float(lj),
            }
        )
    return {
        "kind": "priors_eval",
        "version": __version__,
        "config": config.to_dict(),
        "rows": rows,
    }


# ---------------------------------------------------------------------------
# validation suite


def _validate_linalg(rng: np.random.Generator) -> OracleReport:
    checks = []
    # Monotone Kronecker-inverse property over randomized SPD/PSD pairs.
    worst = np.inf
    for _ in range(100):
        p = int(rng.integers(1, 4))
        a = _rand_spd(p, rng) + 0.1 * np.eye(p)
        b = _rand_psd(p, rng)
        ia = np.linalg.inv(a)
        iab = np.linalg.inv(a + b)
        gap = kron(ia, ia) - kron(iab, iab)
        worst = min(worst, float(np.min(np.linalg.eigvalsh(symmetrize(gap)))))
    checks.append(
        OracleCheck(
            name="kron_inverse_monotone_min_eig",
            oracle_value=0.0,
            main_value=worst,
            tolerance=1e-10,
            error=max(0.0, -worst),
            passed=worst >= -1e-10,
        )
    )
    a, b, c, d = (rng.standard_normal((2, 2)) for _ in range(4))
    err = float(np.max(np.abs(kron(a, b) @ kron(c, d) - kron(a @ c, b @ d))))
    checks.append(
        OracleCheck(
            name="kron_mixed_product",
            oracle_value=0.0,
            main_value=err,
            tolerance=1e-12,
            error=err,
            passed=err < 1e-12,
        )
    )
    s = _rand_spd(3, rng)
    r = sym_sqrt(s)
    err = float(np.max(np.abs(r @ r - s)))
    checks.append(
        OracleCheck(
            name="sym_sqrt_roundtrip",
            oracle_value=0.0,
            main_value=err,
            tolerance=1e-10,
            error=err,
            passed=err < 1e-10,
        )
    )
    q = haar_orthogonal(4, rng)
    err = float(np.max(np.abs(q.T @ q - np.eye(4))))
    checks.append(
        OracleCheck(
            name="haar_orthogonality",
            oracle_value=0.0,
            main_value=err,
            tolerance=1e-12,
            error=err,
            passed=err < 1e-12,
        )
    )
    for p in range(1, 6):
        g = duplication_matrix(p)
        gtg = g.T @ g
        want = np.diag(np.concatenate([[1.0] + [2.0] * (p - 1 - j) for j in range(p)]))
        err = float(np.max(np.abs(gtg - want)))
        checks.append(
            OracleCheck(
                name=f"duplication_gram_p{p}",
                oracle_value=0.0,
                main_value=err,
                tolerance=0.0,
                error=err,
                passed=err == 0.0,
            )
        )
    return OracleReport(name="linalg", checks=checks)


def _rand_spd(p: int, rng: np.random.Generator) -> np.ndarray:
    m = rng.standard_normal((p, p))
    return symmetrize(m @ m.T + 0.05 * np.eye(p))


def _rand_psd(p: int, rng: np.random.Generator) -> np.ndarray:
    m = rng.standard_normal((p, max(1, p - 1)))
    return symmetrize(m @ m.T)


def _validate_priors(rng: np.random.Generator, samples: int = 200_000) -> list[OracleReport]:
    reports = []
    for gen in (DensityGenerator.normal(), DensityGenerator.student_t(3.0)):
        for p, n in ((1, 2), (2, 3)):
            psi = _rand_spd(p, rng)
            u = np.stack([_rand_spd(p, rng) for _ in range(n)])
            j = j_constants(gen, p, n, rng)
            fhat = mc_fisher_info(gen, psi, u, samples, rng)
            f11 = fisher_f11(psi, u, j, p, n)
            f22 = fisher_f22(psi, u, j, p, n)
            q = p * (p + 1) // 2
            err11 = float(np.linalg.norm(fhat[:p, :p] - f11) / np.linalg.norm(f11))
            err22 = float(np.linalg.norm(fhat[p:, p:] - f22) / np.linalg.norm(f22))
            cross = float(np.linalg.norm(fhat[p:, :p]) / np.linalg.norm(f11))
            checks = [
                OracleCheck("f11_rel_frobenius", 0.0, err11, 0.05, err11, err11 < 0.05),
                OracleCheck("f22_rel_frobenius", 0.0, err22, 0.05, err22, err22 < 0.05),
                OracleCheck("cross_block_rel", 0.0, cross, 0.05, cross, cross < 0.05),
            ]
            reports.append(
                OracleReport(
                    name=f"fisher_mc_{gen.kind}_p{p}n{n}",
                    checks=checks,
                    sample_count=samples,
                )
            )
    return reports


def _validate_samplers(rng: np.random.Generator) -> list[OracleReport]:
    reports = []
    x = rng.multivariate_normal([1.0, -1.0], np.eye(2), size=10)
    u = np.stack([_rand_spd(2, rng) for _ in range(10)])
    data = Dataset.create(x, u)
    for gen in (DensityGenerator.normal(), DensityGenerator.student_t(3.0)):
        for kind in ("reference", "jeffreys"):
            reports.append(
                factorization_consistency(kind, data, gen, rng=np.random.default_rng(1))
            )
    return reports


def validate(scope: str = "all") -> dict:
    """Run the oracle suite for the requested scope."""
    rng = np.random.default_rng(2024)
    reports: list[OracleReport] = []
    if scope in ("linalg", "all"):
        reports.append(_validate_linalg(rng))
    if scope in ("priors", "all"):
        reports.extend(_validate_priors(rng))
    if scope in ("samplers", "all"):
        reports.extend(_validate_samplers(rng))
    if not reports:
        raise InputError(f"unknown validation scope {scope!r}")
    return {
        "kind": "validate",
        "version": __version__,
        "scope": scope,
        "passed": all(r.passed for r in reports),
        "reports": [r.to_dict() for r in reports],
    }


# ---------------------------------------------------------------------------
# CLI


def _add_common_fit_args(sp: argparse.ArgumentParser):
    sp.add_argument("--model", choices=["normal", "t"], default="normal")
    sp.add_argument("--t-dof", type=float, default=None, help="degrees of freedom for model=t")
    sp.add_argument(
        "--rescale-u",
        action="store_true",
        help="multiply within-study covariances by (d-2)/d under the t model",
    )
    sp.add_argument("--prior", choices=["reference", "jeffreys"], default="reference")
    sp.add_argument("--variant", choices=["A", "B"], default="A")
    sp.add_argument("--draws", type=int, default=100_000)
    sp.add_argument("--burn-in", type=float, default=0.10, dest="burn_in")
    sp.add_argument("--thin", type=int, default=1)
    sp.add_argument("--chains", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--input", required=True)
    sp.add_argument("--format", choices=["json", "csv"], default="json")
    sp.add_argument("--out", default=".", help="output directory")
    sp.add_argument("--parallel", type=int, default=1, metavar="K")


def _config_from_args(args) -> RunConfig:
    seed = args.seed
    env_seed = os.environ.get("ELLIPMETA_SEED")
    if env_seed is not None:
        seed = int(env_seed)
    return RunConfig(
        model=args.model,
        t_dof=args.t_dof,
        rescale_u=args.rescale_u,
        prior=args.prior,
        variant=args.variant,
        draws=args.draws,
        burn_in_fraction=args.burn_in,
        thin=args.thin,
        chains=args.chains,
        seed=seed,
        level=args.level,
    )


def _write_doc(doc: dict, outdir: str, name: str) -> str:
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, name)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ellipmeta",
        description="Objective Bayesian multivariate meta-analysis under elliptical models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp_fit = sub.add_parser("fit", help="fit the random-effects model to a dataset")
    _add_common_fit_args(sp_fit)
    sp_fit.add_argument("--write-draws", action="store_true", help="write draws.csv sidecar")

    sp_cov = sub.add_parser("simulate-coverage", help="run the coverage study harness")
    sp_cov.add_argument("--model", choices=["normal", "t"], default="normal")
    sp_cov.add_argument("--t-dof", type=float, default=None)
    sp_cov.add_argument("--p", type=int, default=2)
    sp_cov.add_argument("--n", type=int, nargs="+", default=[10])
    sp_cov.add_argument("--tau2", type=float, nargs="+", default=[0.25, 1.0])
    sp_cov.add_argument("--prior", nargs="+", default=["reference", "jeffreys"])
    sp_cov.add_argument("--variant", nargs="+", default=["B"])
    sp_cov.add_argument("--replications", type=int, default=300)
    sp_cov.add_argument("--draws", type=int, default=20_000)
    sp_cov.add_argument("--level", type=float, default=0.95)
    sp_cov.add_argument("--seed", type=int, default=0)
    sp_cov.add_argument("--out", default=".")

    sp_val = sub.add_parser("validate", help="run the oracle validation suite")
    sp_val.add_argument("--scope", choices=["linalg", "priors", "samplers", "all"], default="all")
    sp_val.add_argument("--out", default=".")

    sp_pe = sub.add_parser("priors-eval", help="tabulate log priors over a covariance grid")
    _add_common_fit_args(sp_pe)
    sp_pe.add_argument(
        "--psi-grid",
        default=None,
        help="JSON file with a list of p x p matrices; default: scalar multiples of I",
    )

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else 0

    try:
        if args.command == "fit":
            config = _config_from_args(args)
            data = ingest(args.input, args.format)
            os.makedirs(args.out, exist_ok=True)
            doc = _fit_sidecars(config, data, args.out, args.write_draws, args.parallel)
            path = _write_doc(doc, args.out, "fit.json")
            print(path)
            return EXIT_OK

        if args.command == "simulate-coverage":
            from .report import CoverageDesign, coverage_experiment

            env_seed = os.environ.get("ELLIPMETA_SEED")
            seed = int(env_seed) if env_seed is not None else args.seed
            design = CoverageDesign(
                p=args.p,
                n_values=tuple(args.n),
                tau2_values=tuple(args.tau2),
                prior_kinds=tuple(args.prior),
                variants=tuple(args.variant),
                replications=args.replications,
                draws=args.draws,
                level=args.level,
                generator_kind="normal" if args.model == "normal" else "student_t",
                generator_df=args.t_dof,
                master_seed=seed,
            )
            result = coverage_experiment(design)
            doc = {"kind": "coverage", "version": __version__, **result.to_dict()}
            path = _write_doc(doc, args.out, "coverage.json")
            with open(os.path.join(args.out, "coverage.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["p", "n", "tau2", "prior", "variant", "coverage", "replications", "se"])
                for c in result.cells:
                    w.writerow(
                        [c.p, c.n, c.tau2, c.prior_kind, c.variant, c.coverage, c.replications, c.se]
                    )
            print(path)
            return EXIT_OK

        if args.command == "validate":
            doc = validate(args.scope)
            path = _write_doc(doc, args.out, "validate.json")
            print(path)
            for rep in doc["reports"]:
                for chk in rep["checks"]:
                    status = "pass" if chk["passed"] else "FAIL"
                    print(f"  [{status}] {rep['name']}.{chk['name']}: "
                          f"error {chk['error']:.3g} (tol {chk['tolerance']:.3g})")
            return EXIT_OK if doc["passed"] else EXIT_VALIDATION

        if args.command == "priors-eval":
            config = _config_from_args(args)
            data = ingest(args.input, args.format)
            if args.psi_grid is not None:
                with open(args.psi_grid) as fh:
                    grid = [np.asarray(m, dtype=float) for m in json.load(fh)]
            else:
                grid = [np.zeros((data.p, data.p))] + [
                    c * np.eye(data.p) for c in np.geomspace(1e-2, 1e2, 13)
                ]
            doc = priors_eval(config, data, grid)
            path = _write_doc(doc, args.out, "priors_eval.json")
            print(path)
            return EXIT_OK
    except GateRejectionError as exc:
        print(f"propriety gate rejection: {exc}", file=sys.stderr)
        return EXIT_GATE
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
