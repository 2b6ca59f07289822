"""Configuration-driven sweeps: coverage, variance ratios, CI widths, and
the relative-risk comparison of error laws.

Data are generated under beta = 0 (results are shift equivariant).  Every
simulation is a pure function of (config, kappa, sim index); sweeps are
resumable and may run across processes without changing any number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.special import ndtri

from .distributions import GaussianConvolution, ScaledNormal, make_error_law
from .exceptions import HdbootError
from .losses import Loss, loss_from_name
from .mestim import Dataset, fit, sigma_hat_ls
from .resample import ResamplingPlan, WeightLaw, jackknife, run_plan
from .rng import keyed_rng, spawn_seed

SCHEMA_VERSION = 1

DESIGN_KINDS = ("GaussianIID", "DoubleExpIID", "Elliptical")
LAMBDA_LAWS = ("ExpSqrt2", "StdNormal", "Unif")


def gen_design(kind: str, n: int, p: int, seed, lambda_law: str = "ExpSqrt2") -> np.ndarray:
    """Design matrix with iid rows of the requested kind.

    Elliptical rows are lambda_i * Z_i with one scalar scale per row.
    """
    rng = seed if isinstance(seed, np.random.Generator) else keyed_rng(int(seed), "design")
    if kind == "GaussianIID":
        return rng.standard_normal((n, p))
    if kind == "DoubleExpIID":
        return rng.laplace(0.0, 1.0 / np.sqrt(2.0), (n, p))  # variance 1
    if kind == "Elliptical":
        if lambda_law == "ExpSqrt2":
            lam = rng.exponential(1.0 / np.sqrt(2.0), n)
        elif lambda_law == "StdNormal":
            lam = rng.standard_normal(n)
        elif lambda_law == "Unif":
            lam = rng.uniform(0.5, 1.5, n)
        else:
            raise ValueError(f"unknown lambda law {lambda_law!r}")
        return lam[:, None] * rng.standard_normal((n, p))
    raise ValueError(f"unknown design kind {kind!r}")


def gen_errors(law, n: int, seed) -> np.ndarray:
    """Error draws from a named law or a law object."""
    rng = seed if isinstance(seed, np.random.Generator) else keyed_rng(int(seed), "errors")
    if isinstance(law, str):
        law = make_error_law(law)
    return law.sample(rng, n)


@dataclass(frozen=True)
class SchemeSpec:
    """One resampling arm of a sweep.

    ``scheme`` is a ResamplingPlan scheme or "Jackknife"; ``correction``
    applies only to the jackknife arm (none, ls, gamma).
    """

    scheme: str
    weights: str | None = None
    alpha: float | None = None
    correction: str = "none"
    fresh_draws: bool = True
    bandwidth: float | None = None

    @property
    def tag(self) -> str:
        parts = [self.scheme]
        if self.weights:
            parts.append(self.weights)
        if self.alpha is not None:
            parts.append(f"a{self.alpha:g}")
        if self.scheme == "Jackknife" and self.correction != "none":
            parts.append(self.correction)
        return ":".join(parts)

    def plan(self, B: int, ci_level: float) -> ResamplingPlan:
        law = None
        if self.scheme == "WeightedIID":
            if self.weights in (None, "const1", "constant_one"):
                law = WeightLaw("ConstantOne")
            elif self.weights in ("poisson1", "poisson_one"):
                law = WeightLaw("PoissonOne")
            elif self.weights in ("poisson_mix", "poisson_mixture"):
                law = WeightLaw("PoissonMixture", alpha=float(self.alpha))
            else:
                raise ValueError(f"unknown weights {self.weights!r}")
        return ResamplingPlan(
            scheme=self.scheme,
            B=B,
            ci_level=ci_level,
            weights=law,
            fresh_draws=self.fresh_draws,
            bandwidth=self.bandwidth,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Sweep settings; see README for the config-file schema."""

    n: int
    kappa_grid: tuple[float, ...]
    design: str = "GaussianIID"
    lambda_law: str = "ExpSqrt2"
    error_law: str = "StdNormal"
    loss: str = "l2"
    loss_k: float = 1.345
    loss_eta: float = 1e-8
    schemes: tuple[SchemeSpec, ...] = ()
    n_sims: int = 300
    B: int = 500
    master_seed: int = 0
    ci_level: float = 0.95
    metrics: tuple[str, ...] = ("coverage",)
    output_dir: str | None = None
    experiment: str = "sweep"
    name: str = "experiment"
    plots: bool = False

    def __post_init__(self):
        if self.design not in DESIGN_KINDS:
            raise ValueError(f"unknown design {self.design!r}")
        if self.design == "Elliptical" and self.lambda_law not in LAMBDA_LAWS:
            raise ValueError(f"unknown lambda law {self.lambda_law!r}")
        for kappa in self.kappa_grid:
            p = round(kappa * self.n)
            if not 1 <= p < self.n:
                raise ValueError(f"kappa={kappa} with n={self.n} gives inadmissible p={p}")
        for m in self.metrics:
            if m not in ("coverage", "variance_ratio", "ci_width", "relative_risk"):
                raise ValueError(f"unknown metric {m!r}")

    def make_loss(self) -> Loss:
        return loss_from_name(self.loss, k=self.loss_k, eta=self.loss_eta)

    def p_for(self, kappa: float) -> int:
        return int(round(kappa * self.n))

    def fingerprint(self) -> str:
        payload = dataclasses.asdict(self)
        payload.pop("output_dir", None)
        payload.pop("plots", None)
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.blake2b(blob, digest_size=6).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        schema = raw.pop("schema", None)
        if schema != SCHEMA_VERSION:
            raise ValueError(f"config schema must be {SCHEMA_VERSION}, got {schema!r}")
        design = raw.pop("design", "GaussianIID")
        lambda_law = "ExpSqrt2"
        if isinstance(design, dict):
            lambda_law = design.get("lambda_law", "ExpSqrt2")
            design = design["kind"]
        loss = raw.pop("loss", "l2")
        loss_k, loss_eta = 1.345, 1e-8
        if isinstance(loss, dict):
            loss_k = float(loss.get("k", 1.345))
            loss_eta = float(loss.get("eta", 1e-8))
            loss = loss["kind"]
        schemes = tuple(
            SchemeSpec(**spec) if isinstance(spec, dict) else SchemeSpec(scheme=spec)
            for spec in raw.pop("schemes", [])
        )
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("kappa_grid", "metrics"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(design=design, lambda_law=lambda_law, loss=loss,
                   loss_k=loss_k, loss_eta=loss_eta, schemes=schemes, **raw)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


@dataclass
class SimReport:
    """Aggregated sweep results: one row per (kappa, scheme, metric)."""

    rows: list[dict] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)

    COLUMNS = ("kappa", "scheme", "loss", "metric", "value", "se", "n_sims")

    def add(self, **row) -> None:
        self.rows.append({k: row.get(k) for k in self.COLUMNS})

    def value(self, kappa: float, scheme: str, metric: str) -> float:
        for row in self.rows:
            if (
                abs(row["kappa"] - kappa) < 1e-12
                and row["scheme"] == scheme
                and row["metric"] == metric
            ):
                return row["value"]
        raise KeyError((kappa, scheme, metric))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for row in self.rows:
                fh.write(
                    ",".join(
                        "" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else str(row[c]))
                        for c in self.COLUMNS
                    )
                    + "\n"
                )


def _simulate_one(payload: dict, kappa: float, sim: int) -> dict:
    """One simulation: generate, fit, run every scheme. Pure in its arguments."""
    cfg = ExperimentConfig.from_dict(payload)
    loss = cfg.make_loss()
    p = cfg.p_for(kappa)
    X = gen_design(cfg.design, cfg.n, p, keyed_rng(cfg.master_seed, f"design:{p}", sim), cfg.lambda_law)
    eps = gen_errors(cfg.error_law, cfg.n, keyed_rng(cfg.master_seed, f"errors:{p}", sim))
    ds = Dataset(X, eps, beta_true=np.zeros(p))

    record = {
        "fp": cfg.fingerprint(),
        "kappa": kappa,
        "p": p,
        "sim": sim,
        "schemes": {},
    }
    try:
        base = fit(ds, loss)
    except HdbootError as err:
        record["error"] = f"{type(err).__name__}: {err}"
        return record

    s2 = sigma_hat_ls(ds)
    g11 = float(ds.factor().gram_inverse()[0, 0])
    z = float(ndtri(0.5 + cfg.ci_level / 2.0))
    record["beta1"] = float(base.beta_hat[0])
    record["sigma_hat_ls"] = s2
    record["normal_width"] = 2.0 * z * float(np.sqrt(s2 * g11))

    seed = spawn_seed(cfg.master_seed, f"boot:{p}", sim)
    for spec in cfg.schemes:
        cell: dict = {}
        try:
            if spec.scheme == "Jackknife":
                gamma = None
                if spec.correction == "gamma":
                    from .theory import gamma_hat

                    gamma = gamma_hat(ds, loss)
                out = jackknife(ds, loss, gamma_hat=gamma, level=cfg.ci_level)
                var_used = float(
                    {
                        "none": out.var_jack,
                        "ls": out.corrected_ls,
                        "gamma": out.corrected_gamma,
                    }[spec.correction]
                )
                half = float(z * np.sqrt(var_used))
                cell = {
                    "ci_lo": out.point - half,
                    "ci_hi": out.point + half,
                    "var": var_used,
                    "var_raw": out.var_jack,
                    "failed": 0,
                    "redraws": 0,
                }
            else:
                out = run_plan(ds, loss, spec.plan(cfg.B, cfg.ci_level), seed)
                cell = {
                    "ci_lo": out.ci_lo,
                    "ci_hi": out.ci_hi,
                    "var": out.boot_variance,
                    "var_raw": out.boot_variance,
                    "failed": out.failed_replicates,
                    "redraws": out.redraws,
                }
            cell["covered"] = bool(cell["ci_lo"] <= 0.0 <= cell["ci_hi"])
            cell["width"] = float(cell["ci_hi"] - cell["ci_lo"])
        except HdbootError as err:
            cell = {"error": f"{type(err).__name__}: {err}"}
        record["schemes"][spec.tag] = cell
    return record


def _sim_star(args):
    return _simulate_one(*args)


def _load_existing(path: str, fingerprint: str) -> dict:
    done = {}
    if path and os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if rec.get("fp") == fingerprint:
                    done[(rec["kappa"], rec["sim"])] = rec
    return done


def run_sweep(config: ExperimentConfig, workers: int = 1) -> SimReport:
    """Run (or resume) every (kappa, sim) cell and aggregate all requested
    metrics.  Results are independent of ``workers``."""
    payload = _config_payload(config)
    fingerprint = config.fingerprint()

    jsonl_path = None
    if config.output_dir:
        os.makedirs(config.output_dir, exist_ok=True)
        jsonl_path = os.path.join(config.output_dir, "sims.jsonl")
    done = _load_existing(jsonl_path, fingerprint) if jsonl_path else {}

    tasks = [
        (payload, kappa, sim)
        for kappa in config.kappa_grid
        for sim in range(config.n_sims)
        if (kappa, sim) not in done
    ]
    fresh: list[dict] = []
    if tasks:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                fresh = list(pool.map(_sim_star, tasks, chunksize=4))
        else:
            fresh = [_simulate_one(*t) for t in tasks]
    if jsonl_path and fresh:
        with open(jsonl_path, "a") as fh:
            for rec in fresh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    records = list(done.values()) + fresh
    records.sort(key=lambda r: (r["kappa"], r["sim"]))
    report = aggregate(records, config)
    if config.output_dir:
        report.to_csv(os.path.join(config.output_dir, "report.csv"))
        if config.plots:
            from .plots import render_report

            render_report(report.rows, config.output_dir)
    return report


def _config_payload(config: ExperimentConfig) -> dict:
    payload = dataclasses.asdict(config)
    payload["schema"] = SCHEMA_VERSION
    payload["schemes"] = [dataclasses.asdict(s) for s in config.schemes]
    payload.pop("loss_k"), payload.pop("loss_eta")
    payload["loss"] = {"kind": config.loss, "k": config.loss_k, "eta": config.loss_eta}
    payload["design"] = {"kind": config.design, "lambda_law": config.lambda_law}
    payload.pop("lambda_law")
    return payload


def aggregate(records: list[dict], config: ExperimentConfig) -> SimReport:
    """Reduce per-sim records to report rows, in a fixed order."""
    report = SimReport(records=records)
    z_med = np.sqrt(np.pi / 2.0)  # sd inflation of a median vs a mean
    for kappa in config.kappa_grid:
        recs = [r for r in records if abs(r["kappa"] - kappa) < 1e-12 and "error" not in r]
        if not recs:
            continue
        beta1 = np.array([r["beta1"] for r in recs])
        var_emp = float(np.var(beta1, ddof=1))
        normal_w = np.array([r["normal_width"] for r in recs])
        for spec in config.schemes:
            tag = spec.tag
            cells = [(r, r["schemes"][tag]) for r in recs if "error" not in r["schemes"].get(tag, {"error": 1})]
            if not cells:
                continue
            m = len(cells)
            if "coverage" in config.metrics:
                miss = np.array([0.0 if c["covered"] else 1.0 for _, c in cells])
                rate = float(miss.mean())
                report.add(kappa=kappa, scheme=tag, loss=config.loss, metric="miscoverage",
                           value=rate, se=float(np.sqrt(rate * (1 - rate) / m)), n_sims=m)
            if "variance_ratio" in config.metrics and var_emp > 0:
                ratios = np.array([c["var"] for _, c in cells]) / var_emp
                sd = float(ratios.std(ddof=1)) if m > 1 else 0.0
                report.add(kappa=kappa, scheme=tag, loss=config.loss, metric="variance_ratio_mean",
                           value=float(ratios.mean()), se=sd / np.sqrt(m), n_sims=m)
                report.add(kappa=kappa, scheme=tag, loss=config.loss, metric="variance_ratio_median",
                           value=float(np.median(ratios)), se=z_med * sd / np.sqrt(m), n_sims=m)
            if "ci_width" in config.metrics:
                widths = np.array([c["width"] for _, c in cells])
                nw = np.array([r["normal_width"] for r, _ in cells])
                ratio = float(widths.mean() / nw.mean())
                # delta-method se of a ratio of means (correlated numerator/denominator)
                cov = np.cov(widths, nw, ddof=1) if m > 1 else np.zeros((2, 2))
                se2 = (
                    cov[0, 0] / nw.mean() ** 2
                    - 2.0 * ratio * cov[0, 1] / nw.mean() ** 2
                    + ratio**2 * cov[1, 1] / nw.mean() ** 2
                ) / m
                report.add(kappa=kappa, scheme=tag, loss=config.loss, metric="width_ratio",
                           value=ratio, se=float(np.sqrt(max(se2, 0.0))), n_sims=m)
            failures = int(sum(c["failed"] for _, c in cells))
            redraws = int(sum(c["redraws"] for _, c in cells))
            if failures or redraws:
                report.add(kappa=kappa, scheme=tag, loss=config.loss, metric="failed_replicates",
                           value=float(failures), se=0.0, n_sims=m)
                report.add(kappa=kappa, scheme=tag, loss=config.loss, metric="redraws",
                           value=float(redraws), se=0.0, n_sims=m)
        del normal_w
    return report


def run_coverage(config: ExperimentConfig, workers: int = 1) -> SimReport:
    """Miscoverage-rate sweep for every scheme and kappa."""
    cfg = dataclasses.replace(config, metrics=("coverage",))
    return run_sweep(cfg, workers=workers)


def run_variance_ratio(config: ExperimentConfig, workers: int = 1) -> SimReport:
    """Per-sim resampling variance over the empirical variance of beta1."""
    cfg = dataclasses.replace(config, metrics=("variance_ratio",))
    return run_sweep(cfg, workers=workers)


def run_ci_width(config: ExperimentConfig, workers: int = 1) -> SimReport:
    """Mean bootstrap CI width over the mean normal-theory width."""
    cfg = dataclasses.replace(config, metrics=("ci_width",))
    return run_sweep(cfg, workers=workers)


# -- relative risk -------------------------------------------------------


def _risk_arm(config: ExperimentConfig, kappa: float, law, arm: str, workers: int = 1) -> np.ndarray:
    """Mean coefficient-error norms ||beta_hat||_2 over sims for one error law."""
    loss = config.make_loss()
    p = config.p_for(kappa)
    tasks = list(range(config.n_sims))

    def one(sim: int) -> float:
        X = gen_design(config.design, config.n, p,
                       keyed_rng(config.master_seed, f"rr-design:{p}:{arm}", sim), config.lambda_law)
        eps = law.sample(keyed_rng(config.master_seed, f"rr-errors:{p}:{arm}", sim), config.n)
        ds = Dataset(X, eps)
        return float(np.linalg.norm(fit(ds, loss).beta_hat))

    return np.array([one(s) for s in tasks])


def run_relative_risk(config: ExperimentConfig, workers: int = 1) -> SimReport:
    """Risk of the fit under the convolution law and under a matched normal,
    relative to the risk under the true law.

    The convolution spread uses the mean risk from a first pass under the
    true law; all three arms are rescaled/specified to share the error
    variance.
    """
    base_law = make_error_law(config.error_law)
    sigma2 = base_law.variance
    report = SimReport()
    for kappa in config.kappa_grid:
        risks_g = _risk_arm(config, kappa, base_law, "G", workers)
        r_hat = float(risks_g.mean())
        conv_law = GaussianConvolution(base=base_law, spread_sd=r_hat, target_variance=sigma2)
        norm_law = ScaledNormal(variance=sigma2)
        risks_conv = _risk_arm(config, kappa, conv_law, "Gconv", workers)
        risks_norm = _risk_arm(config, kappa, norm_law, "Gnorm", workers)
        m = config.n_sims
        for name, risks in (("conv_over_true", risks_conv), ("normal_over_true", risks_norm)):
            ratio = float(risks.mean() / risks_g.mean())
            se = ratio * float(
                np.sqrt(
                    risks.var(ddof=1) / (m * risks.mean() ** 2)
                    + risks_g.var(ddof=1) / (m * risks_g.mean() ** 2)
                )
            )
            report.add(kappa=kappa, scheme=name, loss=config.loss, metric="risk_ratio",
                       value=ratio, se=se, n_sims=m)
        report.add(kappa=kappa, scheme="risk", loss=config.loss, metric="risk_true",
                   value=r_hat, se=float(risks_g.std(ddof=1) / np.sqrt(m)), n_sims=m)
    if config.output_dir:
        os.makedirs(config.output_dir, exist_ok=True)
        report.to_csv(os.path.join(config.output_dir, "report.csv"))
        if config.plots:
            from .plots import render_report

            render_report(report.rows, config.output_dir)
    return report
