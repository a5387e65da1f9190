"""Monte Carlo engine: data-generating processes and study metrics.

Three families of generators are provided.

* A1/A2: a constant marginal effect of 2 with covariate-by-treatment
  heterogeneity, Gaussian (A1) or centered Gamma/Poisson (A2) noise.
* B1/B2: the same outcome model with an effect growing with exposure
  duration, so the marginal duration effects are (1 + d) / 2.
* C1/C2: binary outcomes from a logistic model with a duration-specific
  effect; the targets are marginal odds ratios for the saturated structure.

Every cluster has a finite source population; each period enrolls a random
subset of it, drawn independently of outcomes.  All normal distributions
below are parameterized by variance.

Replicate ``r`` of a study with seed ``s`` draws from a Philox stream keyed
by ``SeedSequence([s, r])``, so results do not depend on how replicates are
spread across worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data_model import RandomizationSpec, TrialData
from .design import TreatmentEffectSpec
from .report import Z95

__all__ = [
    "DESIGNS",
    "DESIGN_C_TRUTH",
    "PotentialOutcomeDraw",
    "GeneratorOptions",
    "ModelSpec",
    "SimulationConfig",
    "StudyMetrics",
    "replicate_rng",
    "generate",
    "generate_design_a",
    "generate_design_b",
    "generate_design_c",
    "design_c_truth",
    "assign_adoption",
    "run_study",
    "run_lrt_study",
    "summarize",
    "load_config",
]

DESIGNS = ("A1", "A2", "B1", "B2", "C1", "C2")

# Marginal odds ratios of design C, computed by design_c_truth with
# n_clusters=2000 (10^7 individuals), n_nodes=20, seed=20240607.
DESIGN_C_TRUTH = {
    "C1": {"Φ_1(1)": 2.287753, "Φ_2(1)": 2.277897, "Φ_2(2)": 2.696712},
    "C2": {"Φ_1(1)": 2.391349, "Φ_2(1)": 2.385660, "Φ_2(2)": 2.841994},
}

ADJUSTMENT_SETS = {
    "A": {"none": [], "partial": ["x1", "x3"], "full": ["x1", "x2", "x3", "x4"]},
    "B": {"none": [], "partial": ["x1", "x3"], "full": ["x1", "x2", "x3", "x4"]},
    "C": {"none": [], "full": ["x1", "x2"]},
}


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent counter-based stream for one replicate."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replicate)])))


@dataclass
class PotentialOutcomeDraw:
    """Potential outcomes of the enrolled records.

    ``outcomes[r, z]`` is Y(z) for record r, with column 0 the untreated
    outcome; entries for adoption times after the record's period are NaN.
    """

    cluster: np.ndarray
    period: np.ndarray
    individual: np.ndarray
    outcomes: np.ndarray

    def observed(self, adoption) -> np.ndarray:
        """Select Y(Z_i) when Z_i <= j and Y(0) otherwise."""
        z = np.asarray(adoption)[self.cluster]
        col = np.where(z <= self.period, z, 0)
        return self.outcomes[np.arange(col.size), col]


@dataclass
class GeneratorOptions:
    """Knobs of the generators; defaults give the standard designs."""

    J: int | None = None
    population: int | None = None
    n_min: int = 5
    n_max: int = 50
    heterogeneity: bool = True
    covariate_effects: bool = True
    noise_scale: float = 1.0
    cluster_var: float = 0.1
    residual_var: float = 0.9
    random_effect_var: float = 0.25


def assign_adoption(rng, I: int, J: int, balanced_only: bool = True) -> np.ndarray:
    """Random adoption times with I/J clusters per period.

    When ``I`` is not a multiple of ``J`` and ``balanced_only`` is False the
    leftover clusters go to randomly chosen periods, at most one each.
    """
    if I % J:
        if balanced_only:
            raise ValueError(f"number of clusters {I} is not divisible by J={J}")
        extra = rng.choice(J, size=I % J, replace=False) + 1
        z = np.concatenate([np.repeat(np.arange(1, J + 1), I // J), extra])
    else:
        z = np.repeat(np.arange(1, J + 1), I // J)
    return rng.permutation(z)


def _enroll(rng, population: int, J: int, n_min: int, n_max: int):
    sizes = rng.integers(n_min, n_max + 1, size=J)
    members = [np.sort(rng.choice(population, size=n, replace=False)) for n in sizes]
    return sizes, members


def _to_trial(draw: PotentialOutcomeDraw, adoption, x, names, J, truth, design, probs):
    y = draw.observed(adoption)
    data = TrialData(draw.cluster, draw.period, y, {i: int(z) for i, z in enumerate(adoption)},
                     x=x, ids=draw.individual, covariate_names=names, n_periods=J,
                     randomization=RandomizationSpec(tuple(probs), "design"))
    data.metadata.update({"design": design, "truth": dict(truth), "potential_outcomes": draw})
    return data


def _gamma_centered(rng, var, size):
    scale = math.sqrt(var)
    return rng.gamma(1.0, scale, size=size) - scale


def _ab_generate(family: str, scenario: int, I: int, rng, opts: GeneratorOptions) -> TrialData:
    J = opts.J or 5
    N = opts.population or 1000
    z = assign_adoption(rng, I, J)
    clus, per, ind, xs, pos = [], [], [], [], []
    for i in range(I):
        x1 = rng.binomial(1, 0.5, N).astype(float)
        x2 = rng.binomial(1, 0.8, N).astype(float)
        x3 = rng.normal(0.0, math.sqrt(0.1)) + rng.normal(0.0, math.sqrt(0.4), N)
        x4 = rng.normal(0.0, math.sqrt(0.1)) + rng.normal(0.0, math.sqrt(0.9), N)
        h1 = x1 - x1.mean()
        h3 = x3 ** 3 - np.mean(x3 ** 3)
        if scenario == 1:
            alpha = rng.normal(0.0, math.sqrt(opts.cluster_var)) * opts.noise_scale
            gamma = np.zeros(J)
            beta_i = 0.0
        else:
            alpha = _gamma_centered(rng, opts.cluster_var, None) * opts.noise_scale
            gamma = _gamma_centered(rng, opts.cluster_var, J) * opts.noise_scale
            beta_i = rng.normal(0.0, math.sqrt(opts.random_effect_var)) * opts.noise_scale
        sizes, members = _enroll(rng, N, J, opts.n_min, opts.n_max)
        for j in range(1, J + 1):
            k = members[j - 1]
            n = k.size
            if scenario == 1:
                eps = rng.normal(0.0, math.sqrt(opts.residual_var), n)
            else:
                eps = rng.poisson(opts.residual_var, n) - opts.residual_var
            cov = (1.5 * (j + 1) * x1[k] + x2[k] + 6.0 * (j + 1) / (J + 1) * x3[k] ** 2
                   + x4[k]) if opts.covariate_effects else 0.0
            base = (0.25 + 0.004 * j + cov
                    + alpha + gamma[j - 1] + opts.noise_scale * eps)
            out = np.full((n, J + 1), np.nan)
            out[:, 0] = base
            for zz in range(1, j + 1):
                d = j - zz + 1
                if family == "A":
                    if not opts.heterogeneity:
                        te = np.full(n, 2.0)
                    elif scenario == 1:
                        te = 2.0 + 0.5 * h1[k] + h3[k]
                    else:
                        te = 2.0 + (j + 1) * h1[k] / 2.0 + (j + 1) * h3[k] / (J + 1)
                else:
                    het = (0.125 * h1[k] + 0.25 * h3[k]) if opts.heterogeneity else 0.0
                    te = (1.0 + d) * (0.5 + het)
                out[:, zz] = base + te + beta_i
            clus.append(np.full(n, i))
            per.append(np.full(n, j))
            ind.append(k)
            xs.append(np.column_stack([x1[k], x2[k], x3[k], x4[k]]))
            pos.append(out)
    draw = PotentialOutcomeDraw(np.concatenate(clus), np.concatenate(per),
                                np.concatenate(ind), np.vstack(pos))
    if family == "A":
        truth = {"Δ": 2.0}
    else:
        truth = {f"Δ({d})": (1.0 + d) / 2.0 for d in range(1, J + 1)}
        truth["Δ^{D-avg}"] = float(np.mean([(1.0 + d) / 2.0 for d in range(1, J + 1)]))
        truth["Δ"] = truth["Δ^{D-avg}"]
    return _to_trial(draw, z, np.vstack(xs), ["x1", "x2", "x3", "x4"], J, truth,
                     f"{family}{scenario}", np.full(J, 1.0 / J))


def generate_design_a(scenario: str, I: int, seed: int | np.random.Generator,
                      options: GeneratorOptions | None = None) -> TrialData:
    """Constant-effect design; ``scenario`` is "A1" or "A2"."""
    rng = seed if isinstance(seed, np.random.Generator) else replicate_rng(seed, 0)
    s = _scenario(scenario, "A")
    return _ab_generate("A", s, I, rng, options or GeneratorOptions())


def generate_design_b(scenario: str, I: int, seed: int | np.random.Generator,
                      options: GeneratorOptions | None = None) -> TrialData:
    """Duration-effect design; ``scenario`` is "B1" or "B2"."""
    rng = seed if isinstance(seed, np.random.Generator) else replicate_rng(seed, 0)
    s = _scenario(scenario, "B")
    return _ab_generate("B", s, I, rng, options or GeneratorOptions())


def _scenario(name: str, family: str) -> int:
    name = str(name).upper()
    if name not in (f"{family}1", f"{family}2"):
        raise ValueError(f"unknown scenario {name!r} for design {family}")
    return int(name[1])


def _c_effect_var(scenario: int, opts: GeneratorOptions | None) -> float:
    if opts is not None and opts.random_effect_var != GeneratorOptions.random_effect_var:
        return opts.random_effect_var
    return 0.25 if scenario == 1 else 0.04


def generate_design_c(scenario: str, I: int, seed: int | np.random.Generator,
                      options: GeneratorOptions | None = None) -> TrialData:
    """Binary-outcome design; ``scenario`` is "C1" or "C2"."""
    rng = seed if isinstance(seed, np.random.Generator) else replicate_rng(seed, 0)
    s = _scenario(scenario, "C")
    opts = options or GeneratorOptions()
    J = opts.J or 3
    N = opts.population or 5000
    vb = _c_effect_var(s, options)
    z = assign_adoption(rng, I, J, balanced_only=False)
    clus, per, ind, xs, pos = [], [], [], [], []
    for i in range(I):
        x1 = rng.binomial(1, 0.05, N).astype(float)
        x2 = rng.normal(0.0, math.sqrt(0.025)) + rng.normal(0.0, math.sqrt(0.1), N)
        h1 = x1 - x1.mean()
        q2 = x2 ** 2
        h2 = q2 - q2.mean()
        alpha = rng.normal(0.0, math.sqrt(0.015)) * opts.noise_scale
        gamma = rng.normal(0.0, math.sqrt(0.01), J) * opts.noise_scale
        beta_i = rng.normal(0.0, math.sqrt(vb)) * opts.noise_scale
        sizes, members = _enroll(rng, N, J, opts.n_min, opts.n_max)
        for j in range(1, J + 1):
            k = members[j - 1]
            n = k.size
            cov = (x1[k] + j / J * q2[k]) if opts.covariate_effects else 0.0
            eta0 = 0.08 + 0.02 * j + cov + alpha + gamma[j - 1]
            out = np.full((n, J + 1), np.nan)
            out[:, 0] = rng.binomial(1, expit(eta0))
            for zz in range(1, j + 1):
                d = j - zz + 1
                het = (0.25 * h1[k] + d / 10.0 * h2[k]) if opts.heterogeneity else 0.0
                te = 0.72 + 0.18 * d + het + beta_i
                out[:, zz] = rng.binomial(1, expit(eta0 + te))
            clus.append(np.full(n, i))
            per.append(np.full(n, j))
            ind.append(k)
            xs.append(np.column_stack([x1[k], x2[k]]))
            pos.append(out)
    draw = PotentialOutcomeDraw(np.concatenate(clus), np.concatenate(per),
                                np.concatenate(ind), np.vstack(pos))
    truth = {k: v for k, v in DESIGN_C_TRUTH.get(f"C{s}", {}).items() if v is not None}
    if options is not None and options != GeneratorOptions():
        truth = {}  # frozen values only hold for the default design
    return _to_trial(draw, z, np.vstack(xs), ["x1", "x2"], J, truth, f"C{s}",
                     np.full(J, 1.0 / J))


def generate(design: str, I: int, rng, options: GeneratorOptions | None = None) -> TrialData:
    design = str(design).upper()
    if design not in DESIGNS:
        raise ValueError(f"unknown design {design!r}; expected one of {DESIGNS}")
    fn = {"A": generate_design_a, "B": generate_design_b, "C": generate_design_c}[design[0]]
    return fn(design, I, rng, options)


def design_c_truth(scenario: str, n_clusters: int = 2000, population: int = 5000,
                   n_nodes: int = 20, seed: int = 20240607, J: int = 3) -> dict:
    """Marginal odds ratios Phi_j(d) of design C by plug-in Monte Carlo.

    Covariates are drawn for ``n_clusters`` source populations; the Gaussian
    random effects, which enter only through a normal offset on the logit
    scale, are integrated out by Gauss-Hermite quadrature.
    """
    s = _scenario(scenario, "C")
    vb = 0.25 if s == 1 else 0.04
    rng = replicate_rng(seed, s)
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    weights = weights / weights.sum()
    sd0 = math.sqrt(0.015 + 0.01)
    sd1 = math.sqrt(0.015 + 0.01 + vb)
    acc = {}
    for _ in range(n_clusters):
        x1 = rng.binomial(1, 0.05, population).astype(float)
        x2 = rng.normal(0.0, math.sqrt(0.025)) + rng.normal(0.0, math.sqrt(0.1), population)
        h1 = x1 - x1.mean()
        q2 = x2 ** 2
        h2 = q2 - q2.mean()
        for j in range(1, J):
            eta0 = 0.08 + 0.02 * j + x1 + j / J * q2
            m0 = expit(eta0[:, None] + sd0 * nodes) @ weights
            acc[(j, 0)] = acc.get((j, 0), 0.0) + m0.mean()
            for d in range(1, j + 1):
                te = 0.72 + 0.18 * d + 0.25 * h1 + d / 10.0 * h2
                m1 = expit((eta0 + te)[:, None] + sd1 * nodes) @ weights
                acc[(j, d)] = acc.get((j, d), 0.0) + m1.mean()
    out = {}
    for j in range(1, J):
        m0 = acc[(j, 0)] / n_clusters
        for d in range(1, j + 1):
            m1 = acc[(j, d)] / n_clusters
            out[f"Φ_{j}({d})"] = (m1 / (1 - m1)) / (m0 / (1 - m0))
    return out


# -- study configuration --------------------------------------------------------

@dataclass
class ModelSpec:
    """One analysis applied to every replicate."""

    name: str
    estimator: str = "lmm"
    structure: str = "constant"
    correlation: str = "exchangeable"
    adjustment: str | list = "none"
    link: str = "identity"
    scale: str = "difference"
    summaries: list | None = None
    reference: str | None = None


@dataclass
class SimulationConfig:
    design: str
    clusters: int
    replicates: int = 1
    seed: int = 20240607
    models: list = field(default_factory=list)
    options: GeneratorOptions = field(default_factory=GeneratorOptions)

    def __post_init__(self):
        self.design = str(self.design).upper()
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.clusters < 2:
            raise ValueError("need at least two clusters")
        self.models = [m if isinstance(m, ModelSpec) else ModelSpec(**m) for m in self.models]
        if isinstance(self.options, dict):
            self.options = GeneratorOptions(**self.options)
        if not self.models:
            self.models = default_models(self.design)
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError("model names must be unique")
        for m in self.models:
            if m.reference is not None and m.reference not in names:
                raise ValueError(f"model {m.name}: unknown reference {m.reference!r}")
            covariates(self.design, m.adjustment)


def covariates(design: str, adjustment) -> list:
    if isinstance(adjustment, (list, tuple)):
        return list(adjustment)
    sets = ADJUSTMENT_SETS[design[0]]
    key = str(adjustment).lower()
    if key not in sets:
        raise ValueError(f"adjustment {adjustment!r} not defined for design {design}")
    return sets[key]


def default_models(design: str) -> list:
    fam = design[0]
    if fam in "AB":
        corr = "exchangeable"
        out = []
        structures = ["constant"] if fam == "A" else ["constant", "duration"]
        for struct in structures:
            for adj in ("none", "partial", "full"):
                out.append(ModelSpec(name=f"{struct}-{adj}", structure=struct, correlation=corr,
                                     adjustment=adj, reference=f"{struct}-none"))
        return out
    return [
        ModelSpec("lmm-none", "lmm", "saturated", "nested", "none", "identity", "or",
                  reference="lmm-none"),
        ModelSpec("lmm-full", "lmm", "saturated", "nested", "full", "identity", "or",
                  reference="lmm-none"),
        ModelSpec("gee-none", "gee", "saturated", "independence", "none", "logit", "or",
                  reference="gee-none"),
        ModelSpec("gee-full", "gee", "saturated", "independence", "full", "logit", "or",
                  reference="gee-none"),
    ]


def _toml_load(path):
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config(path) -> SimulationConfig:
    """Read a study configuration from TOML or JSON."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        raw = json.loads(path.read_text(encoding="utf-8"))
    else:
        raw = _toml_load(path)
    known = {"design", "clusters", "replicates", "seed", "models", "options"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for key in ("design", "clusters"):
        if key not in raw:
            raise ValueError(f"config is missing '{key}'")
    try:
        return SimulationConfig(**raw)
    except TypeError as exc:
        raise ValueError(f"invalid config: {exc}") from None


# -- running ---------------------------------------------------------------

def analyze_model(data: TrialData, design: str, model: ModelSpec):
    """Fit one model and return its estimand report."""
    from .gee import WorkingCorrelation, estimate_estimands_gee, fit_gee
    from .lmm import extract_estimands, fit_lmm
    sub = data.select_covariates(covariates(design, model.adjustment))
    spec = TreatmentEffectSpec(model.structure, data.n_periods)
    if model.estimator == "lmm":
        fit = fit_lmm(sub, spec, model.correlation)
        return extract_estimands(fit, summaries=model.summaries, scale=model.scale)
    if model.estimator == "gee":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_gee(sub, spec, WorkingCorrelation(model.correlation), model.link)
        return estimate_estimands_gee(fit, scale=model.scale, summaries=model.summaries)
    raise ValueError(f"unknown estimator {model.estimator!r}")


def _run_replicate(args):
    config, rep = args
    rng = replicate_rng(config.seed, rep)
    data = generate(config.design, config.clusters, rng, config.options)
    truth = data.metadata["truth"]
    out = []
    for model in config.models:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rep_ = analyze_model(data, config.design, model)
        except Exception as exc:  # recorded and excluded from metrics
            out.append({"error": f"{type(exc).__name__}: {exc}"})
            continue
        rows = {}
        for row in rep_.rows():
            if row.label in truth:
                rows[row.label] = (row.estimate, row.se_robust, row.se_model,
                                   row.ci_lo, row.ci_hi, row.log_se)
        out.append({"rows": rows})
    return out, truth


@dataclass
class StudyMetrics:
    design: str
    clusters: int
    replicates: int
    seed: int
    rows: list
    failures: dict

    COLUMNS = ("model", "estimand", "truth", "bias", "ese", "ase_mb", "ase_rob",
               "ecp_mb", "ecp_rob", "re", "n_ok", "n_failed")

    def get(self, model: str, estimand: str) -> dict:
        for r in self.rows:
            if r["model"] == model and r["estimand"] == estimand:
                return r
        raise KeyError((model, estimand))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c])
                        for c in self.COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"design": self.design, "clusters": self.clusters,
                           "replicates": self.replicates, "seed": self.seed,
                           "rows": self.rows, "failures": self.failures},
                          indent=2, ensure_ascii=False)


def _nanmean(v):
    v = np.asarray([x for x in v if x is not None], dtype=float)
    return float(np.mean(v)) if v.size else None


def summarize(config: SimulationConfig, results) -> StudyMetrics:
    """Aggregate per-replicate results into bias/ESE/ASE/ECP/RE."""
    rows = []
    failures = {}
    per_model = {}
    for m_idx, model in enumerate(config.models):
        recs = [res[m_idx] for res, _ in results]
        truth = results[0][1] if results else {}
        errors = [r["error"] for r in recs if "error" in r]
        failures[model.name] = errors[:5]
        ok = [r["rows"] for r in recs if "rows" in r]
        labels = [lab for lab in truth if any(lab in r for r in ok)]
        stats = {}
        for lab in labels:
            vals = [r[lab] for r in ok if lab in r]
            est = np.array([v[0] for v in vals])
            t = truth[lab]
            se_r = [v[1] for v in vals]
            se_m = [v[2] for v in vals]
            cov_r = [v[3] <= t <= v[4] for v in vals]
            cov_m = [abs(v[0] - t) <= Z95 * v[2] for v in vals if v[2] is not None]
            ese = float(np.std(est, ddof=1)) if est.size > 1 else 0.0
            stats[lab] = {"model": model.name, "estimand": lab, "truth": float(t),
                          "bias": float(np.mean(est - t)), "ese": ese,
                          "ase_mb": _nanmean(se_m), "ase_rob": _nanmean(se_r),
                          "ecp_mb": float(np.mean(cov_m)) if cov_m else None,
                          "ecp_rob": float(np.mean(cov_r)), "re": None,
                          "n_ok": len(vals), "n_failed": len(recs) - len(vals)}
        per_model[model.name] = stats
    for model in config.models:
        ref = per_model.get(model.reference or model.name, {})
        for lab, st in per_model[model.name].items():
            if lab in ref and st["ese"] > 0:
                st["re"] = ref[lab]["ese"] ** 2 / st["ese"] ** 2
            rows.append(st)
    return StudyMetrics(config.design, config.clusters, config.replicates, config.seed,
                        rows, failures)


def run_study(config: SimulationConfig, threads: int = 1, progress=None) -> StudyMetrics:
    """Run every replicate and aggregate the metrics.

    Parameters
    ----------
    config : SimulationConfig
    threads : int
        Worker processes; results are identical for any value.
    progress : callable, optional
        Called with the number of finished replicates.
    """
    jobs = [(config, r) for r in range(config.replicates)]
    results = []
    if threads <= 1:
        for n, job in enumerate(jobs, 1):
            results.append(_run_replicate(job))
            if progress:
                progress(n)
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for n, res in enumerate(pool.map(_run_replicate, jobs, chunksize=4), 1):
                results.append(res)
                if progress:
                    progress(n)
    return summarize(config, results)


@dataclass
class LrtStudy:
    rejection_rate: float
    n_ok: int
    n_failed: int
    statistics: list
    df: int


def run_lrt_study(design: str, clusters: int, replicates: int, seed: int,
                  restricted: str = "constant", general: str = "duration",
                  correlation: str = "nested", adjustment="full", alpha: float = 0.05,
                  options: GeneratorOptions | None = None) -> LrtStudy:
    """Rejection rate of the likelihood-ratio structure test over replicates."""
    from .lmm import fit_lmm, lrt_structures
    stats, rejections, failed, df = [], 0, 0, 0
    for rep in range(replicates):
        data = generate(design, clusters, replicate_rng(seed, rep), options)
        data = data.select_covariates(covariates(design, adjustment))
        J = data.n_periods
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                g = fit_lmm(data, TreatmentEffectSpec(general, J), correlation)
                r = fit_lmm(data, TreatmentEffectSpec(restricted, J), correlation,
                            max_period=g.design.n_periods_used)
            res = lrt_structures(r, g)
        except Exception:
            failed += 1
            continue
        df = res.df
        stats.append(res.statistic)
        rejections += res.p_value < alpha
    n_ok = len(stats)
    return LrtStudy(rejections / n_ok if n_ok else float("nan"), n_ok, failed, stats, df)
