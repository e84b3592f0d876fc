"""Seeded data generators and the power/size experiment runner.

Two demonstration regions are bundled, mirroring published HapMap-derived
haplotype panels: in region 1 the untyped locus is perfectly predicted by
the typed loci; in region 2 prediction is only moderate.  Each region
carries two frequency columns: the study-population frequencies used to
generate data and the reference frequencies used for imputation (the two
deliberately differ, mimicking reference-panel mismatch).

Every generator is fully determined by an explicit seed; replicate r of an
experiment uses the independent substream (seed, r), so results do not
depend on scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .core import CountsTable, GeneticModel, GenotypeDataset
from .errors import (
    ContractViolation,
    DegenerateFrequency,
    DomainError,
    NotTestable,
    SimulationStall,
    StratumEmpty,
)
from .imputation import (
    ReferencePanel,
    hotelling_t2_test,
    impute_posteriors,
    point_mass_posteriors,
    prospective_imputed_test,
    retrospective_imputed_test,
)

_CHUNK = 16384


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent, scheduling-invariant substream for one replicate."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


# ---------------------------------------------------------------------------
# Bundled demonstration regions
# ---------------------------------------------------------------------------

_REGION1_LOCI = ("A1", "T", "A2", "A3", "A4")
_REGION1_HAPS = np.array([
    [1, 0, 0, 0, 0],
    [0, 1, 0, 1, 0],
    [1, 1, 0, 1, 0],
    [1, 1, 1, 0, 1],
    [0, 1, 1, 0, 1],
    [1, 1, 0, 0, 1],
], dtype=np.int8)
_REGION1_STUDY = np.array([0.158, 0.400, 0.050, 0.358, 0.022, 0.012])
_REGION1_REFERENCE = np.array([0.058, 0.300, 0.050, 0.558, 0.017, 0.017])

_REGION2_LOCI = ("A1", "T", "A2", "A3")
_REGION2_HAPS = np.array([
    [0, 0, 0, 0],
    [0, 0, 1, 1],
    [0, 1, 0, 0],
    [0, 1, 1, 0],
    [1, 0, 1, 0],
    [1, 0, 1, 1],
], dtype=np.int8)
_REGION2_STUDY = np.array([0.058, 0.017, 0.342, 0.008, 0.142, 0.433])
_REGION2_REFERENCE = np.array([0.088, 0.027, 0.302, 0.008, 0.242, 0.333])


def _minor_recode(gen_panel: ReferencePanel,
                  ref_panel: ReferencePanel) -> tuple:
    """Flip the untyped-locus allele labels in both panels when allele 1 is
    the major allele under the reference frequencies, so that the untyped
    genotype is always a minor-allele count."""
    if ref_panel.allele_freq(ref_panel.untyped_index) > 0.5:
        j = ref_panel.untyped_index
        return gen_panel.flip_allele(j), ref_panel.flip_allele(j)
    return gen_panel, ref_panel


def region_panels(region: int) -> tuple:
    """(generating, reference) panels for a bundled region, minor-recoded."""
    if region == 1:
        loci, haps = _REGION1_LOCI, _REGION1_HAPS
        study, ref = _REGION1_STUDY, _REGION1_REFERENCE
    elif region == 2:
        loci, haps = _REGION2_LOCI, _REGION2_HAPS
        study, ref = _REGION2_STUDY, _REGION2_REFERENCE
    else:
        raise DomainError(f"unknown bundled region {region}")
    untyped = loci.index("T")
    gen = ReferencePanel(loci, haps.copy(), study, untyped)
    refp = ReferencePanel(loci, haps.copy(), ref, untyped)
    return _minor_recode(gen, refp)


# ---------------------------------------------------------------------------
# Scenario specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    """One cell of a power/size experiment."""

    gen_panel: ReferencePanel
    ref_panel: ReferencePanel
    mode: str
    beta: float
    n_cases: int
    n_controls: int
    replicates: int
    seed: int
    alpha: float = -3.0
    alpha_level: float = 0.01
    zeta: float = 0.0
    draw_budget: int = 10_000_000

    def __post_init__(self):
        if self.mode not in ("recessive", "dominant", "additive"):
            raise DomainError(f"unknown mode {self.mode!r}")
        if self.gen_panel.locus_ids != self.ref_panel.locus_ids \
                or self.gen_panel.untyped_index != self.ref_panel.untyped_index \
                or not np.array_equal(self.gen_panel.haplotypes,
                                      self.ref_panel.haplotypes):
            raise ContractViolation("generating and reference panels must "
                                    "share haplotypes and loci")
        if self.n_cases < 1 or self.n_controls < 1 or self.replicates < 1:
            raise ContractViolation("sample sizes and replicates must be >= 1")
        if not 0.0 <= self.zeta < 1.0:
            raise ContractViolation("zeta must lie in [0, 1)")
        if not 0.0 < self.alpha_level < 1.0:
            raise ContractViolation("alpha_level must lie in (0, 1)")

    @property
    def model(self) -> GeneticModel:
        return GeneticModel.from_name(self.mode)

    @classmethod
    def for_region(cls, region: int, mode: str, beta: float,
                   n_cases: int = 1000, n_controls: int = 1000,
                   replicates: int = 1000, seed: int = 0,
                   alpha_level: float = 0.01, zeta: float = 0.0,
                   alpha: float = -3.0) -> "ScenarioSpec":
        gen, ref = region_panels(region)
        return cls(gen, ref, mode, beta, n_cases, n_controls, replicates,
                   seed, alpha, alpha_level, zeta)

    @classmethod
    def from_config(cls, path) -> "ScenarioSpec":
        """Key-value config file; either ``scenario = 1|2`` or explicit
        ``gen_panel``/``ref_panel`` TSV paths."""
        from .imputation import read_panel_tsv

        keys = {}
        with open(path, "rt", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise DomainError(f"{path}: line {lineno}: expected key = value")
                key, val = (part.strip() for part in text.split("=", 1))
                keys[key] = val

        def pop(name, cast, default=None, required=False):
            if name in keys:
                raw = keys.pop(name)
                try:
                    return cast(raw)
                except ValueError:
                    raise DomainError(f"{path}: bad value for {name}: {raw!r}") from None
            if required:
                raise DomainError(f"{path}: missing required key {name}")
            return default

        if "scenario" in keys:
            gen, ref = region_panels(pop("scenario", int))
        else:
            gen_path = pop("gen_panel", str, required=True)
            ref_path = pop("ref_panel", str, required=True)
            base = os.path.dirname(os.path.abspath(path))
            gen = read_panel_tsv(os.path.join(base, gen_path))
            ref = read_panel_tsv(os.path.join(base, ref_path))
            gen, ref = _minor_recode(gen, ref)
        spec = cls(
            gen_panel=gen, ref_panel=ref,
            mode=pop("mode", str, required=True),
            beta=pop("beta", float, required=True),
            n_cases=pop("n_cases", int, 1000),
            n_controls=pop("n_controls", int, 1000),
            replicates=pop("replicates", int, 1000),
            seed=pop("seed", int, 0),
            alpha=pop("alpha", float, -3.0),
            alpha_level=pop("alpha_level", float, 0.01),
            zeta=pop("zeta", float, 0.0),
            draw_budget=pop("draw_budget", int, 10_000_000),
        )
        if keys:
            raise DomainError(f"{path}: unknown config keys {sorted(keys)}")
        return spec


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def fixation_genotype_probs(f: float, zeta: float) -> np.ndarray:
    """Single-locus genotype law under the fixation-index departure from
    HWE (zeta = 0 recovers HWE; zeta = 1 leaves only homozygotes)."""
    if not 0.0 <= zeta <= 1.0:
        raise DomainError("zeta must lie in [0, 1]")
    if not 0.0 <= f <= 1.0:
        raise DomainError("allele frequency outside [0, 1]")
    return np.array([
        zeta * (1.0 - f) + (1.0 - zeta) * (1.0 - f) ** 2,
        (1.0 - zeta) * 2.0 * f * (1.0 - f),
        zeta * f + (1.0 - zeta) * f * f,
    ])


def case_genotype_probs(base: np.ndarray, model: GeneticModel,
                        beta) -> np.ndarray:
    """Tilt a control/population genotype law by the genotype odds ratios
    psi_g = exp(beta' m(g))."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    psi = np.exp(model.codes @ beta)
    w = psi * base
    return w / w.sum()


def simulate_single_snp(f: float, model: GeneticModel, beta, n_cases: int,
                        n_controls: int, rng, zeta: float = 0.0) -> CountsTable:
    """Case and control genotype counts drawn from their multinomial laws
    (controls at the population law, cases tilted by the odds ratios)."""
    if not 0.0 < f < 1.0:
        raise DegenerateFrequency("need f in (0, 1) to simulate")
    base = fixation_genotype_probs(f, zeta)
    p1 = case_genotype_probs(base, model, beta)
    return CountsTable(np.vstack([
        rng.multinomial(n_controls, base),
        rng.multinomial(n_cases, p1),
    ]))


def simulate_diplotypes(theta, zeta: float, n: int, rng) -> np.ndarray:
    """Ordered haplotype-pair draws under the fixation-index law
    P(a,b) = (1-zeta) theta_a theta_b + [a=b] zeta theta_a."""
    theta = np.asarray(theta, dtype=float)
    if not 0.0 <= zeta <= 1.0:
        raise DomainError("zeta must lie in [0, 1]")
    a = rng.choice(theta.size, size=n, p=theta)
    b = rng.choice(theta.size, size=n, p=theta)
    if zeta > 0.0:
        dup = rng.random(n) < zeta
        b = np.where(dup, a, b)
    return np.column_stack([a, b])


def simulate_haplotype_scenario(spec: ScenarioSpec, rng):
    """Accrue ``n_cases`` cases and ``n_controls`` controls with disease
    assigned by the logistic model on the untyped-locus genotype.

    Returns (GenotypeDataset over the typed loci, true untyped genotypes
    ordered cases-first to match the dataset rows).
    """
    panel = spec.gen_panel
    model = spec.model
    beta = np.atleast_1d(np.asarray(spec.beta, dtype=float))
    typed_haps = panel.haplotypes[:, panel.typed_indices].astype(np.int8)
    t_allele = panel.haplotypes[:, panel.untyped_index].astype(np.int8)

    case_rows, case_t = [], []
    ctrl_rows, ctrl_t = [], []
    n_case = n_ctrl = 0
    drawn = 0
    while n_case < spec.n_cases or n_ctrl < spec.n_controls:
        if drawn >= spec.draw_budget:
            raise SimulationStall(
                f"accrued {n_case}/{spec.n_cases} cases and "
                f"{n_ctrl}/{spec.n_controls} controls after {drawn} draws")
        m = min(_CHUNK, spec.draw_budget - drawn)
        drawn += m
        pairs = simulate_diplotypes(panel.freqs, spec.zeta, m, rng)
        g_t = t_allele[pairs[:, 0]] + t_allele[pairs[:, 1]]
        risk = expit(spec.alpha + model.codes[g_t] @ beta)
        is_case = rng.random(m) < risk
        typed = typed_haps[pairs[:, 0]] + typed_haps[pairs[:, 1]]
        if n_case < spec.n_cases:
            case_rows.append(typed[is_case])
            case_t.append(g_t[is_case])
            n_case += int(is_case.sum())
        if n_ctrl < spec.n_controls:
            ctrl_rows.append(typed[~is_case])
            ctrl_t.append(g_t[~is_case])
            n_ctrl += int((~is_case).sum())
    cases = np.concatenate(case_rows)[:spec.n_cases]
    ctrls = np.concatenate(ctrl_rows)[:spec.n_controls]
    true_t = np.concatenate([np.concatenate(case_t)[:spec.n_cases],
                             np.concatenate(ctrl_t)[:spec.n_controls]])
    genotypes = np.vstack([cases, ctrls]).astype(np.int8)
    phen = np.concatenate([np.ones(spec.n_cases, dtype=np.int8),
                           np.zeros(spec.n_controls, dtype=np.int8)])
    data = GenotypeDataset(phenotypes=phen, genotypes=genotypes,
                           locus_ids=panel.typed_locus_ids)
    return data, true_t.astype(np.int8)


def gwas_resample(control_panel: np.ndarray, locus: int, f: float,
                  model: GeneticModel, beta, n_cases: int, n_controls: int,
                  rng, locus_ids=None) -> GenotypeDataset:
    """Simulate a case-control GWAS by drawing susceptibility-locus
    genotypes from their multinomial laws and assigning each simulated
    subject the full profile of a random panel control with the same
    genotype at that locus."""
    panel = np.asarray(control_panel, dtype=np.int8)
    if panel.ndim != 2 or panel.shape[0] == 0:
        raise ContractViolation("control panel must be a nonempty matrix")
    if not 0 <= locus < panel.shape[1]:
        raise ContractViolation("locus index out of range")
    counts = simulate_single_snp(f, model, beta, n_cases, n_controls, rng)
    strata = {g: np.flatnonzero(panel[:, locus] == g) for g in (0, 1, 2)}
    rows = []
    phen = []
    for d in (1, 0):
        for g in (0, 1, 2):
            need = int(counts.n[d, g])
            if need == 0:
                continue
            donors = strata[g]
            if donors.size == 0:
                raise StratumEmpty(f"no panel control with genotype {g} "
                                   f"at locus {locus}")
            pick = donors[rng.integers(0, donors.size, size=need)]
            rows.append(panel[pick])
            phen.append(np.full(need, d, dtype=np.int8))
    genotypes = np.vstack(rows)
    if locus_ids is None:
        locus_ids = tuple(f"snp{j}" for j in range(panel.shape[1]))
    return GenotypeDataset(phenotypes=np.concatenate(phen),
                           genotypes=genotypes, locus_ids=tuple(locus_ids))


# ---------------------------------------------------------------------------
# Power / size experiments
# ---------------------------------------------------------------------------

# Registry of experiment methods.  Each entry maps to a pair of callables
# (imputed-data test, true-genotype test); the true-genotype variant runs
# the same test on point-mass posteriors.  Hotelling uses typed data only.


def _pro(posteriors, phen, model):
    return prospective_imputed_test(posteriors, phen, model)


def _retro_sandwich(posteriors, phen, model):
    return retrospective_imputed_test(posteriors, phen, model, "sandwich")


def _retro_model(posteriors, phen, model):
    return retrospective_imputed_test(posteriors, phen, model, "model_based")


POWER_METHODS = {
    "prospective": _pro,
    "retrospective": _retro_sandwich,
    "retrospective_model": _retro_model,
    "hotelling": None,
}


@dataclass(frozen=True)
class MethodPower:
    method: str
    imputed_rejections: int
    true_rejections: int | None
    imputed_failures: int
    true_failures: int
    replicates: int

    def proportion(self, which: str = "imputed") -> float:
        rej = self.imputed_rejections if which == "imputed" else self.true_rejections
        if rej is None:
            raise ContractViolation(f"no {which} arm for {self.method}")
        return rej / self.replicates

    def std_error(self, which: str = "imputed") -> float:
        p = self.proportion(which)
        return float(np.sqrt(p * (1.0 - p) / self.replicates))


@dataclass(frozen=True)
class PowerReport:
    mode: str
    beta: float
    alpha_level: float
    zeta: float
    replicates: int
    seed: int
    results: tuple

    @property
    def kind(self) -> str:
        return "size" if self.beta == 0.0 else "power"

    def __getitem__(self, method: str) -> MethodPower:
        for row in self.results:
            if row.method == method:
                return row
        raise KeyError(method)

    def to_tsv(self, path) -> None:
        with open(path, "wt", encoding="utf-8") as fh:
            fh.write("mode\tbeta\tmethod\tkind\timputed_pct\timputed_se_pct\t"
                     "true_pct\ttrue_se_pct\treplicates\tfailures\tseed\t"
                     "alpha_level\tzeta\n")
            for row in self.results:
                imp = 100.0 * row.proportion("imputed")
                imp_se = 100.0 * row.std_error("imputed")
                if row.true_rejections is None:
                    tru, tru_se = "", ""
                else:
                    tru = f"{100.0 * row.proportion('true'):.10g}"
                    tru_se = f"{100.0 * row.std_error('true'):.10g}"
                fails = row.imputed_failures + row.true_failures
                fh.write(f"{self.mode}\t{self.beta:.10g}\t{row.method}\t"
                         f"{self.kind}\t{imp:.10g}\t{imp_se:.10g}\t{tru}\t"
                         f"{tru_se}\t{row.replicates}\t{fails}\t{self.seed}\t"
                         f"{self.alpha_level:.10g}\t{self.zeta:.10g}\n")


def read_power_tsv(path) -> list:
    """Round-trip parser for ``PowerReport.to_tsv`` output."""
    out = []
    with open(path, "rt", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            if line.strip():
                out.append(dict(zip(header, line.rstrip("\n").split("\t"))))
    return out


def _run_replicate(spec: ScenarioSpec, methods, rep: int):
    rng = replicate_rng(spec.seed, rep)
    data, true_t = simulate_haplotype_scenario(spec, rng)
    model = spec.model
    posts, kept, _ = impute_posteriors(spec.ref_panel, data.genotypes)
    phen = data.phenotypes[kept]
    typed = data.genotypes[kept]
    true_posts = point_mass_posteriors(true_t[kept])
    out = {}
    for name in methods:
        if name == "hotelling":
            try:
                res = hotelling_t2_test(typed, phen)
                out[name] = (res.p_value < spec.alpha_level, False, None, False)
            except (NotTestable, DegenerateFrequency):
                out[name] = (False, True, None, False)
            continue
        fn = POWER_METHODS[name]
        try:
            imput = fn(posts, phen, model).p_value < spec.alpha_level
            ifail = False
        except (NotTestable, DegenerateFrequency):
            imput, ifail = False, True
        try:
            true = fn(true_posts, phen, model).p_value < spec.alpha_level
            tfail = False
        except (NotTestable, DegenerateFrequency):
            true, tfail = False, True
        out[name] = (imput, ifail, true, tfail)
    return out


def run_power_experiment(spec: ScenarioSpec, methods=None,
                         threads: int = 1) -> PowerReport:
    """Rejection proportions per method over seeded replicates.

    Deterministic for a given (spec, methods) regardless of ``threads``;
    per-replicate test failures are counted separately and never rejected.
    """
    if methods is None:
        methods = ("prospective", "retrospective", "hotelling")
    for name in methods:
        if name not in POWER_METHODS:
            raise DomainError(f"unknown method {name!r}; registry: "
                              f"{sorted(POWER_METHODS)}")
    reps = range(spec.replicates)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(
                lambda r: _run_replicate(spec, methods, r), reps))
    else:
        outcomes = [_run_replicate(spec, methods, r) for r in reps]

    rows = []
    for name in methods:
        imput = sum(o[name][0] for o in outcomes)
        ifail = sum(o[name][1] for o in outcomes)
        if name == "hotelling":
            rows.append(MethodPower(name, imput, None, ifail, 0,
                                    spec.replicates))
        else:
            true = sum(o[name][2] for o in outcomes)
            tfail = sum(o[name][3] for o in outcomes)
            rows.append(MethodPower(name, imput, true, ifail, tfail,
                                    spec.replicates))
    return PowerReport(spec.mode, spec.beta, spec.alpha_level, spec.zeta,
                       spec.replicates, spec.seed, tuple(rows))


# ---------------------------------------------------------------------------
# GWAS ranking experiment
# ---------------------------------------------------------------------------


def rank_experiment(n_null: int, causal_maf: float, causal_mode: str,
                    causal_beta: float, n_cases: int, n_controls: int,
                    replicates: int, seed: int,
                    maf_range=(0.05, 0.5)) -> dict:
    """Rank of one causal SNP among null SNPs under 2-df genome-scan tests.

    Null SNPs are HWE multinomial draws at uniform random MAFs; the causal
    SNP follows the tilted case law.  All SNPs are tested with the
    codominant coding by the prospective, retrospective and EB score tests;
    the causal SNP's rank is 1 + the number of null SNPs with a smaller
    p-value.  Returns per-method rank arrays and their medians.
    """
    from .snp_tests import scan_tables
    from .core import codominant

    test_model = codominant()
    gen_model = GeneticModel.from_name(causal_mode)
    ranks = {"prospective": [], "retrospective": [], "eb": []}
    for rep in range(replicates):
        rng = replicate_rng(seed, rep)
        mafs = rng.uniform(maf_range[0], maf_range[1], size=n_null)
        hwe = np.stack([(1 - mafs) ** 2, 2 * mafs * (1 - mafs),
                        mafs ** 2], axis=1)
        n0 = rng.multinomial(n_controls, hwe)
        n1 = rng.multinomial(n_cases, hwe)
        causal = simulate_single_snp(causal_maf, gen_model, causal_beta,
                                     n_cases, n_controls, rng)
        n0 = np.vstack([n0, causal.n[0]])
        n1 = np.vstack([n1, causal.n[1]])
        res = scan_tables(n0, n1, test_model)
        for name in ranks:
            p = res[name]["p"]
            causal_p = p[-1]
            nulls = p[:-1]
            if np.isnan(causal_p):
                rank = n_null + 1
            else:
                rank = 1 + int(np.sum(nulls[~np.isnan(nulls)] < causal_p))
            ranks[name].append(rank)
    out = {name: {"ranks": np.array(vals), "median": float(np.median(vals))}
           for name, vals in ranks.items()}
    return out
