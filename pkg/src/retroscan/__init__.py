"""retroscan: case-control SNP association testing and haplotype-effect
estimation with prospective, retrospective and empirical-Bayes machinery,
untyped-SNP imputation tests, and a seeded simulation harness."""

from .core import (
    CountsTable,
    GeneticModel,
    GenotypeDataset,
    TestResult,
    additive,
    c_vector,
    chisq_pvalue,
    codominant,
    dominant,
    estimate_allele_freq,
    gen_inverse,
    genotype_counts,
    hwe_expected_m,
    hwe_genotype_probs,
    pooled_moments,
    read_genotype_tsv,
    recessive,
    write_genotype_tsv,
)
from .errors import (
    ContractViolation,
    ConvergenceError,
    DegenerateFrequency,
    DomainError,
    EmptyLocus,
    InconsistentGenotype,
    NotTestable,
    RetroscanError,
    SeparationError,
    SimulationStall,
    StratumEmpty,
)
from .haplotype import (
    HaplotypeFit,
    HaplotypeLikelihood,
    RiskModelSpec,
    conditional_diplotype_prob,
    diplotype_prior,
    eb_combine,
    enumerate_diplotypes,
    fit_free,
    fit_model,
)
from .imputation import (
    GenotypePosterior,
    ReferencePanel,
    genotype_posterior,
    hotelling_t2_test,
    imputed_allele_freq,
    impute_posteriors,
    point_mass_posteriors,
    prospective_imputed_test,
    read_panel_tsv,
    retrospective_imputed_test,
    write_panel_tsv,
)
from .simulate import (
    PowerReport,
    ScenarioSpec,
    gwas_resample,
    rank_experiment,
    region_panels,
    replicate_rng,
    run_power_experiment,
    simulate_diplotypes,
    simulate_haplotype_scenario,
    simulate_single_snp,
)
from .snp_tests import (
    EBDiagnostics,
    OddsRatioFit,
    eb_score_test,
    eb_shrink_bootstrap,
    eb_shrink_estimates,
    fit_prospective_mle,
    fit_retrospective_mle,
    prospective_score_test,
    retrospective_score_test,
    scan_tables,
)

__version__ = "0.1.0"
