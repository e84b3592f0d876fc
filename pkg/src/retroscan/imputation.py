"""Reference-panel genotype posteriors for an untyped SNP and the
imputed-SNP score tests, plus the multimarker Hotelling's T2 baseline.

The posterior for a subject's untyped genotype enumerates every ordered
haplotype pair of the panel that reproduces the typed genotypes, weights
pairs by the HWE product of panel frequencies, and marginalizes the allele
count at the untyped locus.  The imputed tests are the typed-SNP score
tests with m(G) replaced by its posterior expectation; when every posterior
is a point mass they reduce to the typed tests exactly.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    GeneticModel,
    TestResult,
    c_vector,
    hwe_expected_m,
    make_test_result,
)
from .errors import (
    ContractViolation,
    DegenerateFrequency,
    DomainError,
    InconsistentGenotype,
    NotTestable,
)

# When enabled, the model-based retrospective variance is cross-checked
# against the sandwich estimator on every call (the model-based display has
# unusual sign structure; the runtime check guards transcription slips).
_DEBUG_CROSSCHECK = bool(os.environ.get("RETROSCAN_DEBUG"))


@dataclass(frozen=True)
class ReferencePanel:
    """Haplotypes over typed loci plus one designated untyped locus.

    ``haplotypes`` is an (H, L) 0/1 matrix, ``freqs`` the population
    frequency of each haplotype (a probability vector), ``untyped_index``
    the column of the untyped locus.
    """

    locus_ids: tuple
    haplotypes: np.ndarray
    freqs: np.ndarray
    untyped_index: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        haps = np.asarray(self.haplotypes, dtype=np.int8)
        freqs = np.asarray(self.freqs, dtype=float)
        if haps.ndim != 2 or haps.shape[0] != freqs.shape[0]:
            raise ContractViolation("haplotype/frequency shape mismatch")
        if haps.shape[1] != len(self.locus_ids):
            raise ContractViolation("locus_ids length mismatch")
        if not np.isin(haps, (0, 1)).all():
            raise ContractViolation("haplotype alleles must be 0/1")
        if (freqs < 0).any():
            raise ContractViolation("haplotype frequencies must be >= 0")
        total = freqs.sum()
        if not np.isclose(total, 1.0, atol=1e-6):
            raise ContractViolation(f"haplotype frequencies sum to {total}, not 1")
        if not 0 <= self.untyped_index < haps.shape[1]:
            raise ContractViolation("untyped locus index out of range")
        freqs = freqs / total
        haps.setflags(write=False)
        freqs.setflags(write=False)
        object.__setattr__(self, "locus_ids", tuple(self.locus_ids))
        object.__setattr__(self, "haplotypes", haps)
        object.__setattr__(self, "freqs", freqs)

    @property
    def typed_indices(self) -> tuple:
        return tuple(j for j in range(len(self.locus_ids))
                     if j != self.untyped_index)

    @property
    def typed_locus_ids(self) -> tuple:
        return tuple(self.locus_ids[j] for j in self.typed_indices)

    @property
    def untyped_locus_id(self) -> str:
        return self.locus_ids[self.untyped_index]

    def allele_freq(self, locus_index: int) -> float:
        """Population frequency of allele 1 at a locus under the panel."""
        return float(self.freqs @ self.haplotypes[:, locus_index])

    def flip_allele(self, locus_index: int) -> "ReferencePanel":
        """Panel with the 0/1 allele labels complemented at one locus."""
        haps = self.haplotypes.copy()
        haps[:, locus_index] = 1 - haps[:, locus_index]
        return ReferencePanel(self.locus_ids, haps, self.freqs.copy(),
                              self.untyped_index)

    def with_freqs(self, freqs) -> "ReferencePanel":
        return ReferencePanel(self.locus_ids, self.haplotypes.copy(),
                              np.asarray(freqs, dtype=float),
                              self.untyped_index)


@dataclass(frozen=True)
class GenotypePosterior:
    """P(G = 0/1/2 | typed genotypes) for the untyped locus."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (3,) or (p < -1e-12).any() or abs(p.sum() - 1.0) > 1e-10:
            raise ContractViolation("posterior must be a length-3 probability vector")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def e_g(self) -> float:
        """Posterior expected allele count."""
        return float(self.probs[1] + 2.0 * self.probs[2])

    def expected_m(self, model: GeneticModel) -> np.ndarray:
        """Posterior expectation of the coding m(G)."""
        return self.probs @ model.codes


def genotype_posterior(panel: ReferencePanel,
                       typed_genotypes) -> GenotypePosterior:
    """Posterior allele-count distribution at the untyped locus given the
    typed genotypes, by exhaustive ordered-diplotype enumeration."""
    g = np.asarray(typed_genotypes, dtype=np.int8)
    if g.shape != (len(panel.typed_indices),):
        raise ContractViolation("typed genotype vector has wrong length")
    if not np.isin(g, (0, 1, 2)).all():
        raise DomainError("typed genotypes must be 0/1/2 (no missing)")
    key = g.tobytes()
    cached = panel._cache.get(key)
    if cached is not None:
        return cached
    typed = panel.haplotypes[:, panel.typed_indices].astype(np.int16)
    t_allele = panel.haplotypes[:, panel.untyped_index].astype(np.int16)
    sums = typed[:, None, :] + typed[None, :, :]
    match = (sums == g[None, None, :]).all(axis=2)
    weights = panel.freqs[:, None] * panel.freqs[None, :]
    t_count = t_allele[:, None] + t_allele[None, :]
    total = float(weights[match].sum())
    if total <= 0.0:
        raise InconsistentGenotype(
            "typed genotypes are outside the span of the panel")
    probs = np.array([float(weights[match & (t_count == c)].sum())
                      for c in (0, 1, 2)]) / total
    post = GenotypePosterior(probs)
    panel._cache[key] = post
    return post


def impute_posteriors(panel: ReferencePanel, typed_matrix: np.ndarray):
    """Posterior probability rows for a matrix of typed genotypes.

    Returns (probs (n_kept, 3), kept mask (n,), n_excluded).  Subjects whose
    typed genotypes no panel diplotype can produce are excluded with a
    warning, since the tests assume panel-consistent data.
    """
    typed = np.asarray(typed_matrix)
    if typed.ndim != 2 or typed.shape[1] != len(panel.typed_indices):
        raise ContractViolation("typed matrix has wrong number of columns")
    uniq, inverse = np.unique(typed, axis=0, return_inverse=True)
    table = np.empty((uniq.shape[0], 3))
    ok = np.ones(uniq.shape[0], dtype=bool)
    for i, row in enumerate(uniq):
        try:
            table[i] = genotype_posterior(panel, row).probs
        except InconsistentGenotype:
            ok[i] = False
            table[i] = np.nan
    kept = ok[inverse]
    n_excluded = int((~kept).sum())
    if n_excluded:
        warnings.warn(f"excluded {n_excluded} subjects with panel-"
                      "inconsistent typed genotypes", stacklevel=2)
    return table[inverse][kept], kept, n_excluded


def point_mass_posteriors(genotypes) -> np.ndarray:
    """Degenerate posterior rows for fully observed genotypes (the imputed
    tests then coincide with their typed-SNP counterparts exactly)."""
    g = np.asarray(genotypes, dtype=np.intp)
    probs = np.zeros((g.size, 3))
    probs[np.arange(g.size), g] = 1.0
    return probs


def imputed_allele_freq(posteriors: np.ndarray) -> float:
    """Imputation-based pooled allele-frequency estimate."""
    probs = np.atleast_2d(np.asarray(posteriors, dtype=float))
    if probs.shape[0] == 0:
        raise NotTestable("no posteriors supplied")
    e_g = probs[:, 1] + 2.0 * probs[:, 2]
    return float(e_g.mean() / 2.0)


def _split(posteriors, phenotypes):
    probs = np.atleast_2d(np.asarray(posteriors, dtype=float))
    d = np.asarray(phenotypes, dtype=np.int8)
    if probs.shape[0] != d.shape[0]:
        raise ContractViolation("posterior/phenotype length mismatch")
    n1 = int((d == 1).sum())
    n0 = int((d == 0).sum())
    if n1 < 1 or n0 < 1:
        raise NotTestable("need at least one case and one control")
    return probs, d, n1, n0


def prospective_imputed_test(posteriors, phenotypes,
                             model: GeneticModel) -> TestResult:
    """Prospective score test on posterior expectations of m(G)."""
    probs, d, n1, n0 = _split(posteriors, phenotypes)
    n = n1 + n0
    e_m = probs @ model.codes
    u = (n1 * n0 / n) * (e_m[d == 1].mean(axis=0) - e_m[d == 0].mean(axis=0))
    centered = e_m - e_m.mean(axis=0)
    v = (n1 * n0 / n) * (centered.T @ centered / n)
    f_hat = imputed_allele_freq(probs)
    return make_test_result(u, v, "prospective_imputed", {"f_hat": f_hat})


def retrospective_imputed_test(posteriors, phenotypes, model: GeneticModel,
                               variance: str = "sandwich") -> TestResult:
    """Retrospective score test on posterior expectations of m(G).

    ``variance`` selects the robust per-subject sandwich (default, as used
    for the power tables) or the model-based display with the pooled
    covariance Q between E{m(G)|typed} and E{G|typed}.
    """
    if variance not in ("sandwich", "model_based"):
        raise ContractViolation(f"unknown variance kind {variance!r}")
    probs, d, n1, n0 = _split(posteriors, phenotypes)
    n = n1 + n0
    e_m = probs @ model.codes
    e_g = probs[:, 1] + 2.0 * probs[:, 2]
    f_hat = float(e_g.mean() / 2.0)
    if not 0.0 < f_hat < 1.0:
        raise DegenerateFrequency(f"imputed frequency {f_hat} is degenerate")
    e_hwe = hwe_expected_m(model, f_hat)
    c = c_vector(model, f_hat)
    u = (e_m[d == 1] - e_hwe).sum(axis=0)
    ratio = n1 / (2.0 * n)

    def sandwich_v():
        tilde = (d[:, None] * (e_m - e_hwe)
                 - ratio * np.outer(e_g - 2.0 * f_hat, c))
        return tilde.T @ tilde

    def model_based_v():
        cm = e_m - e_m.mean(axis=0)
        cov_m = cm.T @ cm / n
        dg = e_g - e_g.mean()
        var_g = float(dg @ dg / n)
        q = cm.T @ dg / n
        cc = np.outer(c, c)
        qc = np.outer(q, c)
        return n1 * (cov_m + ratio * (0.5 * var_g * cc - qc - qc.T))

    v = sandwich_v() if variance == "sandwich" else model_based_v()
    result = make_test_result(u, v, f"retrospective_imputed_{variance}",
                              {"f_hat": f_hat})
    if _DEBUG_CROSSCHECK and variance == "model_based":
        alt = make_test_result(u, sandwich_v(),
                               "retrospective_imputed_sandwich", {})
        denom = max(result.statistic, alt.statistic, 1e-12)
        if abs(result.statistic - alt.statistic) / denom > 0.5:
            warnings.warn(
                "model-based and sandwich retrospective variances disagree: "
                f"{result.statistic:.4g} vs {alt.statistic:.4g}", stacklevel=2)
    return result


def hotelling_t2_test(typed_matrix, phenotypes) -> TestResult:
    """Multimarker prospective score test on the vector of typed-locus
    allele counts (rank-adjusted degrees of freedom)."""
    g = np.atleast_2d(np.asarray(typed_matrix, dtype=float))
    d = np.asarray(phenotypes, dtype=np.int8)
    if g.shape[0] != d.shape[0]:
        raise ContractViolation("genotype/phenotype length mismatch")
    n1 = int((d == 1).sum())
    n0 = int((d == 0).sum())
    if n1 < 2 or n0 < 2:
        raise NotTestable("need at least two subjects per group")
    n = n1 + n0
    u = (n1 * n0 / n) * (g[d == 1].mean(axis=0) - g[d == 0].mean(axis=0))
    centered = g - g.mean(axis=0)
    v = (n1 * n0 / n) * (centered.T @ centered / n)
    return make_test_result(u, v, "hotelling_t2", {})


# ---------------------------------------------------------------------------
# Panel TSV format
# ---------------------------------------------------------------------------
#
# Header: locus ids (the untyped locus carries a '*' suffix) then 'freq'.
# One row per haplotype: 0/1 alleles then the population frequency.


def read_panel_tsv(path) -> ReferencePanel:
    with open(path, "rt", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DomainError(f"{path}: empty panel file")
    header = lines[0].split("\t")
    if header[-1] != "freq":
        raise DomainError(f"{path}: line 1: last column must be 'freq'")
    locus_ids = []
    untyped = None
    for j, name in enumerate(header[:-1]):
        if name.endswith("*"):
            if untyped is not None:
                raise DomainError(f"{path}: line 1: more than one untyped locus")
            untyped = j
            name = name[:-1]
        locus_ids.append(name)
    if untyped is None:
        raise DomainError(f"{path}: line 1: no untyped locus marked with '*'")
    haps, freqs = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise DomainError(f"{path}: line {lineno}: expected "
                              f"{len(header)} fields, got {len(parts)}")
        try:
            haps.append([int(tok) for tok in parts[:-1]])
            freqs.append(float(parts[-1]))
        except ValueError as exc:
            raise DomainError(f"{path}: line {lineno}: {exc}") from None
    return ReferencePanel(tuple(locus_ids), np.array(haps, dtype=np.int8),
                          np.array(freqs), untyped)


def write_panel_tsv(panel: ReferencePanel, path) -> None:
    with open(path, "wt", encoding="utf-8") as fh:
        names = [name + ("*" if j == panel.untyped_index else "")
                 for j, name in enumerate(panel.locus_ids)]
        fh.write("\t".join(names) + "\tfreq\n")
        for row, freq in zip(panel.haplotypes, panel.freqs):
            fh.write("\t".join(str(int(a)) for a in row) + f"\t{freq:.10g}\n")
