"""Genotype data model, HWE arithmetic and shared numeric kernels.

Conventions used throughout the package:

* genotypes are minor-allele counts in {0, 1, 2}; missing entries are
  stored as -1 (``MISSING``),
* disease status D is 0 for controls and 1 for cases,
* pooled moments use the 1/N (maximum-likelihood) denominator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from .errors import (
    ContractViolation,
    DegenerateFrequency,
    DomainError,
    EmptyLocus,
    NotTestable,
)

MISSING = -1

# Relative eigenvalue cutoff for rank decisions / generalized inverses.
_RCOND = 1e-10


# ---------------------------------------------------------------------------
# Genetic-model codings
# ---------------------------------------------------------------------------

_CODINGS = {
    "additive": np.array([[0.0], [1.0], [2.0]]),
    "dominant": np.array([[0.0], [1.0], [1.0]]),
    "recessive": np.array([[0.0], [0.0], [1.0]]),
    # (het, hom-variant) indicator pair
    "codominant": np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
}


@dataclass(frozen=True)
class GeneticModel:
    """A genotype coding m(G).

    ``codes`` has one row per genotype value 0/1/2; ``dim`` is 1 for the
    scalar codings and 2 for the codominant pair.
    """

    kind: str
    codes: np.ndarray

    @classmethod
    def from_name(cls, name: str) -> "GeneticModel":
        key = name.strip().lower()
        if key not in _CODINGS:
            raise DomainError(f"unknown genetic model {name!r}; "
                              f"expected one of {sorted(_CODINGS)}")
        return cls(key, _CODINGS[key].copy())

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def m(self, g) -> np.ndarray:
        """Coding of genotype(s) g; vectorized over arrays."""
        return self.codes[np.asarray(g, dtype=np.intp)]


def additive() -> GeneticModel:
    return GeneticModel.from_name("additive")


def dominant() -> GeneticModel:
    return GeneticModel.from_name("dominant")


def recessive() -> GeneticModel:
    return GeneticModel.from_name("recessive")


def codominant() -> GeneticModel:
    return GeneticModel.from_name("codominant")


# ---------------------------------------------------------------------------
# Datasets and count tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenotypeDataset:
    """Case-control genotypes over a set of loci.

    ``phenotypes`` is an int8 vector of 0/1 disease indicators and
    ``genotypes`` an (subjects x loci) int8 matrix with entries in
    {0, 1, 2, MISSING}.  Read-only after construction.
    """

    phenotypes: np.ndarray
    genotypes: np.ndarray
    locus_ids: tuple
    subject_ids: tuple = ()

    def __post_init__(self):
        ph = np.asarray(self.phenotypes, dtype=np.int8)
        gt = np.asarray(self.genotypes, dtype=np.int8)
        if gt.ndim != 2 or ph.ndim != 1 or gt.shape[0] != ph.shape[0]:
            raise ContractViolation("phenotype/genotype shape mismatch")
        if gt.shape[1] != len(self.locus_ids):
            raise ContractViolation("locus_ids length does not match genotypes")
        if not np.isin(ph, (0, 1)).all():
            raise ContractViolation("phenotypes must be 0/1")
        ok = np.isin(gt, (MISSING, 0, 1, 2))
        if not ok.all():
            raise ContractViolation("genotype entries must be 0/1/2 or missing")
        if (ph == 1).sum() < 1 or (ph == 0).sum() < 1:
            raise ContractViolation("need at least one case and one control")
        sid = self.subject_ids or tuple(f"s{i}" for i in range(len(ph)))
        if len(sid) != len(ph):
            raise ContractViolation("subject_ids length mismatch")
        ph.setflags(write=False)
        gt.setflags(write=False)
        object.__setattr__(self, "phenotypes", ph)
        object.__setattr__(self, "genotypes", gt)
        object.__setattr__(self, "locus_ids", tuple(self.locus_ids))
        object.__setattr__(self, "subject_ids", tuple(sid))

    @property
    def n_cases(self) -> int:
        return int((self.phenotypes == 1).sum())

    @property
    def n_controls(self) -> int:
        return int((self.phenotypes == 0).sum())

    @property
    def n_loci(self) -> int:
        return self.genotypes.shape[1]

    def locus_index(self, locus_id: str) -> int:
        try:
            return self.locus_ids.index(locus_id)
        except ValueError:
            raise EmptyLocus(f"unknown locus {locus_id!r}") from None


@dataclass(frozen=True)
class CountsTable:
    """2x3 case-control genotype counts n[d, g]."""

    n: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.n, dtype=np.int64)
        if arr.shape != (2, 3):
            raise ContractViolation("counts table must be 2x3")
        if (arr < 0).any():
            raise ContractViolation("counts must be nonnegative")
        arr.setflags(write=False)
        object.__setattr__(self, "n", arr)

    @classmethod
    def from_cells(cls, controls, cases) -> "CountsTable":
        return cls(np.array([list(controls), list(cases)]))

    @property
    def pooled(self) -> np.ndarray:
        """Marginal genotype counts n_+g."""
        return self.n.sum(axis=0)

    @property
    def n_cases(self) -> int:
        return int(self.n[1].sum())

    @property
    def n_controls(self) -> int:
        return int(self.n[0].sum())

    @property
    def total(self) -> int:
        return int(self.n.sum())


def genotype_counts(data: GenotypeDataset, locus: int) -> CountsTable:
    """Tabulate non-missing genotypes by disease status at one locus."""
    if not 0 <= locus < data.n_loci:
        raise EmptyLocus(f"locus index {locus} out of range")
    g = data.genotypes[:, locus]
    keep = g != MISSING
    if not keep.any():
        raise EmptyLocus(f"all genotypes missing at locus {data.locus_ids[locus]}")
    d = data.phenotypes[keep]
    gg = g[keep]
    n = np.zeros((2, 3), dtype=np.int64)
    np.add.at(n, (d.astype(np.intp), gg.astype(np.intp)), 1)
    return CountsTable(n)


# ---------------------------------------------------------------------------
# Allele-frequency and HWE arithmetic
# ---------------------------------------------------------------------------


def estimate_allele_freq(counts: CountsTable) -> float:
    """Pooled maximum-likelihood allele frequency (n_+1 + 2 n_+2) / (2N)."""
    pooled = counts.pooled
    total = pooled.sum()
    if total == 0:
        raise EmptyLocus("empty counts table")
    return float((pooled[1] + 2 * pooled[2]) / (2.0 * total))


def hwe_genotype_probs(f: float) -> np.ndarray:
    """((1-f)^2, 2f(1-f), f^2) for f in [0, 1]."""
    if not 0.0 <= f <= 1.0:
        raise DomainError(f"allele frequency {f} outside [0, 1]")
    return np.array([(1.0 - f) ** 2, 2.0 * f * (1.0 - f), f * f])


def hwe_expected_m(model: GeneticModel, f: float) -> np.ndarray:
    """HWE expectation of the coding: sum_g m(g) p_g(f)."""
    return hwe_genotype_probs(f) @ model.codes


def c_vector(model: GeneticModel, f: float) -> np.ndarray:
    """HWE covariance of m(G) with the allele-frequency score (G-2f)/(f(1-f)).

    Equals exactly 2 per component count for the additive coding.
    """
    if not 0.0 < f < 1.0:
        raise DegenerateFrequency(f"allele frequency {f} is degenerate")
    probs = hwe_genotype_probs(f)
    score = (np.array([0.0, 1.0, 2.0]) - 2.0 * f) / (f * (1.0 - f))
    return (probs * score) @ model.codes


# ---------------------------------------------------------------------------
# Numeric kernels
# ---------------------------------------------------------------------------


def chisq_pvalue(x: float, df: int) -> float:
    """Upper tail of the chi-squared distribution via the regularized
    incomplete gamma function."""
    if x < 0:
        raise DomainError(f"chi-squared statistic {x} is negative")
    if df < 1:
        raise DomainError(f"degrees of freedom {df} must be >= 1")
    return float(gammaincc(df / 2.0, x / 2.0))


def pooled_moments(samples: np.ndarray):
    """Mean and 1/N covariance of a sample (rows are observations)."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] == 1 and np.asarray(samples).ndim == 1:
        x = x.T
    n = x.shape[0]
    if n == 0:
        raise EmptyLocus("empty sample")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    return mean, cov


def gen_inverse(matrix: np.ndarray, rcond: float = _RCOND) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric matrix (A A- A = A)."""
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ContractViolation("gen_inverse expects a square matrix")
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    cutoff = rcond * max(np.abs(w).max(), 1e-300)
    inv_w = np.where(np.abs(w) > cutoff, 1.0 / np.where(w == 0, 1.0, w), 0.0)
    return (v * inv_w) @ v.T


def psd_project(matrix: np.ndarray):
    """Symmetrize and clip negative eigenvalues to zero.

    Returns (projected matrix, True if a meaningful projection occurred).
    """
    a = 0.5 * (np.asarray(matrix, dtype=float) + np.asarray(matrix, dtype=float).T)
    w, v = np.linalg.eigh(a)
    if w.min() >= 0:
        return a, False
    tol = _RCOND * max(np.abs(w).max(), 1e-300)
    flagged = bool(w.min() < -tol)
    w = np.clip(w, 0.0, None)
    return (v * w) @ v.T, flagged


@dataclass(frozen=True)
class TestResult:
    """Outcome of one association test."""

    statistic: float
    df: int
    p_value: float
    method: str
    nuisance: dict = field(default_factory=dict)
    flag: str = ""

    def __post_init__(self):
        if self.statistic < 0 or not 0.0 <= self.p_value <= 1.0:
            raise ContractViolation("invalid statistic or p-value")


def score_statistic(u: np.ndarray, v: np.ndarray):
    """Quadratic form u' V^- u with df = rank(V).

    V is symmetrized; negative eigenvalues are projected to zero and the
    projection reported.  Raises NotTestable when V has rank zero.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    v = 0.5 * (v + v.T)
    w, q = np.linalg.eigh(v)
    scale = max(np.abs(w).max(), 0.0)
    if scale <= 0.0:
        raise NotTestable("score variance is identically zero")
    cutoff = _RCOND * scale
    flagged = bool(w.min() < -cutoff)
    keep = w > cutoff
    if not keep.any():
        raise NotTestable("score variance has rank zero")
    proj = q[:, keep].T @ u
    stat = float(np.sum(proj * proj / w[keep]))
    df = int(keep.sum())
    return max(stat, 0.0), df, flagged


def make_test_result(u, v, method: str, nuisance: dict | None = None) -> TestResult:
    """Assemble a TestResult from a score vector and its variance."""
    stat, df, flagged = score_statistic(u, v)
    return TestResult(
        statistic=stat,
        df=df,
        p_value=chisq_pvalue(stat, df),
        method=method,
        nuisance=dict(nuisance or {}),
        flag="psd_projected" if flagged else "",
    )


# ---------------------------------------------------------------------------
# Genotype TSV format
# ---------------------------------------------------------------------------
#
# Tab-separated, one header row:  subject <tab> phenotype <tab> <locus ids...>
# Data rows: subject id, 0/1 phenotype, genotypes 0/1/2 or NA.


def read_genotype_tsv(path) -> GenotypeDataset:
    with open(path, "rt", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DomainError(f"{path}: empty file")
    header = lines[0].split("\t")
    if len(header) < 3 or header[0] != "subject" or header[1] != "phenotype":
        raise DomainError(f"{path}: line 1: header must start with "
                          "'subject\\tphenotype' followed by locus ids")
    locus_ids = tuple(header[2:])
    subjects, phen, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(header):
            raise DomainError(f"{path}: line {lineno}: expected "
                              f"{len(header)} fields, got {len(parts)}")
        subjects.append(parts[0])
        if parts[1] not in ("0", "1"):
            raise DomainError(f"{path}: line {lineno}: phenotype must be 0 or 1")
        phen.append(int(parts[1]))
        row = []
        for j, tok in enumerate(parts[2:]):
            if tok == "NA":
                row.append(MISSING)
            elif tok in ("0", "1", "2"):
                row.append(int(tok))
            else:
                raise DomainError(f"{path}: line {lineno}: bad genotype "
                                  f"{tok!r} in column {locus_ids[j]}")
        rows.append(row)
    if not rows:
        raise DomainError(f"{path}: no data rows")
    return GenotypeDataset(
        phenotypes=np.array(phen, dtype=np.int8),
        genotypes=np.array(rows, dtype=np.int8),
        locus_ids=locus_ids,
        subject_ids=tuple(subjects),
    )


def write_genotype_tsv(data: GenotypeDataset, path) -> None:
    with open(path, "wt", encoding="utf-8") as fh:
        fh.write("subject\tphenotype\t" + "\t".join(data.locus_ids) + "\n")
        for i, sid in enumerate(data.subject_ids):
            cells = ["NA" if g == MISSING else str(int(g))
                     for g in data.genotypes[i]]
            fh.write(f"{sid}\t{int(data.phenotypes[i])}\t" + "\t".join(cells) + "\n")
