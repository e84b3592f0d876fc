"""Shared independent oracles.

Everything here is deliberately written in plain Python (dict loops,
itertools) so it shares no code path with the library implementations it
checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest


@pytest.fixture(scope="session")
def rng_factory():
    def make(seed):
        return np.random.default_rng(seed)
    return make


def tally_counts_oracle(phenotypes, genotypes):
    """Hand tally of a 2x3 table, skipping missing (-1) entries."""
    table = {(d, g): 0 for d in (0, 1) for g in (0, 1, 2)}
    for d, g in zip(phenotypes, genotypes):
        if g != -1:
            table[(int(d), int(g))] += 1
    return table


def brute_posterior_oracle(haplotypes, freqs, untyped_index, typed_genotype):
    """Exhaustive ordered-pair enumeration of the untyped-genotype
    posterior, written with explicit loops."""
    haps = [list(row) for row in haplotypes]
    typed_cols = [j for j in range(len(haps[0])) if j != untyped_index]
    probs = [0.0, 0.0, 0.0]
    total = 0.0
    for a, b in itertools.product(range(len(haps)), repeat=2):
        consistent = all(
            haps[a][c] + haps[b][c] == typed_genotype[k]
            for k, c in enumerate(typed_cols))
        if not consistent:
            continue
        w = freqs[a] * freqs[b]
        t = haps[a][untyped_index] + haps[b][untyped_index]
        probs[t] += w
        total += w
    if total == 0.0:
        return None
    return [p / total for p in probs]


def irls_logistic_oracle(x, y, max_iter=200, tol=1e-12):
    """Plain IRLS logistic regression (intercept prepended)."""
    x = np.column_stack([np.ones(len(y)), np.asarray(x, dtype=float)])
    y = np.asarray(y, dtype=float)
    beta = np.zeros(x.shape[1])
    for _ in range(max_iter):
        eta = x @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = mu * (1.0 - mu)
        grad = x.T @ (y - mu)
        hess = (x * w[:, None]).T @ x
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def em_haplotype_oracle(genotype_rows, n_loci, tol=1e-12, max_iter=20000):
    """Textbook HWE haplotype-frequency EM over all 2^L haplotypes,
    written with dict loops."""
    all_haps = list(itertools.product((0, 1), repeat=n_loci))
    theta = {h: 1.0 / len(all_haps) for h in all_haps}
    rows = [tuple(int(g) for g in row) for row in genotype_rows]

    def consistent_pairs(row):
        het = [j for j, g in enumerate(row) if g == 1]
        base = [1 if g == 2 else 0 for g in row]
        pairs = []
        for bits in itertools.product((0, 1), repeat=len(het)):
            ha = list(base)
            hb = list(base)
            for j, bit in zip(het, bits):
                ha[j] = bit
                hb[j] = 1 - bit
            pairs.append((tuple(ha), tuple(hb)))
        return pairs

    pair_cache = {row: consistent_pairs(row) for row in set(rows)}
    for _ in range(max_iter):
        counts = {h: 0.0 for h in all_haps}
        for row in rows:
            weights = []
            for ha, hb in pair_cache[row]:
                weights.append(theta[ha] * theta[hb])
            z = sum(weights)
            if z == 0.0:
                continue
            for (ha, hb), w in zip(pair_cache[row], weights):
                counts[ha] += w / z
                counts[hb] += w / z
        total = sum(counts.values())
        new = {h: c / total for h, c in counts.items()}
        delta = max(abs(new[h] - theta[h]) for h in all_haps)
        theta = new
        if delta < tol:
            break
    return theta


def chisq_tail_oracle(x, df):
    """Chi-squared upper tail via erfc (df=1), exp (df=2) or series."""
    if df == 1:
        return math.erfc(math.sqrt(x / 2.0))
    if df == 2:
        return math.exp(-x / 2.0)
    raise NotImplementedError
