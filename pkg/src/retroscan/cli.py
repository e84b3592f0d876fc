"""Command-line surface: per-SNP scans, imputed-SNP tests, haplotype fits,
dataset simulation and power experiments.

All numerics live in the library; the CLI only parses arguments, fans
per-locus work over a thread pool and serializes rows in input order, so
fixed-seed runs are byte-identical at any thread count.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import core, haplotype, imputation, simulate, snp_tests
from .errors import (
    DegenerateFrequency,
    DomainError,
    EmptyLocus,
    NotTestable,
    RetroscanError,
    SeparationError,
)

SCAN_METHODS = ("prospective", "retrospective", "eb")
IMPUTE_METHODS = ("prospective", "retrospective", "hotelling")
CODINGS = ("additive", "dominant", "recessive", "codominant")


def _threads(value: int | None) -> int:
    env = os.environ.get("RETROSCAN_THREADS")
    if env:
        return max(1, int(env))
    if value:
        return max(1, value)
    return max(1, os.cpu_count() or 1)


def _fmt(x) -> str:
    return f"{x:.10g}"


# ---------------------------------------------------------------------------
# scan
# ---------------------------------------------------------------------------


def _scan_locus(data, locus, methods, model):
    rows = []
    locus_id = data.locus_ids[locus]
    try:
        counts = core.genotype_counts(data, locus)
    except EmptyLocus:
        counts = None
    for method in methods:
        if counts is None:
            rows.append((locus_id, method, model.kind, "", "", "", "", "",
                         "empty_locus"))
            continue
        try:
            if method == "prospective":
                res = snp_tests.prospective_score_test(counts, model)
                tau = ""
            elif method == "retrospective":
                res = snp_tests.retrospective_score_test(counts, model)
                tau = ""
            else:
                res, diag = snp_tests.eb_score_test(counts, model)
                tau = ",".join(_fmt(t) for t in diag.tau_hat)
            rows.append((locus_id, method, model.kind, _fmt(res.statistic),
                         str(res.df), _fmt(res.p_value),
                         _fmt(res.nuisance.get("f_hat", float("nan"))),
                         tau, res.flag or "ok"))
        except NotTestable:
            rows.append((locus_id, method, model.kind, "", "", "", "", "",
                         "not_testable"))
        except DegenerateFrequency:
            rows.append((locus_id, method, model.kind, "", "", "", "", "",
                         "degenerate"))
        except SeparationError:
            rows.append((locus_id, method, model.kind, "", "", "", "", "",
                         "separated"))
    return rows


SCAN_HEADER = ("locus_id", "method", "coding", "statistic", "df", "p",
               "f_hat", "tau_hat", "flag")


def cmd_scan(args) -> int:
    data = core.read_genotype_tsv(args.input)
    methods = args.methods.split(",")
    for m in methods:
        if m not in SCAN_METHODS:
            raise DomainError(f"unknown method {m!r}; registry: "
                              f"{', '.join(SCAN_METHODS)}")
    model = core.GeneticModel.from_name(args.coding)
    threads = _threads(args.threads)
    loci = range(data.n_loci)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_locus = list(pool.map(
                lambda j: _scan_locus(data, j, methods, model), loci))
    else:
        per_locus = [_scan_locus(data, j, methods, model) for j in loci]
    flags = {"not_testable": 0, "degenerate": 0, "empty_locus": 0,
             "separated": 0}
    with open(args.out, "wt", encoding="utf-8") as fh:
        fh.write("\t".join(SCAN_HEADER) + "\n")
        n_rows = 0
        for rows in per_locus:
            for row in rows:
                if row[-1] in flags:
                    flags[row[-1]] += 1
                fh.write("\t".join(row) + "\n")
                n_rows += 1
    print(f"scan: {data.n_loci} loci, {n_rows} rows; "
          f"not_testable={flags['not_testable']} "
          f"degenerate={flags['degenerate']} "
          f"empty_locus={flags['empty_locus']} "
          f"separated={flags['separated']}")
    return 0


def read_scan_tsv(path) -> list:
    """Round-trip parser for scan output."""
    rows = []
    with open(path, "rt", encoding="utf-8") as fh:
        header = tuple(fh.readline().rstrip("\n").split("\t"))
        if header != SCAN_HEADER:
            raise DomainError(f"{path}: unexpected scan header")
        for line in fh:
            if line.strip():
                rows.append(dict(zip(header, line.rstrip("\n").split("\t"))))
    return rows


# ---------------------------------------------------------------------------
# impute-test
# ---------------------------------------------------------------------------


def cmd_impute_test(args) -> int:
    data = core.read_genotype_tsv(args.input)
    panel = imputation.read_panel_tsv(args.panel)
    methods = args.methods.split(",")
    for m in methods:
        if m not in IMPUTE_METHODS:
            raise DomainError(f"unknown method {m!r}; registry: "
                              f"{', '.join(IMPUTE_METHODS)}")
    model = core.GeneticModel.from_name(args.coding)
    order = [data.locus_index(name) for name in panel.typed_locus_ids]
    typed = data.genotypes[:, order]
    if (typed == core.MISSING).any():
        raise DomainError("imputed-SNP tests need complete typed genotypes")
    posts, kept, n_excl = imputation.impute_posteriors(panel, typed)
    phen = data.phenotypes[kept]
    rows = []
    for method in methods:
        try:
            if method == "prospective":
                res = imputation.prospective_imputed_test(posts, phen, model)
            elif method == "retrospective":
                res = imputation.retrospective_imputed_test(
                    posts, phen, model, args.variance)
            else:
                res = imputation.hotelling_t2_test(typed[kept], phen)
            rows.append((method, model.kind, _fmt(res.statistic), str(res.df),
                         _fmt(res.p_value),
                         _fmt(res.nuisance.get("f_hat", float("nan"))),
                         str(n_excl), res.flag or "ok"))
        except (NotTestable, DegenerateFrequency) as exc:
            rows.append((method, model.kind, "", "", "", "", str(n_excl),
                         type(exc).__name__))
    with open(args.out, "wt", encoding="utf-8") as fh:
        fh.write("method\tcoding\tstatistic\tdf\tp\tf_hat\tn_excluded\tflag\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")
    print(f"impute-test: untyped locus {panel.untyped_locus_id}, "
          f"{len(rows)} rows, excluded={n_excl}")
    return 0


# ---------------------------------------------------------------------------
# haplo
# ---------------------------------------------------------------------------


def cmd_haplo(args) -> int:
    env_col = args.env_col
    data, env = _read_with_env(args.input, env_col)
    target = tuple(int(c) for c in args.target.replace(",", ""))
    if len(target) != data.n_loci:
        raise DomainError(f"target length {len(target)} does not match "
                          f"{data.n_loci} loci")
    spec = haplotype.RiskModelSpec(target=target, mode=args.mode,
                                   env=env is not None,
                                   interaction=args.interaction)
    complete = ~(data.genotypes == core.MISSING).any(axis=1)
    n_dropped = int((~complete).sum())
    if n_dropped:
        print(f"haplo: dropped {n_dropped} subjects with missing genotypes",
              file=sys.stderr)
    g = data.genotypes[complete]
    d = data.phenotypes[complete]
    e = None if env is None else env[complete]
    free = haplotype.fit_free(g, d, spec, env=e)
    model = haplotype.fit_model(g, d, spec, env=e)
    fits = [free, model]
    if args.eb:
        if args.boot:
            v = haplotype.eb_bootstrap_difference_cov(
                g, d, spec, env=e, n_boot=args.boot, rng=args.seed)
            fits.append(haplotype.eb_combine(free, model, v=v))
        else:
            fits.append(haplotype.eb_combine(free, model))
    haplotype.write_fit_report(fits, args.out)
    for fit in fits:
        est = ", ".join(f"{n}={b:.4g}" for n, b in zip(fit.beta_names, fit.beta))
        print(f"haplo[{fit.method}]: {est} (loglik={fit.loglik:.6g}, "
              f"converged={fit.converged})")
    return 0


def _read_with_env(path, env_col):
    if env_col is None:
        return core.read_genotype_tsv(path), None
    with open(path, "rt", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split("\t")
    if env_col not in header[2:]:
        raise DomainError(f"{path}: no column named {env_col!r}")
    keep = [j for j, name in enumerate(header) if name != env_col]
    env_idx = header.index(env_col)
    import tempfile

    env_vals = []
    with tempfile.NamedTemporaryFile("wt", suffix=".tsv", delete=False,
                                     encoding="utf-8") as tmp:
        tmp.write("\t".join(header[j] for j in keep) + "\n")
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != len(header):
                raise DomainError(f"{path}: line {lineno}: expected "
                                  f"{len(header)} fields, got {len(parts)}")
            try:
                env_vals.append(float(parts[env_idx]))
            except ValueError:
                raise DomainError(f"{path}: line {lineno}: bad environment "
                                  f"value {parts[env_idx]!r}") from None
            tmp.write("\t".join(parts[j] for j in keep) + "\n")
        tmp_path = tmp.name
    try:
        data = core.read_genotype_tsv(tmp_path)
    finally:
        os.unlink(tmp_path)
    return data, np.array(env_vals)


# ---------------------------------------------------------------------------
# simulate / power
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    spec = simulate.ScenarioSpec.from_config(args.config)
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, seed=args.seed)
    rng = simulate.replicate_rng(spec.seed, 0)
    data, true_t = simulate.simulate_haplotype_scenario(spec, rng)
    core.write_genotype_tsv(data, args.out)
    if args.emit_truth:
        truth_path = args.out + ".truth.tsv"
        with open(truth_path, "wt", encoding="utf-8") as fh:
            fh.write(f"subject\t{spec.gen_panel.untyped_locus_id}\n")
            for sid, g in zip(data.subject_ids, true_t):
                fh.write(f"{sid}\t{int(g)}\n")
        print(f"simulate: wrote {args.out} and {truth_path}")
    else:
        print(f"simulate: wrote {args.out}")
    return 0


def cmd_power(args) -> int:
    spec = simulate.ScenarioSpec.from_config(args.config)
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, seed=args.seed)
    methods = tuple(args.methods.split(","))
    report = simulate.run_power_experiment(spec, methods,
                                           threads=_threads(args.threads))
    report.to_tsv(args.out)
    for row in report.results:
        imp = 100.0 * row.proportion("imputed")
        if row.true_rejections is None:
            print(f"power[{row.method}]: {imp:.1f}%")
        else:
            print(f"power[{row.method}]: imputed {imp:.1f}% "
                  f"(true {100.0 * row.proportion('true'):.1f}%)")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retroscan",
        description="Case-control SNP association tests (prospective, "
                    "retrospective, empirical-Bayes), imputed-SNP tests, "
                    "haplotype-effect fits and power simulations.")
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="per-SNP score tests over a genotype file")
    scan.add_argument("--input", required=True)
    scan.add_argument("--methods", default="prospective,retrospective,eb")
    scan.add_argument("--coding", default="codominant", choices=CODINGS)
    scan.add_argument("--out", required=True)
    scan.add_argument("--threads", type=int, default=0)
    scan.set_defaults(func=cmd_scan)

    imp = sub.add_parser("impute-test", help="untyped-SNP tests via a reference panel")
    imp.add_argument("--input", required=True)
    imp.add_argument("--panel", required=True)
    imp.add_argument("--methods", default="prospective,retrospective,hotelling")
    imp.add_argument("--coding", default="additive", choices=CODINGS)
    imp.add_argument("--variance", default="sandwich",
                     choices=("sandwich", "model_based"))
    imp.add_argument("--out", required=True)
    imp.set_defaults(func=cmd_impute_test)

    hap = sub.add_parser("haplo", help="haplotype-effect fits (free/model/EB)")
    hap.add_argument("--input", required=True)
    hap.add_argument("--target", required=True,
                     help="target haplotype alleles, e.g. 0110 or 0,1,1,0")
    hap.add_argument("--mode", default="additive",
                     choices=("additive", "dominant", "recessive"))
    hap.add_argument("--env-col", default=None)
    hap.add_argument("--interaction", action="store_true")
    hap.add_argument("--eb", action="store_true")
    hap.add_argument("--boot", type=int, default=0,
                     help="bootstrap replicates for the EB difference variance")
    hap.add_argument("--seed", type=int, default=0)
    hap.add_argument("--out", required=True)
    hap.set_defaults(func=cmd_haplo)

    sim = sub.add_parser("simulate", help="generate one dataset from a config")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--emit-truth", action="store_true")
    sim.add_argument("--seed", type=int, default=None)
    sim.set_defaults(func=cmd_simulate)

    pow_ = sub.add_parser("power", help="power/size experiment from a config")
    pow_.add_argument("--config", required=True)
    pow_.add_argument("--methods", default="prospective,retrospective,hotelling")
    pow_.add_argument("--out", required=True)
    pow_.add_argument("--threads", type=int, default=0)
    pow_.add_argument("--seed", type=int, default=None)
    pow_.set_defaults(func=cmd_power)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RetroscanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
