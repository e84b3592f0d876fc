import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import chisquare

from retroscan import core, simulate
from retroscan.core import GeneticModel, additive, recessive
from retroscan.errors import (
    ContractViolation,
    DomainError,
    SimulationStall,
    StratumEmpty,
)
from retroscan.imputation import genotype_posterior, point_mass_posteriors
from retroscan.simulate import (
    ScenarioSpec,
    case_genotype_probs,
    fixation_genotype_probs,
    gwas_resample,
    rank_experiment,
    region_panels,
    replicate_rng,
    run_power_experiment,
    simulate_diplotypes,
    simulate_haplotype_scenario,
    simulate_single_snp,
)


class TestSingleSnp:
    def test_null_shares_control_law(self):
        base = fixation_genotype_probs(0.3, 0.0)
        p1 = case_genotype_probs(base, additive(), 0.0)
        assert p1 == pytest.approx(base, abs=1e-15)

    def test_recessive_case_probability_hand_value(self):
        # f=0.4, psi2=3: P(G=2 | case) = 3 f^2 / (1 - f^2 + 3 f^2)
        base = fixation_genotype_probs(0.4, 0.0)
        p1 = case_genotype_probs(base, recessive(), np.log(3.0))
        assert p1[2] == pytest.approx(0.48 / 1.32, abs=1e-12)

    def test_empirical_cells_match_targets(self):
        rng = np.random.default_rng(100)
        counts = simulate_single_snp(0.4, recessive(), np.log(3.0),
                                     100000, 100000, rng)
        base = fixation_genotype_probs(0.4, 0.0)
        p1 = case_genotype_probs(base, recessive(), np.log(3.0))
        for g in range(3):
            for probs, row in ((base, counts.n[0]), (p1, counts.n[1])):
                se = np.sqrt(probs[g] * (1 - probs[g]) / 100000)
                assert abs(row[g] / 100000 - probs[g]) < 3.5 * se


class TestDiplotypes:
    def test_zeta_zero_product_law(self):
        rng = np.random.default_rng(5)
        theta = np.array([0.5, 0.3, 0.2])
        pairs = simulate_diplotypes(theta, 0.0, 100000, rng)
        joint = np.zeros((3, 3))
        np.add.at(joint, (pairs[:, 0], pairs[:, 1]), 1)
        expect = np.outer(theta, theta) * 100000
        stat, p = chisquare(joint.ravel(), expect.ravel())
        assert p > 0.001

    def test_law_sums_to_one(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            theta = rng.dirichlet(np.ones(rng.integers(2, 6)))
            zeta = rng.uniform(0, 1)
            k = theta.size
            law = (1 - zeta) * np.outer(theta, theta) \
                + zeta * np.diag(theta)
            assert law.sum() == pytest.approx(1.0, abs=1e-12)

    def test_zeta_one_only_homozygotes(self):
        rng = np.random.default_rng(7)
        pairs = simulate_diplotypes(np.array([0.6, 0.4]), 1.0, 5000, rng)
        assert (pairs[:, 0] == pairs[:, 1]).all()

    def test_fixation_law_goodness_of_fit(self):
        rng = np.random.default_rng(8)
        theta = rng.dirichlet((3, 2, 1))
        zeta = 0.37
        pairs = simulate_diplotypes(theta, zeta, 100000, rng)
        joint = np.zeros((3, 3))
        np.add.at(joint, (pairs[:, 0], pairs[:, 1]), 1)
        law = (1 - zeta) * np.outer(theta, theta) + zeta * np.diag(theta)
        stat, p = chisquare(joint.ravel(), law.ravel() * 100000)
        assert p > 0.001


class TestScenario:
    def test_disease_rate_near_five_percent(self):
        gen, _ = region_panels(1)
        rng = np.random.default_rng(9)
        pairs = simulate_diplotypes(gen.freqs, 0.0, 200000, rng)
        rate = (rng.random(200000) < expit(-3.0)).mean()
        se = np.sqrt(expit(-3.0) * (1 - expit(-3.0)) / 200000)
        assert abs(rate - expit(-3.0)) < 4 * se

    def test_region1_posteriors_are_point_masses(self):
        spec = ScenarioSpec.for_region(1, "recessive", 0.6, n_cases=150,
                                       n_controls=150, replicates=1, seed=3)
        rng = replicate_rng(spec.seed, 0)
        data, true_t = simulate_haplotype_scenario(spec, rng)
        for row, t in zip(data.genotypes, true_t):
            post = genotype_posterior(spec.ref_panel, row)
            assert post.probs[t] == pytest.approx(1.0, abs=1e-12)

    def test_generating_and_reference_frequencies_differ(self):
        for region in (1, 2):
            gen, ref = region_panels(region)
            assert not np.allclose(gen.freqs, ref.freqs)
            assert np.array_equal(gen.haplotypes, ref.haplotypes)

    def test_region1_untyped_recode_to_minor_allele(self):
        gen, ref = region_panels(1)
        assert ref.allele_freq(ref.untyped_index) < 0.5
        assert gen.allele_freq(gen.untyped_index) == pytest.approx(0.158)

    def test_accrual_counts_and_order(self):
        spec = ScenarioSpec.for_region(2, "additive", 0.3, n_cases=120,
                                       n_controls=80, replicates=1, seed=11)
        data, true_t = simulate_haplotype_scenario(spec,
                                                   replicate_rng(11, 0))
        assert data.n_cases == 120
        assert data.n_controls == 80
        assert (data.phenotypes[:120] == 1).all()
        assert true_t.shape == (200,)

    def test_stall_on_impossible_accrual(self):
        spec = ScenarioSpec.for_region(1, "additive", 0.0, n_cases=1000,
                                       n_controls=10, replicates=1, seed=1,
                                       alpha=-14.0)
        object.__setattr__(spec, "draw_budget", 50000)
        with pytest.raises(SimulationStall):
            simulate_haplotype_scenario(spec, replicate_rng(1, 0))

    def test_seed_determinism(self):
        spec = ScenarioSpec.for_region(2, "recessive", 0.5, n_cases=100,
                                       n_controls=100, replicates=1, seed=21)
        d1, t1 = simulate_haplotype_scenario(spec, replicate_rng(21, 0))
        d2, t2 = simulate_haplotype_scenario(spec, replicate_rng(21, 0))
        assert np.array_equal(d1.genotypes, d2.genotypes)
        assert np.array_equal(t1, t2)


class TestGwasResample:
    def _panel(self, rng, n=60, s=5, locus=2):
        panel = rng.choice(3, size=(n, s), p=(0.5, 0.3, 0.2))
        # ensure every genotype class present at the susceptibility locus
        panel[0, locus], panel[1, locus], panel[2, locus] = 0, 1, 2
        return panel

    def test_profiles_copied_from_panel(self):
        rng = np.random.default_rng(31)
        panel = self._panel(rng)
        data = gwas_resample(panel, 2, 0.3, recessive(), np.log(3.0),
                             40, 40, rng)
        panel_rows = {tuple(r) for r in panel}
        for row in data.genotypes:
            assert tuple(row) in panel_rows

    def test_single_donor_per_class_deterministic(self):
        rng = np.random.default_rng(32)
        panel = np.array([[0, 0, 1], [1, 2, 0], [2, 1, 1]], dtype=np.int8)
        data = gwas_resample(panel, 0, 0.4, additive(), 0.0, 30, 30, rng)
        for row in data.genotypes:
            assert tuple(row) in {(0, 0, 1), (1, 2, 0), (2, 1, 1)}
            # profile matches the unique donor with that locus genotype
            donor = panel[panel[:, 0] == row[0]][0]
            assert np.array_equal(row, donor)

    def test_marginal_locus_law_matches_target(self):
        rng = np.random.default_rng(33)
        panel = self._panel(rng, n=200)
        base = fixation_genotype_probs(0.3, 0.0)
        p1 = case_genotype_probs(base, recessive(), np.log(3.0))
        tot = np.zeros(3)
        reps = 400
        for _ in range(reps):
            data = gwas_resample(panel, 2, 0.3, recessive(), np.log(3.0),
                                 25, 25, rng)
            g = data.genotypes[data.phenotypes == 1, 2]
            tot += np.bincount(g, minlength=3)
        n = reps * 25
        stat, p = chisquare(tot, p1 * n)
        assert p > 0.001

    def test_stratum_empty(self):
        rng = np.random.default_rng(34)
        panel = np.zeros((10, 3), dtype=np.int8)   # no G=1 or G=2 donors
        with pytest.raises(StratumEmpty):
            gwas_resample(panel, 0, 0.5, additive(), 0.5, 50, 50, rng)

    def test_stratum_donor_uniformity(self):
        # within a stratum, donors are drawn uniformly with replacement
        rng = np.random.default_rng(35)
        zero_stratum = np.array([[0, k % 3, (k // 3) % 3, k // 9]
                                 for k in range(12)], dtype=np.int8)
        others = np.array([[1, 0, 0, 0], [2, 0, 0, 0]], dtype=np.int8)
        panel = np.vstack([zero_stratum, others])
        picks = np.zeros(12)
        for _ in range(300):
            data = gwas_resample(panel, 0, 0.4, additive(), 0.0, 12, 12, rng)
            for row in data.genotypes:
                if row[0] != 0:
                    continue
                match = np.flatnonzero((zero_stratum == row).all(axis=1))
                picks[match[0]] += 1
        stat, p = chisquare(picks)
        assert p > 0.001


class TestPowerExperiment:
    def test_determinism_and_threads(self):
        spec = ScenarioSpec.for_region(1, "recessive", 0.6, n_cases=120,
                                       n_controls=120, replicates=30, seed=77)
        r1 = run_power_experiment(spec, ("prospective", "retrospective",
                                         "hotelling"))
        r2 = run_power_experiment(spec, ("prospective", "retrospective",
                                         "hotelling"), threads=4)
        assert r1 == r2

    def test_region1_imputed_equals_true_rejections(self):
        spec = ScenarioSpec.for_region(1, "dominant", 0.4, n_cases=150,
                                       n_controls=150, replicates=40, seed=13)
        rep = run_power_experiment(spec, ("prospective", "retrospective"))
        for row in rep.results:
            assert row.imputed_rejections == row.true_rejections

    def test_report_round_trip(self, tmp_path):
        spec = ScenarioSpec.for_region(2, "additive", 0.0, n_cases=80,
                                       n_controls=80, replicates=25, seed=5)
        rep = run_power_experiment(spec, ("prospective", "hotelling"))
        path = tmp_path / "power.tsv"
        rep.to_tsv(path)
        rows = simulate.read_power_tsv(path)
        assert len(rows) == 2
        assert rows[0]["kind"] == "size"
        assert float(rows[0]["imputed_pct"]) == pytest.approx(
            100 * rep.results[0].proportion("imputed"))

    def test_unknown_method_rejected(self):
        spec = ScenarioSpec.for_region(1, "additive", 0.1, n_cases=50,
                                       n_controls=50, replicates=5, seed=1)
        with pytest.raises(DomainError, match="registry"):
            run_power_experiment(spec, ("bogus",))


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(
            "scenario = 2\nmode = recessive\nbeta = 0.5\n"
            "n_cases = 200\nn_controls = 300\nreplicates = 10\n"
            "seed = 42\nalpha_level = 0.01\nzeta = 0.05\n")
        spec = ScenarioSpec.from_config(cfg)
        assert spec.mode == "recessive"
        assert spec.beta == 0.5
        assert spec.n_controls == 300
        assert spec.zeta == 0.05
        gen, ref = region_panels(2)
        assert np.allclose(spec.gen_panel.freqs, gen.freqs)

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("scenario = 1\nmode = additive\nbeta = 0\nbogus = 1\n")
        with pytest.raises(DomainError, match="bogus"):
            ScenarioSpec.from_config(cfg)

    def test_panel_paths(self, tmp_path):
        from retroscan.imputation import write_panel_tsv
        gen, ref = region_panels(2)
        write_panel_tsv(gen, tmp_path / "gen.tsv")
        write_panel_tsv(ref, tmp_path / "ref.tsv")
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("gen_panel = gen.tsv\nref_panel = ref.tsv\n"
                       "mode = additive\nbeta = 0.2\nreplicates = 5\n")
        spec = ScenarioSpec.from_config(cfg)
        assert np.allclose(spec.gen_panel.freqs, gen.freqs)
        assert np.allclose(spec.ref_panel.freqs, ref.freqs)


class TestRankExperiment:
    def test_causal_snp_ranks_low(self):
        out = rank_experiment(n_null=400, causal_maf=0.3,
                              causal_mode="recessive",
                              causal_beta=np.log(3.0), n_cases=550,
                              n_controls=550, replicates=8, seed=1234)
        assert set(out) == {"prospective", "retrospective", "eb"}
        for name, res in out.items():
            assert res["ranks"].shape == (8,)
            assert res["median"] <= 401
        assert out["eb"]["median"] <= out["prospective"]["median"]
