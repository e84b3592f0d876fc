"""Retrospective haplotype-effect estimation under phase ambiguity.

Two pseudo-likelihoods over a case-control region are implemented, both
rare-disease forms with a free case-control intercept kappa:

* model-based: diplotypes HWE in the population; the per-subject
  likelihood is

      sum_{h in H_G} q(h; theta) exp[D (kappa + m(h, E; beta))]
      -----------------------------------------------------------
      sum_{s=0,1} sum_{h} q(h; theta) exp[s (kappa + m(h, E; beta))]

  with q the HWE diplotype law and H_G the diplotypes consistent with the
  observed genotypes;

* model-free: HWE is used only to resolve phase, via the conditional law
  q(h | G; theta); the denominator then sums over H_G only.  Because the
  conditional normalization cancels, phase-unambiguous subjects contribute
  plain logistic terms.  theta is estimated from the control genotypes by
  the HWE estimating equation, stacked with the (beta, kappa) score.

Risk models are linear in copies of a target haplotype (additive, dominant
or recessive), optionally with a single environment covariate and its
interaction with the haplotype term.

The empirical-Bayes combination shrinks the model-free estimate toward the
model-based one componentwise, weighted by the variance of the difference
against its square.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from ._optim import fd_jacobian, newton_maximize
from .core import TestResult, chisq_pvalue, gen_inverse, psd_project
from .errors import (
    ContractViolation,
    ConvergenceError,
    DomainError,
    InconsistentGenotype,
    NotTestable,
)

_PRUNE_TOL = 1e-8
_PARAM_BOUND = 35.0


# ---------------------------------------------------------------------------
# Diplotype enumeration and HWE priors
# ---------------------------------------------------------------------------


def hap_code(alleles) -> int:
    """Bit-pack a 0/1 allele vector (locus j -> bit j)."""
    code = 0
    for j, a in enumerate(alleles):
        if a not in (0, 1):
            raise DomainError("haplotype alleles must be 0/1")
        code |= int(a) << j
    return code


def hap_alleles(code: int, n_loci: int) -> tuple:
    return tuple((code >> j) & 1 for j in range(n_loci))


def enumerate_diplotypes(genotype) -> list:
    """All unordered haplotype pairs (as bit codes, a <= b) whose locuswise
    allele sums reproduce the genotype; 2^(h-1) pairs for h >= 1
    heterozygous loci, one pair when unambiguous."""
    g = list(genotype)
    if any(x not in (0, 1, 2) for x in g):
        raise DomainError("genotype entries must be 0/1/2")
    base = 0
    hets = []
    for j, x in enumerate(g):
        if x == 2:
            base |= 1 << j
        elif x == 1:
            hets.append(j)
    if not hets:
        return [(base, base)]
    mask = 0
    for j in hets:
        mask |= 1 << j
    pairs = []
    # fix the top heterozygous bit to one side so each unordered pair
    # appears exactly once
    top = 1 << hets[-1]
    sub = mask ^ top
    s = 0
    while True:
        ha = base | s
        hb = base | (mask ^ s)
        pairs.append((ha, hb) if ha <= hb else (hb, ha))
        if s == sub:
            break
        s = (s - sub) & sub
    return sorted(pairs)


def diplotype_prior(pair, theta) -> float:
    """HWE prior of an (index) pair: theta_a^2 or 2 theta_a theta_b."""
    a, b = pair
    theta = np.asarray(theta, dtype=float)
    if a == b:
        return float(theta[a] ** 2)
    return float(2.0 * theta[a] * theta[b])


def conditional_diplotype_prob(pair, genotype, haplotypes, theta) -> float:
    """HWE prior restricted to the diplotypes consistent with the genotype
    and renormalized.  ``haplotypes`` is the (K, L) 0/1 matrix defining the
    indices used by ``pair``."""
    haps = np.asarray(haplotypes, dtype=np.int8)
    codes = {hap_code(row): i for i, row in enumerate(haps)}
    consistent = []
    for ca, cb in enumerate_diplotypes(genotype):
        ia, ib = codes.get(ca), codes.get(cb)
        if ia is not None and ib is not None:
            consistent.append((min(ia, ib), max(ia, ib)))
    total = sum(diplotype_prior(p, theta) for p in consistent)
    if total <= 0.0:
        raise InconsistentGenotype(
            "no admissible diplotype carries positive prior mass")
    a, b = pair
    key = (min(a, b), max(a, b))
    if key not in consistent:
        return 0.0
    return diplotype_prior(key, theta) / total


# ---------------------------------------------------------------------------
# Risk-model specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskModelSpec:
    """Disease risk linear in copies of a target haplotype.

    ``mode`` codes the copy count c as c (additive), 1[c>=1] (dominant) or
    1[c=2] (recessive).  ``env`` adds one environment main effect; setting
    ``interaction`` also adds the haplotype x environment product.
    """

    target: tuple
    mode: str = "additive"
    env: bool = False
    interaction: bool = False

    def __post_init__(self):
        if self.mode not in ("additive", "dominant", "recessive"):
            raise DomainError(f"unknown risk mode {self.mode!r}")
        if self.interaction and not self.env:
            raise ContractViolation("interaction requires an environment term")
        object.__setattr__(self, "target", tuple(int(a) for a in self.target))

    @property
    def n_beta(self) -> int:
        return 1 + int(self.env) + int(self.interaction)

    @property
    def beta_names(self) -> tuple:
        names = ["hap"]
        if self.env:
            names.append("env")
        if self.interaction:
            names.append("hap_x_env")
        return tuple(names)

    def copy_coding(self) -> np.ndarray:
        """r(c) for c = 0, 1, 2 copies of the target."""
        if self.mode == "additive":
            return np.array([0.0, 1.0, 2.0])
        if self.mode == "dominant":
            return np.array([0.0, 1.0, 1.0])
        return np.array([0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# Likelihood workspace
# ---------------------------------------------------------------------------


class HaplotypeLikelihood:
    """Pre-indexed likelihood evaluator for one dataset and risk model.

    Parameters are packed as x = (beta..., kappa, xi...) where xi are
    log-ratio coordinates of the haplotype frequencies relative to a
    reference haplotype (simplex maintained at every iterate).
    """

    def __init__(self, genotypes, phenotypes, spec: RiskModelSpec,
                 env=None, support=None):
        g = np.asarray(genotypes, dtype=np.int8)
        d = np.asarray(phenotypes, dtype=np.int8)
        if g.ndim != 2 or g.shape[0] != d.shape[0]:
            raise ContractViolation("genotype/phenotype shape mismatch")
        if not np.isin(g, (0, 1, 2)).all():
            raise DomainError("haplotype fits need complete 0/1/2 genotypes")
        if len(spec.target) != g.shape[1]:
            raise ContractViolation("target haplotype length mismatch")
        self.spec = spec
        self.n_loci = g.shape[1]
        self.d = d.astype(float)
        self.n = g.shape[0]
        if env is None:
            if spec.env:
                raise ContractViolation("spec has an environment term but no "
                                        "environment column was supplied")
            self.env = np.zeros(self.n)
        else:
            self.env = np.asarray(env, dtype=float)
            if self.env.shape != (self.n,):
                raise ContractViolation("environment column length mismatch")

        classes, self.class_of = np.unique(g, axis=0, return_inverse=True)
        pair_lists = [enumerate_diplotypes(row) for row in classes]
        if support is None:
            codes = sorted({c for pl in pair_lists for p in pl for c in p})
        else:
            codes = sorted(int(c) for c in support)
        self.support = tuple(codes)
        self._rebuild(pair_lists)

    # -- structural tables ---------------------------------------------------

    def _rebuild(self, pair_lists):
        index = {c: i for i, c in enumerate(self.support)}
        self.k_haps = len(self.support)
        target_code = hap_code(self.spec.target)
        self.target_idx = index.get(target_code, None)
        is_target = np.zeros(self.k_haps)
        if self.target_idx is not None:
            is_target[self.target_idx] = 1.0
        self._is_target = is_target

        cls, pa, pb, w, cp = [], [], [], [], []
        self._class_alive = np.zeros(len(pair_lists), dtype=bool)
        for k, pl in enumerate(pair_lists):
            for a, b in pl:
                ia, ib = index.get(a), index.get(b)
                if ia is None or ib is None:
                    continue
                cls.append(k)
                pa.append(ia)
                pb.append(ib)
                w.append(1.0 if ia == ib else 2.0)
                copies = int(is_target[ia] + is_target[ib])
                cp.append(copies)
                self._class_alive[k] = True
        if not self._class_alive[np.unique(self.class_of)].all():
            raise InconsistentGenotype(
                "some genotype class has no diplotype within the support")
        self._pairs = (np.array(cls), np.array(pa), np.array(pb),
                       np.array(w), np.array(cp))
        self.n_classes = len(pair_lists)
        self._pair_lists = pair_lists
        self.rvec = self.spec.copy_coding()

    def prune_support(self, keep_mask) -> bool:
        """Drop haplotypes outside ``keep_mask`` unless removal would leave
        a genotype class without any diplotype.  Returns True if changed."""
        keep = np.asarray(keep_mask, dtype=bool).copy()
        if keep.all():
            return False
        cls, pa, pb, _, _ = self._pairs
        used = np.unique(self.class_of)
        for k in used:
            sel = cls == k
            ok = keep[pa[sel]] & keep[pb[sel]]
            if not ok.any():
                keep[pa[sel]] = True
                keep[pb[sel]] = True
        if keep.all():
            return False
        self.support = tuple(c for c, k in zip(self.support, keep) if k)
        self._rebuild(self._pair_lists)
        return True

    # -- parameter packing ---------------------------------------------------

    @property
    def n_beta(self) -> int:
        return self.spec.n_beta

    @property
    def n_params(self) -> int:
        return self.n_beta + 1 + self.k_haps - 1

    def theta_to_xi(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        ref = int(np.argmax(theta))
        self._ref = ref
        safe = np.clip(theta, 1e-300, None)
        xi = np.log(safe / safe[ref])
        return np.delete(xi, ref)

    def xi_to_theta(self, xi) -> np.ndarray:
        full = np.insert(np.asarray(xi, dtype=float), self._ref, 0.0)
        full -= full.max()
        expd = np.exp(full)
        return expd / expd.sum()

    def pack(self, beta, kappa, theta) -> np.ndarray:
        return np.concatenate([np.atleast_1d(beta), [kappa],
                               self.theta_to_xi(theta)])

    def unpack(self, x):
        nb = self.n_beta
        return x[:nb], float(x[nb]), self.xi_to_theta(x[nb + 1:])

    # -- per-iteration tables --------------------------------------------------

    def _collapse(self, theta):
        """Copies-collapsed pair weights cw[class, c] and allele-count
        tables tw[class, c, hap] at the current frequencies."""
        cls, pa, pb, w, cp = self._pairs
        pw = w * theta[pa] * theta[pb]
        cw = np.zeros((self.n_classes, 3))
        np.add.at(cw, (cls, cp), pw)
        tw = np.zeros((self.n_classes, 3, self.k_haps))
        np.add.at(tw, (cls, cp, pa), pw)
        np.add.at(tw, (cls, cp, pb), pw)
        return cw, tw

    def _eta(self, beta, kappa):
        """eta[i, c] = kappa + beta_env E_i + r(c) (beta_hap + beta_ge E_i)."""
        bh = beta[0]
        be = beta[1] if self.spec.env else 0.0
        bge = beta[2] if self.spec.interaction else 0.0
        gfac = bh + bge * self.env
        return kappa + be * self.env[:, None] + self.rvec[None, :] * gfac[:, None]

    def _numerator(self, cw, eta):
        fac = np.where(self.d[:, None] > 0, np.exp(eta), 1.0)
        nw = cw[self.class_of] * fac
        return nw, nw.sum(axis=1)

    # -- log-likelihoods -------------------------------------------------------

    def loglik_model_x(self, x) -> float:
        beta, kappa, theta = self.unpack(x)
        return self.loglik_model(beta, kappa, theta)

    def loglik_model(self, beta, kappa, theta) -> float:
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        theta = np.asarray(theta, dtype=float)
        cw, _ = self._collapse(theta)
        eta = self._eta(beta, kappa)
        _, a = self._numerator(cw, eta)
        pc = self._copies_law(theta)
        b = (pc[None, :] * (1.0 + np.exp(eta))).sum(axis=1)
        if (a <= 0).any() or (b <= 0).any():
            return -np.inf
        return float(np.log(a).sum() - np.log(b).sum())

    def loglik_free_x(self, x) -> float:
        beta, kappa, theta = self.unpack(x)
        return self.loglik_free(beta, kappa, theta)

    def loglik_free(self, beta, kappa, theta) -> float:
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        theta = np.asarray(theta, dtype=float)
        cw, _ = self._collapse(theta)
        eta = self._eta(beta, kappa)
        _, a = self._numerator(cw, eta)
        df = (cw[self.class_of] * (1.0 + np.exp(eta))).sum(axis=1)
        if (a <= 0).any() or (df <= 0).any():
            return -np.inf
        return float(np.log(a).sum() - np.log(df).sum())

    def _copies_law(self, theta):
        t = theta[self.target_idx] if self.target_idx is not None else 0.0
        return np.array([(1.0 - t) ** 2, 2.0 * t * (1.0 - t), t * t])

    # -- per-subject scores ------------------------------------------------------

    def _z_scores(self, d_eta_scale):
        """Columns of the beta/kappa score given d(eta)/d(param) weights.

        ``d_eta_scale`` is an (n, 3) array of weights w[i, c]; the returned
        columns are sum_c w[i, c] * d eta[i, c]/d param for each of
        (beta..., kappa)."""
        cols = [np.einsum("ic,c->i", d_eta_scale, self.rvec)]
        if self.spec.env:
            cols.append(d_eta_scale.sum(axis=1) * self.env)
        if self.spec.interaction:
            cols.append(np.einsum("ic,c->i", d_eta_scale, self.rvec) * self.env)
        cols.append(d_eta_scale.sum(axis=1))
        return cols

    def score_model_subjects(self, x) -> np.ndarray:
        """Per-subject analytic gradient rows of log L_model in x-coords."""
        beta, kappa, theta = self.unpack(x)
        cw, tw = self._collapse(theta)
        eta = self._eta(beta, kappa)
        exp_eta = np.exp(eta)
        nw, a = self._numerator(cw, eta)
        post_a = nw / a[:, None]
        pc = self._copies_law(theta)
        bterm = pc[None, :] * exp_eta
        b = pc.sum() + bterm.sum(axis=1)

        # beta/kappa block: D * E_A[d eta] - (1/B) sum_c P_c e^eta d eta
        num_w = self.d[:, None] * post_a
        den_w = bterm / b[:, None]
        cols = [cn - cd for cn, cd in zip(self._z_scores(num_w),
                                          self._z_scores(den_w))]

        # xi block: E_A[n_h] - E_B[n_h]
        tw_i = tw[self.class_of]
        fac = np.where(self.d[:, None] > 0, exp_eta, 1.0)
        e_a = np.einsum("ic,ich->ih", fac, tw_i) / a[:, None]
        t = theta[self.target_idx] if self.target_idx is not None else 0.0
        s_other = t * (1.0 + exp_eta[:, 1]) + (1.0 - t) * (1.0 + exp_eta[:, 0])
        s_target = t * (1.0 + exp_eta[:, 2]) + (1.0 - t) * (1.0 + exp_eta[:, 1])
        s_full = np.where(self._is_target[None, :] > 0,
                          s_target[:, None], s_other[:, None])
        e_b = 2.0 * theta[None, :] * s_full / b[:, None]
        xi_scores = np.delete(e_a - e_b, self._ref, axis=1)
        return np.column_stack(cols + [xi_scores])

    def score_free_subjects(self, x) -> np.ndarray:
        """Per-subject analytic gradient rows of log L_free in x-coords."""
        beta, kappa, theta = self.unpack(x)
        cw, tw = self._collapse(theta)
        eta = self._eta(beta, kappa)
        exp_eta = np.exp(eta)
        nw, a = self._numerator(cw, eta)
        post_a = nw / a[:, None]
        cw_i = cw[self.class_of]
        dfterm = cw_i * exp_eta
        df = cw_i.sum(axis=1) + dfterm.sum(axis=1)

        num_w = self.d[:, None] * post_a
        den_w = dfterm / df[:, None]
        cols = [cn - cd for cn, cd in zip(self._z_scores(num_w),
                                          self._z_scores(den_w))]

        tw_i = tw[self.class_of]
        fac = np.where(self.d[:, None] > 0, exp_eta, 1.0)
        e_a = np.einsum("ic,ich->ih", fac, tw_i) / a[:, None]
        e_df = np.einsum("ic,ich->ih", 1.0 + exp_eta, tw_i) / df[:, None]
        xi_scores = np.delete(e_a - e_df, self._ref, axis=1)
        return np.column_stack(cols + [xi_scores])

    def control_theta_scores(self, theta) -> np.ndarray:
        """Per-subject rows of the control-only HWE estimating function for
        theta in xi-coordinates: (1 - D_i) (E_q[n_h | G_i] - 2 theta_h)."""
        theta = np.asarray(theta, dtype=float)
        cw, tw = self._collapse(theta)
        total = cw.sum(axis=1)
        if (total[np.unique(self.class_of)] <= 0).any():
            raise InconsistentGenotype("zero prior mass on a genotype class")
        e_q = tw.sum(axis=1) / total[:, None]
        rows = (e_q[self.class_of] - 2.0 * theta[None, :])
        rows = rows * (1.0 - self.d)[:, None]
        return np.delete(rows, self._ref, axis=1)

    def control_hwe_loglik(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        cw, _ = self._collapse(theta)
        total = cw.sum(axis=1)[self.class_of]
        ctrl = self.d == 0
        if (total[ctrl] <= 0).any():
            return -np.inf
        return float(np.log(total[ctrl]).sum())

    def em_theta(self, controls_only: bool, tol: float = 1e-12,
                 max_iter: int = 5000) -> np.ndarray:
        """HWE haplotype-frequency EM on all subjects or controls only."""
        sel = (self.d == 0) if controls_only else np.ones(self.n, dtype=bool)
        if not sel.any():
            raise NotTestable("no subjects available for frequency estimation")
        counts = np.bincount(self.class_of[sel], minlength=self.n_classes).astype(float)
        theta = np.full(self.k_haps, 1.0 / self.k_haps)
        total_n = counts.sum()
        for _ in range(max_iter):
            _, tw = self._collapse(theta)
            class_tot = tw.sum(axis=(1, 2)) / 2.0      # = P(G_k; theta)
            safe = np.where(class_tot > 0, class_tot, 1.0)
            expected = (counts / safe / 2.0) @ tw.sum(axis=1)
            new = expected / (2.0 * total_n)
            new = np.clip(new, 0.0, None)
            s = new.sum()
            if s <= 0:
                raise InconsistentGenotype("EM collapsed to zero mass")
            new /= s
            if np.max(np.abs(new - theta)) < tol:
                return new
            theta = new
        return theta


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HaplotypeFit:
    """Estimates for one pseudo-likelihood (or their EB combination).

    ``covariance`` is a sandwich estimate over (beta..., kappa, theta...)
    in that order; ``beta_influence`` holds the per-subject influence rows
    used for the EB difference variance.
    """

    method: str
    spec: RiskModelSpec
    beta: np.ndarray
    beta_names: tuple
    kappa: float
    support: tuple
    theta: np.ndarray
    covariance: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    flag: str = ""
    beta_influence: np.ndarray | None = None
    eb_weights: np.ndarray | None = None

    @property
    def beta_cov(self) -> np.ndarray:
        k = self.beta.size
        return self.covariance[:k, :k]

    @property
    def beta_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.beta_cov), 0.0, None))


def _output_jacobian(ws: HaplotypeLikelihood, theta) -> np.ndarray:
    """d(beta, kappa, theta) / d(beta, kappa, xi)."""
    nb = ws.n_beta
    k = ws.k_haps
    jac = np.zeros((nb + 1 + k, nb + 1 + (k - 1)))
    jac[:nb + 1, :nb + 1] = np.eye(nb + 1)
    dtheta = np.diag(theta) - np.outer(theta, theta)
    jac[nb + 1:, nb + 1:] = np.delete(dtheta, ws._ref, axis=1)
    return jac


def _sandwich(ws, x, phi_rows, total_score_fn):
    """Influences and covariance from per-subject estimating rows."""
    a = fd_jacobian(total_score_fn, x)
    w = np.linalg.svd(a, compute_uv=False)
    singular = w.min() < 1e-10 * max(w.max(), 1e-300)
    if singular:
        infl = (gen_inverse(a.T @ a) @ a.T @ phi_rows.T).T
    else:
        infl = np.linalg.solve(a, phi_rows.T).T
    cov_x = infl.T @ infl
    _, _, theta = ws.unpack(x)
    jac = _output_jacobian(ws, theta)
    cov = jac @ cov_x @ jac.T
    return infl, cov, singular


def _finalize(ws, x, loglik, it, converged, method, infl, cov, flag):
    beta, kappa, theta = ws.unpack(x)
    return HaplotypeFit(
        method=method,
        spec=ws.spec,
        beta=beta.copy(),
        beta_names=ws.spec.beta_names,
        kappa=kappa,
        support=ws.support,
        theta=theta,
        covariance=cov,
        loglik=loglik,
        converged=converged,
        iterations=it,
        flag=flag,
        beta_influence=infl[:, :ws.n_beta].copy(),
    )


def _theta_start(ws: HaplotypeLikelihood, controls_only: bool):
    theta = ws.em_theta(controls_only=controls_only, tol=1e-10, max_iter=3000)
    pruned = ws.prune_support(theta > _PRUNE_TOL)
    if pruned:
        theta = ws.em_theta(controls_only=controls_only, tol=1e-10,
                            max_iter=3000)
    return theta, pruned


def fit_model(genotypes, phenotypes, spec: RiskModelSpec, env=None) -> HaplotypeFit:
    """Maximize the model-based pseudo-likelihood over (beta, theta, kappa)."""
    ws = HaplotypeLikelihood(genotypes, phenotypes, spec, env=env)
    theta0, pruned = _theta_start(ws, controls_only=False)
    n1 = ws.d.sum()
    kappa0 = float(np.log(n1 / (ws.n - n1)))
    x0 = ws.pack(np.zeros(ws.n_beta), kappa0, theta0)

    def fun_grad(x):
        ll = ws.loglik_model_x(x)
        if not np.isfinite(ll):
            return ll, np.zeros_like(x)
        grad = ws.score_model_subjects(x).sum(axis=0)
        return ll, grad

    x, ll, it, converged = newton_maximize(fun_grad, x0, bound=_PARAM_BOUND)
    phi = ws.score_model_subjects(x)
    infl, cov, singular = _sandwich(
        ws, x, phi, lambda z: ws.score_model_subjects(z).sum(axis=0))
    flag = ";".join(f for f in (
        "pruned_haplotypes" if pruned else "",
        "singular_information" if singular else "") if f)
    if not converged and not singular:
        raise ConvergenceError("model-based haplotype fit did not converge")
    return _finalize(ws, x, ll, it, converged and not singular,
                     "model", infl, cov, flag)


def fit_free(genotypes, phenotypes, spec: RiskModelSpec, env=None) -> HaplotypeFit:
    """Model-free fit: control-based HWE estimating equation for theta
    stacked with the (beta, kappa) score of the conditional likelihood."""
    ws = HaplotypeLikelihood(genotypes, phenotypes, spec, env=env)
    theta, pruned = _theta_start(ws, controls_only=True)

    # Newton polish of the control HWE equation in xi-coordinates
    xi0 = ws.theta_to_xi(theta)

    def theta_fun_grad(xi):
        th = ws.xi_to_theta(xi)
        return (ws.control_hwe_loglik(th),
                ws.control_theta_scores(th).sum(axis=0))

    xi, _, it_theta, conv_theta = newton_maximize(theta_fun_grad, xi0,
                                                  bound=_PARAM_BOUND)
    theta = ws.xi_to_theta(xi)

    n1 = ws.d.sum()
    kappa0 = float(np.log(n1 / (ws.n - n1)))

    def bk_fun_grad(y):
        x = np.concatenate([y, xi])
        ll = ws.loglik_free_x(x)
        if not np.isfinite(ll):
            return ll, np.zeros_like(y)
        grad = ws.score_free_subjects(x).sum(axis=0)
        return ll, grad[:ws.n_beta + 1]

    y0 = np.concatenate([np.zeros(ws.n_beta), [kappa0]])
    y, ll, it_bk, conv_bk = newton_maximize(bk_fun_grad, y0, bound=_PARAM_BOUND)
    x = np.concatenate([y, xi])

    nbk = ws.n_beta + 1

    def stacked_rows(z):
        beta_kappa_rows = ws.score_free_subjects(z)[:, :nbk]
        theta_rows = ws.control_theta_scores(ws.unpack(z)[2])
        return np.column_stack([beta_kappa_rows, theta_rows])

    phi = stacked_rows(x)
    infl, cov, singular = _sandwich(ws, x, phi,
                                    lambda z: stacked_rows(z).sum(axis=0))
    converged = conv_theta and conv_bk
    flag = ";".join(f for f in (
        "pruned_haplotypes" if pruned else "",
        "singular_information" if singular else "") if f)
    if not converged and not singular:
        raise ConvergenceError("model-free haplotype fit did not converge")
    return _finalize(ws, x, ll, it_theta + it_bk, converged and not singular,
                     "free", infl, cov, flag)


def eb_combine(fit_free_result: HaplotypeFit, fit_model_result: HaplotypeFit,
               v: np.ndarray | None = None) -> HaplotypeFit:
    """Empirical-Bayes combination of the two fits, componentwise on beta.

    The default covariance of the difference is the sandwich of the stacked
    per-subject influences; pass ``v`` to override (e.g. with a bootstrap
    estimate from ``eb_bootstrap_difference_cov``).
    """
    ff, fm = fit_free_result, fit_model_result
    if ff.spec != fm.spec:
        raise ContractViolation("fits use different risk-model specs")
    if not (ff.converged and fm.converged):
        raise ContractViolation("both fits must have converged")
    if v is None:
        if (ff.beta_influence is None or fm.beta_influence is None
                or ff.beta_influence.shape != fm.beta_influence.shape):
            raise ContractViolation("influence rows unavailable; pass v")
        diff = ff.beta_influence - fm.beta_influence
        v = diff.T @ diff
    v = np.atleast_2d(np.asarray(v, dtype=float))
    k = ff.beta.size
    if v.shape != (k, k):
        raise ContractViolation("difference covariance has wrong shape")

    psi = ff.beta - fm.beta
    vdiag = np.clip(np.diag(v), 0.0, None)
    denom = vdiag + psi * psi
    w = np.where(denom > 0, np.divide(vdiag, np.where(denom > 0, denom, 1.0)), 1.0)
    beta_eb = ff.beta + w * (fm.beta - ff.beta)

    if ff.beta_influence is not None and fm.beta_influence is not None \
            and ff.beta_influence.shape == fm.beta_influence.shape:
        dpsi = np.where(denom > 0,
                        -vdiag * (vdiag - psi * psi)
                        / np.where(denom > 0, denom, 1.0) ** 2, -1.0)
        infl = ff.beta_influence + (ff.beta_influence
                                    - fm.beta_influence) * dpsi[None, :]
        beta_cov = infl.T @ infl
    else:
        infl = None
        beta_cov = ff.beta_cov

    beta_cov, _ = psd_project(beta_cov)
    cov = ff.covariance.copy()
    cov[:k, :k] = beta_cov
    return HaplotypeFit(
        method="eb",
        spec=ff.spec,
        beta=beta_eb,
        beta_names=ff.beta_names,
        kappa=ff.kappa,
        support=ff.support,
        theta=ff.theta,
        covariance=cov,
        loglik=float("nan"),
        converged=True,
        iterations=0,
        beta_influence=infl,
        eb_weights=w,
    )


def eb_bootstrap_difference_cov(genotypes, phenotypes, spec: RiskModelSpec,
                                env=None, n_boot: int = 200, rng=None) -> np.ndarray:
    """Nonparametric bootstrap (stratified by case status) of the covariance
    of beta_free - beta_model."""
    rng = np.random.default_rng(rng)
    g = np.asarray(genotypes)
    d = np.asarray(phenotypes)
    e = None if env is None else np.asarray(env, dtype=float)
    cases = np.flatnonzero(d == 1)
    ctrls = np.flatnonzero(d == 0)
    diffs = []
    failures = 0
    for _ in range(n_boot):
        idx = np.concatenate([rng.choice(cases, cases.size, replace=True),
                              rng.choice(ctrls, ctrls.size, replace=True)])
        try:
            ff = fit_free(g[idx], d[idx], spec,
                          env=None if e is None else e[idx])
            fm = fit_model(g[idx], d[idx], spec,
                           env=None if e is None else e[idx])
            diffs.append(ff.beta - fm.beta)
        except (ConvergenceError, InconsistentGenotype, NotTestable):
            failures += 1
    if len(diffs) < max(10, n_boot // 2):
        raise ConvergenceError(f"bootstrap failed on {failures}/{n_boot} resamples")
    stack = np.vstack(diffs)
    centered = stack - stack.mean(axis=0)
    return centered.T @ centered / (len(diffs) - 1)


def wald_tests(fit: HaplotypeFit) -> list:
    """Per-component Wald tests of beta = 0."""
    out = []
    se = fit.beta_se
    for j, name in enumerate(fit.beta_names):
        if se[j] <= 0:
            raise NotTestable(f"zero standard error for {name}")
        stat = float((fit.beta[j] / se[j]) ** 2)
        out.append(TestResult(statistic=stat, df=1,
                              p_value=chisq_pvalue(stat, 1),
                              method=f"{fit.method}_wald_{name}"))
    return out


def write_fit_report(fits, path) -> None:
    """Fit report rows: parameter, estimate, SE, method, shrink weight."""
    with open(path, "wt", encoding="utf-8") as fh:
        fh.write("parameter\testimate\tse\tmethod\tweight\n")
        for fit in fits:
            se = fit.beta_se
            for j, name in enumerate(fit.beta_names):
                w = ("" if fit.eb_weights is None
                     else f"{fit.eb_weights[j]:.10g}")
                fh.write(f"{name}\t{fit.beta[j]:.10g}\t{se[j]:.10g}\t"
                         f"{fit.method}\t{w}\n")
            fh.write(f"kappa\t{fit.kappa:.10g}\t"
                     f"{np.sqrt(max(fit.covariance[fit.beta.size, fit.beta.size], 0.0)):.10g}\t"
                     f"{fit.method}\t\n")


def read_fit_report(path) -> list:
    """Round-trip parser for ``write_fit_report`` output."""
    rows = []
    with open(path, "rt", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["parameter", "estimate", "se", "method", "weight"]:
            raise DomainError(f"{path}: unexpected fit-report header")
        for line in fh:
            if not line.strip():
                continue
            param, est, se, method, w = line.rstrip("\n").split("\t")
            rows.append({"parameter": param, "estimate": float(est),
                         "se": float(se), "method": method,
                         "weight": float(w) if w else None})
    return rows
