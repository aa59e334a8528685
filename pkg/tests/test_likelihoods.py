"""Per-source likelihood terms: trivial contracts and independent oracles."""

import math

import numpy as np
import pytest

from evisynth.errors import DataError
from evisynth.likelihoods import (EvalProducts, HarsTerm, MixtureBinomTerm,
                                  TwoArmOrTerm, binomial_loglik, build_model,
                                  logposterior_terms, normal_logpdf,
                                  poisson_loglik, total_logposterior)
from evisynth.rng import make_stream

I64 = np.int64


def _products(**arrays):
    n = max(len(v) for v in arrays.values())
    fields = {k: np.zeros(n) for k in ("rho", "pi", "delta", "rho_n", "plwh",
                                       "undiag", "diag_n")}
    fields.update({k: np.asarray(v, dtype=float) for k, v in arrays.items()})
    return EvalProducts(basic=None, **fields)


def _csr(rows):
    idx = np.concatenate([np.asarray(r, dtype=I64) for r in rows])
    indptr = np.zeros(len(rows) + 1, dtype=I64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    return idx, indptr


# --- scalar helpers ---------------------------------------------------------

def test_binomial_loglik_trivials():
    assert binomial_loglik(0, 0, 0.5) == 0.0
    # symmetric coin with the combinatorial constant kept: log C(2,1)/4 = log(1/2)
    assert abs(binomial_loglik(1, 2, 0.5) - math.log(0.5)) < 1e-12
    # frozen 50-digit value
    assert abs(binomial_loglik(3, 10, 0.3) - (-1.3211512777668886)) < 1e-12
    assert binomial_loglik(1, 5, 0.0) == -math.inf
    with pytest.raises(DataError):
        binomial_loglik(3, 2, 0.5)


def test_poisson_loglik():
    assert abs(poisson_loglik(4, 4.0) - (-1.6328763858683831)) < 1e-12
    assert poisson_loglik(0, 0.0) == 0.0
    assert poisson_loglik(1, 0.0) == -math.inf


def test_normal_logpdf():
    assert abs(normal_logpdf(0.0, 0.0, 1.0)
               - (-0.5 * math.log(2 * math.pi))) < 1e-12


# --- UAM / NSHPC mixtures ---------------------------------------------------

def test_uam_pair_matches_frozen_oracle():
    """(5 of 100 positive, 4 of 5 aware) at pi=0.05, delta=0.8."""
    prod = _products(rho_n=[1.0], plwh=[0.05], diag_n=[0.04])
    idx, indptr = _csr([[0]])
    t_pi = MixtureBinomTerm(name="UAM-pi", y=np.array([5.0]), n=np.array([100.0]),
                            num_field="plwh", den_field="rho_n", num_idx=idx,
                            num_indptr=indptr,
                            const=math.lgamma(101) - math.lgamma(6) - math.lgamma(96))
    t_de = MixtureBinomTerm(name="UAM-delta", y=np.array([4.0]), n=np.array([5.0]),
                            num_field="diag_n", den_field="plwh", num_idx=idx,
                            num_indptr=indptr,
                            const=math.lgamma(6) - math.lgamma(5) - math.lgamma(2))
    total = t_pi.value(None, prod) + t_de.value(None, prod)
    assert abs(total - (-2.6072735978616684)) < 1e-10


def test_uam_zero_positives_contributes_nothing():
    prod = _products(rho_n=[1.0], plwh=[0.05], diag_n=[0.04])
    idx, indptr = _csr([[0]])
    t = MixtureBinomTerm(name="UAM-delta", y=np.array([0.0]), n=np.array([0.0]),
                         num_field="diag_n", den_field="plwh", num_idx=idx,
                         num_indptr=indptr, const=0.0)
    assert t.value(None, prod) == 0.0


def test_nshpc_oracle_and_impossibility():
    idx, indptr = _csr([[0]])
    t = MixtureBinomTerm(name="NSHPC", y=np.array([3.0]), n=np.array([10000.0]),
                         num_field="undiag", den_field="rho_n", num_idx=idx,
                         num_indptr=indptr,
                         const=(math.lgamma(10001) - math.lgamma(4)
                                - math.lgamma(9998)))
    prod = _products(rho_n=[1.0], undiag=[3e-4])
    assert abs(t.value(None, prod) - (-1.4957725832199751)) < 1e-9
    # zero diagnoses, zero births -> 0
    t0 = MixtureBinomTerm(name="NSHPC", y=np.array([0.0]), n=np.array([0.0]),
                          num_field="undiag", den_field="rho_n", num_idx=idx,
                          num_indptr=indptr, const=0.0)
    assert t0.value(None, prod) == 0.0
    # undiagnosed prevalence 0 with a positive count -> rejected state
    prod0 = _products(rho_n=[1.0], undiag=[0.0])
    assert t.value(None, prod0) == -math.inf


# --- HARS -------------------------------------------------------------------

def test_hars_poisson_mode_and_direction():
    idx, indptr = _csr([[0]])
    t = HarsTerm(name="HARS", d=np.array([4.0]), idx=idx, indptr=indptr,
                 const=-math.lgamma(5))
    prod = _products(diag_n=[4.0])
    assert abs(t.value(None, prod) - (-1.6328763858683831)) < 1e-12
    t2 = HarsTerm(name="HARS", d=np.array([8.0]), idx=idx, indptr=indptr,
                  const=-math.lgamma(9))
    assert t2.value(None, prod) < t.value(None, prod)
    # D = 0 at rate 0 contributes 0
    t0 = HarsTerm(name="HARS", d=np.array([0.0]), idx=idx, indptr=indptr,
                  const=0.0)
    assert t0.value(None, _products(diag_n=[0.0])) == 0.0


# --- two-arm odds-ratio terms ------------------------------------------------

def _two_arm_term(y1, n1, y2, n2):
    idx, indptr = _csr([[0], [1]])
    return TwoArmOrTerm(
        name="GMSHS", y=np.array([y1, y2], dtype=float),
        n=np.array([n1, n2], dtype=float), num_field="undiag",
        den_field="rho_n", idx=idx, indptr=indptr,
        offset_idx=np.array([0, 0], dtype=I64), const=0.0)


def _profile_logor(term, n_grid=241, b_lo=-14.0, b_hi=6.0):
    """Grid-search oracle: maximize over the free offset for each model
    log-OR; returns the profile argmax."""
    deltas = np.linspace(-4, 4, n_grid)
    best_delta, best_val = None, -np.inf
    for d in deltas:
        q1 = 0.2  # arbitrary anchor level; the offset absorbs it
        e2 = math.log(q1 / (1 - q1)) + d
        q2 = 1 / (1 + math.exp(-e2))
        prod = _products(rho_n=[1.0, 1.0], undiag=[q1, q2])
        vals = [term.value(np.array([b]), prod)
                for b in np.linspace(b_lo, b_hi, 501)]
        v = max(vals)
        if v > best_val:
            best_val, best_delta = v, d
    return best_delta


def test_gmshs_ml_logor_matches_sample_or():
    """Arms 2/10 vs 1/10: profile argmax ~ log((1/9)/(2/8)) for arm2:arm1."""
    term = _two_arm_term(2, 10, 1, 10)
    target = math.log((1 / 9) / (2 / 8))
    assert abs(_profile_logor(term) - target) < 0.05


def test_gmshs_equal_arms_logor_zero():
    term = _two_arm_term(3, 12, 3, 12)
    assert abs(_profile_logor(term)) < 0.05


def test_gmshs_empty_arms_contribute_zero():
    term = _two_arm_term(0, 0, 0, 0)
    prod = _products(rho_n=[1.0, 1.0], undiag=[0.2, 0.1])
    assert term.value(np.array([0.7]), prod) == 0.0


def test_blood_donor_logor_log2():
    """2/100000 vs 1/100000 male:female donors -> sample male:female
    log-OR ~ log 2 (the profile is oriented arm2:arm1, hence the sign)."""
    term = _two_arm_term(2, 100000, 1, 100000)
    assert abs(-_profile_logor(term) - math.log(2.0)) < 0.05


def test_or_term_invariant_to_baseline_shift():
    """The term depends on the arm levels only through offset + logit(level):
    shifting both arm logits by c and the offset by -c changes nothing."""
    term = _two_arm_term(10, 30, 5, 30)
    q1, q2 = 0.23, 0.11
    for c in (-1.7, 0.4, 2.2):
        e1 = math.log(q1 / (1 - q1)) + c
        e2 = math.log(q2 / (1 - q2)) + c
        prod0 = _products(rho_n=[1.0, 1.0], undiag=[q1, q2])
        prod1 = _products(rho_n=[1.0, 1.0],
                          undiag=[1 / (1 + math.exp(-e1)),
                                  1 / (1 + math.exp(-e2))])
        v0 = term.value(np.array([0.8]), prod0)
        v1 = term.value(np.array([0.8 - c]), prod1)
        assert abs(v0 - v1) < 1e-9


def test_or_profile_location_invariant_to_shared_odds_scaling():
    """Data with both arms' odds scaled equally keep the same profile
    maximum for the log-OR (precision may change; location does not)."""
    t1 = _two_arm_term(10, 30, 5, 30)    # odds 1/2, 1/5
    t2 = _two_arm_term(15, 30, 6, 21)    # odds doubled: 1, 2/5
    assert abs(_profile_logor(t1) - _profile_logor(t2)) < 0.05


# --- assembled posterior ------------------------------------------------------

def test_empty_bundle_is_prior_only(small_frame, cal_config, small_truth):
    model = build_model(small_frame, small_truth.pop, {}, cal_config)
    g = make_stream(31)
    theta = model.init_theta(g)
    assert abs(model.logpost(theta)
               - model.graph.prior_logdensity(theta)) < 1e-9


def test_one_source_bundle_additivity(small_frame, cal_config, small_bundle):
    bundle, _ = small_bundle
    tables = {"UAM": bundle.tables["UAM"]}
    model = build_model(small_frame, bundle.pop, tables, cal_config)
    g = make_stream(32)
    theta = model.init_theta(g)
    terms = logposterior_terms(model, theta)
    assert set(terms) == {"prior", "UAM-pi", "UAM-delta"}
    assert abs(sum(terms.values()) - model.logpost(theta)) < 1e-9


def test_total_additivity_full_bundle(small_model):
    """Term-sum oracle: the fast path equals the independent per-term sum."""
    g = make_stream(33)
    for _ in range(5):
        theta = small_model.init_theta(g)
        terms = logposterior_terms(small_model, theta)
        assert abs(sum(terms.values())
                   - total_logposterior(small_model, theta)) < 1e-9
        assert abs(sum(terms.values()) - small_model.logpost(theta)) < 1e-9


def test_all_terms_finite_in_support(small_model):
    g = make_stream(34)
    for _ in range(10):
        theta = small_model.init_theta(g)
        for name, value in logposterior_terms(small_model, theta).items():
            assert math.isfinite(value), name


def test_gumcad_zero_attendee_rows_contribute_zero(small_frame, cal_config,
                                                   small_bundle, tmp_path):
    from evisynth.ingest import load_bundle, write_manifest, write_source_csv
    bundle, manifest_path = small_bundle
    rows = [["BAhet-clinic", "15-34", "male", "London", 2012, 0, 0, 0, 0, 0, 0]]
    write_source_csv("GUMCAD-PREV", rows, tmp_path / "gp.csv")
    write_source_csv("ONS", [[a, s, r, y, 1000]
                             for a in ("15-34", "35-44") for s in ("male", "female")
                             for r in ("London", "outside-London")
                             for y in (2012, 2013)], tmp_path / "pop.csv")
    write_manifest({"ONS": "pop.csv", "GUMCAD-PREV": "gp.csv"},
                   tmp_path / "manifest.json")
    b = load_bundle(tmp_path / "manifest.json", small_frame, cal_config)
    model = build_model(small_frame, b.pop, b.tables, cal_config)
    g = make_stream(35)
    theta = model.init_theta(g)
    assert logposterior_terms(model, theta)["GUMCAD-PREV"] == 0.0


def test_gumcad_prev_rowsum_oracle(small_model, small_bundle):
    """Two-strata synthetic table: the term equals the sum of independently
    computed per-row binomial terms."""
    bundle, _ = small_bundle
    table = bundle.tables["GUMCAD-PREV"]
    term = next(t for t in small_model.terms if t.name == "GUMCAD-PREV")
    g = make_stream(36)
    theta = small_model.init_theta(g)
    prod = small_model.products(theta)
    comps = prod.basic.comps
    cols = table.columns
    expected = 0.0
    for i in range(table.n_rows):
        row = term.comp_rows[i]
        expected += binomial_loglik(int(cols["prev_diag"][i]),
                                    int(cols["attendees"][i]),
                                    float(comps.g1[row]))
        expected += binomial_loglik(int(cols["new_diag"][i]),
                                    int(cols["tested"][i]),
                                    float(comps.g2[row]))
    assert abs(term.value(theta, prod) - expected) < 1e-7
