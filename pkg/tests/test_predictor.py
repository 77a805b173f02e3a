import numpy as np
import pytest

from longipred import kernels, mixedmodel as mm, predictor as pr, simulator as sim
from longipred.cohort import Subject
from longipred.errors import DimensionMismatch, InvalidRequest, UnconvergedModel

from conftest import make_cohort


@pytest.fixture(scope="module")
def fitted():
    c = make_cohort(np.random.default_rng(7), N=15, M=2, followups=(1.0, 2.0, 3.0))
    g = kernels.gram_set(c, kernels.estimate_kernel_params(c))
    return c, g, mm.fit(c, g)


def _new_subject(c, sid="new", age=70.0):
    s = c.subjects[0]
    return Subject(sid, age, s.genotype[::-1].copy(), s.clinical + 0.3, s.features - 0.2, s.baseline_phenotype + 1)


def test_zero_horizon_returns_baseline(fitted):
    c, _, m = fitted
    s = _new_subject(c)
    p = pr.predict(m, pr.PredictionRequest(s, [s.baseline_age]))
    assert np.array_equal(p.rows[0].y_hat, s.baseline_phenotype)


def test_decomposition_identity_is_exact(fitted):
    c, _, m = fitted
    s = _new_subject(c)
    for row in pr.predict(m, pr.PredictionRequest(s, [71.3, 75.0, 80.2])).rows:
        total = s.baseline_phenotype + row.term_pop + row.term_G + row.term_C + row.term_I
        assert np.array_equal(row.y_hat, total)


def test_linear_in_time(fitted):
    c, _, m = fitted
    s = _new_subject(c)
    r1, r2 = pr.predict(m, pr.PredictionRequest(s, [72.0, 75.5])).rows
    assert np.allclose(r2.y_hat - s.baseline_phenotype, (r2.dx / r1.dx) * (r1.y_hat - s.baseline_phenotype), rtol=1e-12)


def test_identical_subject_uses_gram_column(fitted):
    c, g, m = fitted
    j = 4
    t = c.subjects[j]
    twin = Subject("twin", 66.0, t.genotype, t.clinical, t.features, t.baseline_phenotype)
    h = pr.kernel_effects(m, twin)
    for k, name in enumerate("GCI"):
        column = g[name][:, j].copy()
        column[j] -= g.jitter_added[name]  # a new subject sees the raw kernel, not the PSD repair
        for d, dim in enumerate(m.dims):
            assert h[name][d] == pytest.approx(dim.alpha[k] @ column, rel=1e-10, abs=1e-12)


def test_population_only_has_no_kernel_terms(fitted):
    c, _, m = fitted
    s = _new_subject(c)
    row = pr.predict_population_only(m, pr.PredictionRequest(s, [73.0])).rows[0]
    for term in (row.term_G, row.term_C, row.term_I):
        assert np.all(term == 0)
    assert np.array_equal(row.term_pop, 3.0 * m.beta_pop)


def test_population_equals_full_when_kernel_variances_vanish(fitted):
    c, _, m = fitted
    d = m.dims[0]
    zeroed = mm.DimensionFit(d.beta_pop, mm.VarianceComponents(0, 0, 0, d.theta.sigma2), np.zeros_like(d.alpha),
                             d.beta_pop, d.loglik, d.loglik_trace, d.iterations, True)
    m0 = mm.FittedModel([zeroed], m.kernel_params, m.bank_ids, m.bank_genotypes, m.bank_clinical,
                        m.bank_features, m.n_observations, m.dx_range)
    s = Subject("x", 70, c.subjects[0].genotype, c.subjects[0].clinical, c.subjects[0].features, [5.0])
    req = pr.PredictionRequest(s, [72.0, 74.0])
    full = pr.predict(m0, req)
    pop = pr.predict_population_only(m0, req)
    for a, b in zip(full.rows, pop.rows):
        assert np.array_equal(a.y_hat, b.y_hat)


def test_null_scenario_prediction_is_population_trend():
    cohort, truth = sim.simulate(sim.preset("null_h", seed=2))
    train, test = sim.split(cohort, truth)
    m = mm.fit(train, kernels.gram_set(train, kernels.estimate_kernel_params(train)))
    assert np.all(m.dims[0].theta.taus == 0)
    for s in test.subjects[:10]:
        row = pr.predict(m, pr.PredictionRequest(s, [s.baseline_age + 2.0])).rows[0]
        expect = s.baseline_phenotype + 2.0 * m.beta_bar
        assert np.all(np.abs(row.y_hat - expect) <= 1e-6 * np.abs(2.0 * m.beta_bar))


def test_baseline_carry(fitted):
    c, _, _ = fitted
    s = c.subjects[1]
    p = pr.predict_baseline_carry(pr.PredictionRequest(s, [s.baseline_age + 1, s.baseline_age + 4]))
    for row in p.rows:
        assert np.array_equal(row.y_hat, s.baseline_phenotype)


def test_errors(fitted):
    c, _, m = fitted
    s = _new_subject(c)
    with pytest.raises(InvalidRequest):
        pr.predict(m, pr.PredictionRequest(s, [s.baseline_age - 1]))
    bad = Subject("b", 70, [0, 1], s.clinical, s.features, s.baseline_phenotype)
    with pytest.raises(DimensionMismatch):
        pr.predict(m, pr.PredictionRequest(bad, [71]))
    with pytest.raises(InvalidRequest):
        pr.run_method("nope", m, pr.PredictionRequest(s, [71]))
    unconv = mm.fit(c, kernels.gram_set(c, m.kernel_params), mm.FitOptions(max_iter=1))
    with pytest.raises(UnconvergedModel):
        pr.predict(unconv, pr.PredictionRequest(s, [71]))
    assert pr.predict(unconv, pr.PredictionRequest(s, [71]), allow_unconverged=True).rows


def test_extrapolation_warns(fitted):
    c, _, m = fitted
    s = _new_subject(c)
    p = pr.predict(m, pr.PredictionRequest(s, [s.baseline_age + 30]))
    assert p.warnings and "outside" in p.warnings[0]
    assert not pr.predict(m, pr.PredictionRequest(s, [s.baseline_age + 2])).warnings


def test_predictions_csv_layout(fitted):
    c, _, m = fitted
    s = _new_subject(c)
    text = pr.predictions_csv([pr.predict(m, pr.PredictionRequest(s, [72.0]))])
    lines = text.splitlines()
    assert lines[0] == "id,x_t,dim,y_hat,term_pop,term_G,term_C,term_I"
    assert [l.split(",")[2] for l in lines[1:]] == ["1", "2"]
