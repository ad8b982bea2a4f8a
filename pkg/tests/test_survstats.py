"""Survival estimators against brute-force oracles and worked examples."""

import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given, strategies as st
from scipy import stats

from fundusrisk.errors import UndefinedResultError, ValidationError
from fundusrisk.survstats import (
    KmCurve,
    biomarker_analysis,
    concordance_index,
    cox_partial_loglik,
    cross_validate,
    dichotomize_risk,
    fit_cox,
    format_mean_sd,
    km_estimate,
    logrank_test,
    stratified_event_folds,
    time_dependent_auc,
)


# ------------------------------------------------------------------ oracles
# Each oracle is a literal transcription of the defining formula, written
# independently of the library code (double loops, explicit risk sets).

def oracle_concordance(risk, time, event):
    num = den = 0.0
    n = len(risk)
    for i in range(n):
        if not event[i]:
            continue
        for j in range(n):
            if time[i] < time[j]:
                den += 1
                if risk[i] > risk[j]:
                    num += 1
                elif risk[i] == risk[j]:
                    num += 0.5
    if den == 0:
        return None
    return num / den


def oracle_auc(risk, time, event, horizon):
    pos = [i for i in range(len(risk)) if event[i] and time[i] <= horizon]
    neg = [i for i in range(len(risk))
           if time[i] >= horizon and not (event[i] and time[i] <= horizon)]
    if not pos or not neg:
        return None
    num = 0.0
    for i in pos:
        for j in neg:
            if risk[i] > risk[j]:
                num += 1
            elif risk[i] == risk[j]:
                num += 0.5
    return num / (len(pos) * len(neg))


def oracle_km(time, event):
    times = sorted({t for t, e in zip(time, event) if e})
    surv = []
    s = 1.0
    for t in times:
        n_at = sum(1 for u in time if u >= t)
        d = sum(1 for u, e in zip(time, event) if e and u == t)
        s *= 1.0 - d / n_at
        surv.append(s)
    return np.array(times), np.array(surv)


def oracle_logrank(ta, ea, tb, eb):
    time = np.concatenate([ta, tb])
    event = np.concatenate([ea, eb]).astype(bool)
    group = np.concatenate([np.zeros(len(ta)), np.ones(len(tb))])
    obs_minus_exp = 0.0
    var = 0.0
    for t in sorted(set(time[event])):
        at = time >= t
        n = at.sum()
        n1 = (at & (group == 0)).sum()
        d = (event & (time == t)).sum()
        d1 = (event & (time == t) & (group == 0)).sum()
        obs_minus_exp += d1 - d * n1 / n
        if n > 1:
            var += d * (n1 / n) * (1 - n1 / n) * (n - d) / (n - 1)
    if var == 0:
        return 0.0, 1.0
    chi2 = obs_minus_exp ** 2 / var
    return chi2, float(stats.chi2.sf(chi2, 1))


def oracle_cox_loglik(x, coef, time, event):
    eta = x @ coef
    total = 0.0
    for i in range(len(time)):
        if event[i]:
            denom = sum(np.exp(eta[j]) for j in range(len(time)) if time[j] >= time[i])
            total += eta[i] - np.log(denom)
    return total


def random_survival(rng, n, tie_prone=False):
    if tie_prone:
        time = rng.integers(1, 5, n).astype(float)
    else:
        time = rng.exponential(1.0, n) + 0.01
    event = rng.random(n) < 0.7
    risk = rng.normal(0, 1, n)
    if tie_prone:
        risk = np.round(risk)  # force risk ties as well
    return risk, time, event


# ------------------------------------------------------------------ C-index

def test_c_index_perfect_ranking():
    time = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
    event = np.ones(5, dtype=int)
    assert concordance_index(-time, time, event) == 1.0


def test_c_index_constant_risk():
    rng = np.random.default_rng(0)
    time = rng.exponential(1, 10)
    assert concordance_index(np.zeros(10), time, np.ones(10)) == 0.5


def test_c_index_matches_oracle():
    rng = np.random.default_rng(1)
    for trial in range(60):
        risk, time, event = random_survival(rng, 8, tie_prone=trial % 2 == 0)
        expect = oracle_concordance(risk, time, event)
        if expect is None:
            with pytest.raises(UndefinedResultError):
                concordance_index(risk, time, event)
        else:
            assert concordance_index(risk, time, event) == expect


def test_c_index_all_censored_undefined():
    with pytest.raises(UndefinedResultError):
        concordance_index(np.arange(4.0), np.arange(1.0, 5.0), np.zeros(4))


def test_c_index_needs_two():
    with pytest.raises(ValidationError):
        concordance_index([1.0], [1.0], [1])


@given(st.integers(0, 5000))
def test_c_index_monotone_transform_invariant(seed):
    rng = np.random.default_rng(seed)
    risk, time, event = random_survival(rng, 8)
    assume(event.any() and len(set(time)) > 1)
    base = concordance_index(risk, time, event)
    assert concordance_index(3.0 * risk + 7.0, time, event) == base
    assert concordance_index(np.exp(risk), time, event) == base


# ------------------------------------------------------------------ AUC

def test_auc_perfect_separation():
    risk = np.array([3.0, 2.0, 0.0, -1.0])
    time = np.array([0.5, 0.9, 3.0, 4.0])
    event = np.array([1, 1, 0, 0])
    assert time_dependent_auc(risk, time, event, horizon=2.0) == 1.0


def test_auc_matches_oracle():
    rng = np.random.default_rng(2)
    checked = 0
    for trial in range(80):
        risk, time, event = random_survival(rng, 9, tie_prone=trial % 2 == 0)
        horizon = float(np.quantile(time, 0.5))
        expect = oracle_auc(risk, time, event, horizon)
        if expect is None:
            with pytest.raises(UndefinedResultError):
                time_dependent_auc(risk, time, event, horizon)
        else:
            assert time_dependent_auc(risk, time, event, horizon) == expect
            checked += 1
    assert checked > 30


def test_auc_event_at_horizon_is_positive():
    # an event exactly at the horizon counts as a positive, not a control
    risk = np.array([2.0, 1.0, 0.0])
    time = np.array([1.0, 2.0, 2.0])
    event = np.array([1, 1, 0])
    # positives {0, 1}, negatives {2}
    assert time_dependent_auc(risk, time, event, horizon=2.0) == 1.0


def test_auc_degenerate_classes_error():
    risk = np.arange(4.0)
    time = np.array([1.0, 2.0, 3.0, 4.0])
    event = np.ones(4)
    with pytest.raises(UndefinedResultError):
        time_dependent_auc(risk, time, event, horizon=10.0)  # nobody left as control


# ------------------------------------------------------------------ KM

def test_km_worked_example():
    curve = km_estimate([1.0, 2.0, 3.0], [1, 0, 1])
    assert np.array_equal(curve.event_times, [1.0, 3.0])
    assert curve.survival == pytest.approx([2.0 / 3.0, 0.0])
    assert np.array_equal(curve.at_risk, [3, 1])
    assert curve.survival_at(0.5) == 1.0
    assert curve.survival_at(1.0) == pytest.approx(2.0 / 3.0)
    assert curve.survival_at(2.5) == pytest.approx(2.0 / 3.0)
    assert curve.survival_at(99.0) == 0.0


def test_km_no_events():
    curve = km_estimate([1.0, 2.0], [0, 0])
    assert len(curve.event_times) == 0
    assert curve.survival_at(5.0) == 1.0
    assert np.array_equal(curve.censor_times, [1.0, 2.0])


def test_km_matches_oracle():
    rng = np.random.default_rng(3)
    for trial in range(60):
        _, time, event = random_survival(rng, 10, tie_prone=trial % 2 == 0)
        times, surv = oracle_km(time, event)
        curve = km_estimate(time, event)
        assert np.array_equal(curve.event_times, times)
        assert np.allclose(curve.survival, surv, rtol=1e-12, atol=1e-12)


def test_km_duplication_invariant():
    rng = np.random.default_rng(4)
    _, time, event = random_survival(rng, 8, tie_prone=True)
    c1 = km_estimate(time, event)
    c2 = km_estimate(np.repeat(time, 2), np.repeat(event, 2))
    assert np.array_equal(c1.event_times, c2.event_times)
    assert np.allclose(c1.survival, c2.survival, atol=1e-12)


@given(st.integers(0, 5000))
def test_km_monotone_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    _, time, event = random_survival(rng, 10, tie_prone=True)
    curve = km_estimate(time, event)
    s = np.concatenate([[1.0], curve.survival])
    assert (np.diff(s) <= 1e-15).all()
    assert (curve.survival >= -1e-15).all() and (curve.survival <= 1.0 + 1e-15).all()


def test_km_frame_schema():
    frame = km_estimate([1.0, 2.0, 3.0], [1, 0, 1]).to_frame("high")
    assert list(frame.columns) == ["group", "time", "survival", "at_risk",
                                   "n_events"]
    assert set(frame["group"]) == {"high"}
    assert frame["n_events"].sum() == 2


# ------------------------------------------------------------------ log-rank

def test_logrank_identical_groups():
    time = np.array([1.0, 2.0, 3.0])
    event = np.array([1, 0, 1])
    chi2, p = logrank_test(time, event, time, event)
    assert chi2 == pytest.approx(0.0, abs=1e-12)
    assert p == pytest.approx(1.0)


def test_logrank_swap_invariant():
    rng = np.random.default_rng(5)
    _, ta, ea = random_survival(rng, 8, tie_prone=True)
    _, tb, eb = random_survival(rng, 6, tie_prone=True)
    c1, p1 = logrank_test(ta, ea, tb, eb)
    c2, p2 = logrank_test(tb, eb, ta, ea)
    assert c1 == pytest.approx(c2, abs=1e-12)
    assert p1 == pytest.approx(p2, abs=1e-12)


def test_logrank_matches_oracle():
    rng = np.random.default_rng(6)
    for trial in range(60):
        _, ta, ea = random_survival(rng, 7, tie_prone=trial % 2 == 0)
        _, tb, eb = random_survival(rng, 5, tie_prone=trial % 2 == 0)
        chi2_o, p_o = oracle_logrank(ta, ea, tb, eb)
        chi2, p = logrank_test(ta, ea, tb, eb)
        assert chi2 == pytest.approx(chi2_o, abs=1e-10)
        assert p == pytest.approx(p_o, abs=1e-10)


def test_logrank_no_events_undefined():
    with pytest.raises(UndefinedResultError):
        logrank_test([1.0, 2.0], [0, 0], [3.0], [0])


def test_logrank_empty_group_rejected():
    with pytest.raises(ValidationError):
        logrank_test([], [], [1.0], [1])


def test_logrank_detects_separation():
    ta = np.array([0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
    tb = np.array([5.0, 6.0, 7.0, 8.0, 9.0, 10.0])
    ones = np.ones(6)
    chi2, p = logrank_test(ta, ones, tb, ones)
    assert p < 0.01


# ------------------------------------------------------------------ cox fitter

def test_cox_loglik_matches_oracle():
    rng = np.random.default_rng(7)
    for trial in range(40):
        n = 8
        x = rng.normal(0, 1, (n, 2))
        time = rng.integers(1, 4, n).astype(float)
        event = rng.random(n) < 0.7
        if not event.any():
            continue
        coef = rng.normal(0, 0.5, 2)
        got = cox_partial_loglik(x, coef, time, event)
        assert got == pytest.approx(oracle_cox_loglik(x, coef, time, event), abs=1e-10)


def test_fit_cox_matches_grid_argmax():
    rng = np.random.default_rng(8)
    x = rng.normal(0, 1, (40, 1))
    eta = 0.8 * x[:, 0]
    time = rng.exponential(np.exp(-eta))
    event = np.ones(40)
    fit = fit_cox(x, time, event)
    assert fit.converged
    grid = np.linspace(fit.coef[0] - 0.05, fit.coef[0] + 0.05, 2001)
    vals = [cox_partial_loglik(x, np.array([g]), time, event) for g in grid]
    assert abs(grid[int(np.argmax(vals))] - fit.coef[0]) < 1e-4


def test_fit_cox_ci_and_hr_invariants():
    rng = np.random.default_rng(9)
    x = rng.normal(0, 1, (60, 2))
    eta = x @ np.array([0.5, -0.25])
    time = rng.exponential(np.exp(-eta))
    event = rng.random(60) < 0.8
    fit = fit_cox(x, time, event, names=["a", "b"])
    assert fit.converged
    assert (fit.hazard_ratio > 0).all()
    assert (fit.ci_lower <= fit.hazard_ratio).all()
    assert (fit.hazard_ratio <= fit.ci_upper).all()
    assert np.allclose(fit.hazard_ratio, np.exp(fit.coef))
    assert fit.n == 60
    assert fit.n_events == int(event.sum())
    frame = fit.to_frame()
    assert list(frame["covariate"]) == ["a", "b"]


def test_fit_cox_loglik_improves_over_null():
    rng = np.random.default_rng(10)
    x = rng.normal(0, 1, (50, 1))
    time = rng.exponential(np.exp(-0.9 * x[:, 0]))
    event = np.ones(50)
    fit = fit_cox(x, time, event)
    null = oracle_cox_loglik(x, np.zeros(1), time, event)
    assert fit.log_likelihood > null
    assert fit.log_likelihood == pytest.approx(
        oracle_cox_loglik(x, fit.coef, time, event), abs=1e-8)


def test_fit_cox_validation_errors():
    rng = np.random.default_rng(11)
    x = rng.normal(0, 1, (10, 1))
    time = rng.exponential(1, 10)
    with pytest.raises(ValidationError):
        fit_cox(x, time, np.zeros(10))  # no events
    with pytest.raises(ValidationError):
        fit_cox(np.ones((10, 1)), time, np.ones(10))  # constant column
    with pytest.raises(ValidationError):
        fit_cox(rng.normal(0, 1, (3, 4)), time[:3], np.ones(3))  # n <= p


def test_fit_cox_flags_singular_information():
    # perfectly collinear columns make the information matrix singular,
    # which must surface as a flagged fit rather than a silent answer
    rng = np.random.default_rng(40)
    x1 = rng.normal(0, 1, (30, 1))
    x = np.hstack([x1, x1])
    time = rng.exponential(np.exp(-0.5 * x1[:, 0]))
    fit = fit_cox(x, time, np.ones(30))
    assert not fit.converged


def test_fit_cox_time_scale_invariant():
    rng = np.random.default_rng(12)
    x = rng.normal(0, 1, (30, 1))
    time = rng.exponential(np.exp(-0.5 * x[:, 0]))
    event = rng.random(30) < 0.8
    f1 = fit_cox(x, time, event)
    f2 = fit_cox(x, 100.0 * time, event)
    assert f1.coef == pytest.approx(f2.coef, abs=1e-6)


# ------------------------------------------------------------------ dichotomize

def test_dichotomize_eval_equals_train():
    rng = np.random.default_rng(13)
    betas = rng.normal(0, 1, 21)
    high = dichotomize_risk(betas, betas)
    assert abs(int(high.sum()) - int((~high).sum())) <= 1


def test_dichotomize_monotone_invariant():
    rng = np.random.default_rng(14)
    train = rng.normal(0, 1, 15)
    ev = rng.normal(0, 1, 9)
    base = dichotomize_risk(train, ev)
    assert np.array_equal(dichotomize_risk(2 * train + 3, 2 * ev + 3), base)


def test_dichotomize_all_equal_all_high():
    assert dichotomize_risk(np.zeros(5), np.zeros(3)).all()


def test_dichotomize_empty_train():
    with pytest.raises(ValidationError):
        dichotomize_risk(np.array([]), np.array([1.0]))


# ------------------------------------------------------------------ folds

@given(st.integers(0, 2000), st.integers(2, 6))
def test_folds_partition_subjects(seed, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(k, 40))
    ids = np.array([f"S{i}" for i in range(n)])
    events = rng.integers(0, 2, n)
    folds = stratified_event_folds(ids, events, k, seed=seed)
    assert len(folds) == k
    pooled = sorted(np.concatenate(folds).tolist())
    assert pooled == sorted(ids.tolist())


def test_folds_balance_events():
    ids = np.array([f"S{i}" for i in range(30)])
    events = np.array([1] * 12 + [0] * 18)
    folds = stratified_event_folds(ids, events, 3, seed=0)
    lookup = dict(zip(ids, events))
    per_fold = [sum(lookup[s] for s in f) for f in folds]
    assert max(per_fold) - min(per_fold) <= 1


def test_folds_deterministic_by_seed():
    ids = np.array([f"S{i}" for i in range(20)])
    events = np.tile([0, 1], 10)
    f1 = stratified_event_folds(ids, events, 4, seed=5)
    f2 = stratified_event_folds(ids, events, 4, seed=5)
    f3 = stratified_event_folds(ids, events, 4, seed=6)
    assert all(np.array_equal(a, b) for a, b in zip(f1, f2))
    assert any(not np.array_equal(a, b) for a, b in zip(f1, f3))


def test_folds_reject_duplicates_and_bad_k():
    ids = np.array(["A", "A", "B"])
    with pytest.raises(ValidationError):
        stratified_event_folds(ids, np.ones(3), 2)
    ids = np.array(["A", "B", "C"])
    with pytest.raises(ValidationError):
        stratified_event_folds(ids, np.ones(3), 1)
    with pytest.raises(ValidationError):
        stratified_event_folds(ids, np.ones(3), 4)


# ------------------------------------------------------------------ cross-validate

def make_cohort(n=40, seed=0):
    rng = np.random.default_rng(seed)
    ids = np.array([f"S{i:03d}" for i in range(n)])
    risk = rng.normal(0, 1, n)
    time = rng.exponential(np.exp(-risk))
    event = (rng.random(n) < 0.8).astype(int)
    return ids, time, event, risk


def test_cross_validate_with_truth_pipeline():
    ids, time, event, risk = make_cohort()
    lookup = dict(zip(ids, risk))

    def pipeline(fold, train_ids, test_ids):
        return (np.array([lookup[s] for s in train_ids]),
                np.array([lookup[s] for s in test_ids]))

    res = cross_validate(ids, time, event, pipeline, k=4, horizon=1.0, seed=0)
    assert set(res.fold_metrics.columns) == {"fold", "c_index", "auc"}
    assert len(res.fold_metrics) == 4
    assert (res.fold_metrics["c_index"] > 0.5).all()
    assert res.fold_metrics["c_index"].mean() > 0.65
    assert list(res.risk_table.columns) == ["subject_id", "beta", "fold", "split"]
    test_rows = res.risk_table[res.risk_table["split"] == "test"]
    assert sorted(test_rows["subject_id"]) == sorted(ids)
    assert "c_index" in res.summary and "±" in res.summary["c_index"]


def test_cross_validate_zero_event_fold_aborts():
    ids = np.array([f"S{i}" for i in range(6)])
    time = np.arange(1.0, 7.0)
    event = np.array([1, 0, 0, 0, 0, 0])

    def pipeline(fold, train_ids, test_ids):
        return np.zeros(len(train_ids)), np.zeros(len(test_ids))

    with pytest.raises(ValidationError):
        cross_validate(ids, time, event, pipeline, k=3, seed=0)


# ------------------------------------------------------------------ formatting

def test_format_mean_sd():
    assert format_mean_sd([0.88, 0.89, 0.885]) == "0.8850 ± 0.0050"
    assert format_mean_sd([0.5]) == "0.5000 ± 0.0000"
    assert format_mean_sd([0.123456, 0.123456], decimals=2) == "0.12 ± 0.00"


# ------------------------------------------------------------------ biomarker

def biomarker_cohort(n=300, seed=0):
    rng = np.random.default_rng(seed)
    age = rng.normal(0, 1, n)
    noise = rng.normal(0, 1, n)
    marker = rng.normal(0, 1, n)
    eta = 1.2 * marker + 0.6 * age
    time = rng.exponential(np.exp(-eta))
    cens = rng.uniform(0, 4, n)
    event = (time <= cens).astype(int)
    obs = np.minimum(time, cens)
    cov = pd.DataFrame({"age": age, "noise": noise})
    return marker, cov, obs, event


def test_biomarker_analysis_strong_signal():
    marker, cov, time, event = biomarker_cohort()
    report = biomarker_analysis(marker[:150], marker[150:], cov.iloc[150:],
                                time[150:], event[150:])
    uni = report.univariate
    assert list(uni.columns) == ["covariate", "coef", "HR", "ci_lower",
                                 "ci_upper", "p", "retained"]
    assert uni.iloc[0]["covariate"] == "risk_group"
    assert bool(uni.iloc[0]["retained"])
    multi = report.multivariate
    assert "risk_group" in multi.names
    i = multi.names.index("risk_group")
    assert multi.hazard_ratio[i] > 1.0
    assert multi.p_value[i] < 0.005
    assert report.logrank_p < 0.01
    # KM of the high-risk group sits below the low-risk group
    t_mid = float(np.median(time[150:]))
    assert report.km_high.survival_at(t_mid) < report.km_low.survival_at(t_mid)


def test_biomarker_sign_agrees_with_logrank_direction():
    marker, cov, time, event = biomarker_cohort(seed=3)
    report = biomarker_analysis(marker[:150], marker[150:], cov.iloc[150:],
                                time[150:], event[150:])
    i = report.univariate.index[report.univariate["covariate"] == "risk_group"][0]
    coef = report.univariate.loc[i, "coef"]
    t_mid = float(np.median(time[150:]))
    below = report.km_high.survival_at(t_mid) < report.km_low.survival_at(t_mid)
    assert (coef > 0) == below


def test_biomarker_accepts_precomputed_labels():
    marker, cov, time, event = biomarker_cohort(seed=4)
    high = dichotomize_risk(marker[:150], marker[150:])
    r1 = biomarker_analysis(marker[:150], marker[150:], cov.iloc[150:],
                            time[150:], event[150:])
    r2 = biomarker_analysis(None, None, cov.iloc[150:],
                            time[150:], event[150:], high=high)
    assert np.array_equal(r1.multivariate.coef, r2.multivariate.coef)


def test_biomarker_nothing_retained():
    rng = np.random.default_rng(5)
    n = 60
    time = rng.exponential(1, n)
    event = (rng.random(n) < 0.7).astype(int)
    cov = pd.DataFrame({"noise": rng.normal(0, 1, n)})
    marker = rng.normal(0, 1, n)
    with pytest.raises(UndefinedResultError):
        biomarker_analysis(marker, marker, cov, time, event, alpha=1e-12)


def test_null_covariates_screened_at_nominal_rate():
    # pure-noise covariates should clear the p<0.05 screen about 5% of the time
    rng = np.random.default_rng(6)
    tested = kept = 0
    for _ in range(40):
        n = 120
        x = rng.normal(0, 1, (n, 1))
        time = rng.exponential(1, n)
        event = (rng.random(n) < 0.8).astype(int)
        fit = fit_cox(x, time, event)
        if fit.converged:
            tested += 1
            kept += int(fit.p_value[0] < 0.05)
    assert tested >= 35
    assert kept <= 7  # binomial(40, 0.05) rarely exceeds this
