"""Survival statistics: concordance, horizon AUC, Kaplan-Meier, log-rank,
Cox regression, risk dichotomization, and a by-subject cross-validation
harness.

Conventions used throughout (and mirrored by the brute-force oracles in the
test suite): Harrell's C with 0.5 credit for risk ties; horizon AUC as a
plain binary AUC that drops subjects censored before the horizon; Breslow
handling of tied event times in every partial-likelihood expression; Wald
p-values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import NumericError, UndefinedResultError, ValidationError


def _clean(risk, time, event):
    risk = np.asarray(risk, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    if not (len(risk) == len(time) == len(event)):
        raise ValidationError("risk, time and event must have equal length")
    if event.dtype != bool:
        vals = np.unique(event)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValidationError("event indicators must be 0/1")
        event = event.astype(bool)
    if not np.all(np.isfinite(risk)) or not np.all(np.isfinite(time)):
        raise NumericError("non-finite risk or time values")
    return risk, time, event


def concordance_index(risk, time, event) -> float:
    """Harrell's C.

    A pair (i, j) is comparable when t_i < t_j and subject i had the event;
    it counts 1 if risk_i > risk_j, 0.5 on a risk tie. Pairs tied on time are
    never comparable under this definition.
    """
    risk, time, event = _clean(risk, time, event)
    if len(risk) < 2:
        raise ValidationError("need at least two subjects")
    comparable = (time[:, None] < time[None, :]) & event[:, None]
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise UndefinedResultError("no comparable pairs for concordance")
    higher = int(((risk[:, None] > risk[None, :]) & comparable).sum())
    tied = int(((risk[:, None] == risk[None, :]) & comparable).sum())
    return (higher + 0.5 * tied) / n_comp


def time_dependent_auc(risk, time, event, horizon: float) -> float:
    """Binary AUC of event-by-horizon status.

    Positives: events at or before the horizon. Negatives: subjects still
    under observation at the horizon (event or censoring afterwards).
    Subjects censored strictly before the horizon carry no label and are
    dropped. Risk ties count 0.5.
    """
    risk, time, event = _clean(risk, time, event)
    pos = event & (time <= horizon)
    neg = (time >= horizon) & ~pos
    if not pos.any() or not neg.any():
        raise UndefinedResultError(
            f"horizon {horizon}: need at least one positive and one negative"
        )
    rp, rn = risk[pos][:, None], risk[neg][None, :]
    wins = (rp > rn).sum() + 0.5 * (rp == rn).sum()
    return float(wins / (pos.sum() * neg.sum()))


@dataclass
class KmCurve:
    """Product-limit survival curve over the distinct event times."""

    event_times: np.ndarray      # ascending, distinct times with >= 1 event
    survival: np.ndarray         # S(t) just after each event time
    at_risk: np.ndarray          # n at risk entering each event time
    n_events: np.ndarray         # events at each event time
    censor_times: np.ndarray     # distinct times with >= 1 censoring

    def survival_at(self, t: float) -> float:
        """Right-continuous step evaluation; 1.0 before the first event."""
        idx = np.searchsorted(self.event_times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival[idx - 1])

    def to_frame(self, group: str | None = None) -> pd.DataFrame:
        df = pd.DataFrame({
            "time": self.event_times,
            "survival": self.survival,
            "at_risk": self.at_risk,
            "n_events": self.n_events,
        })
        if group is not None:
            df.insert(0, "group", group)
        return df


def km_estimate(time, event) -> KmCurve:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    if len(time) == 0:
        raise ValidationError("empty sample")
    order = np.argsort(time, kind="stable")
    t, d = time[order], event[order]
    uniq = np.unique(t[d])
    surv, at_risk, n_ev = [], [], []
    s = 1.0
    for u in uniq:
        n_i = int((t >= u).sum())
        d_i = int((d & (t == u)).sum())
        s *= 1.0 - d_i / n_i
        surv.append(s)
        at_risk.append(n_i)
        n_ev.append(d_i)
    return KmCurve(
        event_times=uniq,
        survival=np.asarray(surv),
        at_risk=np.asarray(at_risk, dtype=int),
        n_events=np.asarray(n_ev, dtype=int),
        censor_times=np.unique(t[~d]),
    )


def logrank_test(time_a, event_a, time_b, event_b) -> tuple[float, float]:
    """Two-group log-rank test; returns (chi-square statistic, p-value)."""
    ta = np.asarray(time_a, dtype=float)
    tb = np.asarray(time_b, dtype=float)
    da = np.asarray(event_a).astype(bool)
    db = np.asarray(event_b).astype(bool)
    if len(ta) == 0 or len(tb) == 0:
        raise ValidationError("both groups must be non-empty")
    if not da.any() and not db.any():
        raise UndefinedResultError("no events in either group")
    t_all = np.concatenate([ta, tb])
    d_all = np.concatenate([da, db])
    in_a = np.concatenate([np.ones(len(ta), bool), np.zeros(len(tb), bool)])
    obs = exp = var = 0.0
    for u in np.unique(t_all[d_all]):
        at = t_all >= u
        n = int(at.sum())
        n1 = int((at & in_a).sum())
        d_u = int((d_all & (t_all == u)).sum())
        d1 = int((d_all & (t_all == u) & in_a).sum())
        obs += d1
        exp += d_u * n1 / n
        if n > 1:
            var += d_u * (n1 / n) * (1 - n1 / n) * (n - d_u) / (n - 1)
    if var == 0.0:
        return 0.0, 1.0
    chi2 = (obs - exp) ** 2 / var
    return float(chi2), float(stats.chi2.sf(chi2, df=1))


@dataclass
class SurvivalFit:
    """Cox regression result in hazard-ratio form.

    Per-covariate arrays are aligned with `names`. `converged` is the only
    trust signal: a failed or singular fit is returned flagged, never raised
    past, so callers must check it.
    """

    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    hazard_ratio: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    p_value: np.ndarray
    log_likelihood: float
    n: int
    n_events: int
    converged: bool
    n_iter: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "covariate": self.names,
            "coef": self.coef,
            "se": self.se,
            "HR": self.hazard_ratio,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "p": self.p_value,
        })


def _cox_quantities(x, eta, time, event):
    """Breslow log-likelihood, score and information at linear predictor eta."""
    order = np.argsort(-time, kind="stable")
    xs, ts, ds = x[order], time[order], event[order]
    eta_s = eta[order]
    m = eta_s.max()
    w = np.exp(eta_s - m)
    cum0 = np.cumsum(w)
    cum1 = np.cumsum(w[:, None] * xs, axis=0)
    cum2 = np.cumsum(w[:, None, None] * xs[:, :, None] * xs[:, None, :], axis=0)
    # index of the last entry sharing each row's time, so tied events share
    # the full tied risk set
    neg = -ts
    last = np.searchsorted(neg, neg, side="right") - 1
    ev = np.flatnonzero(ds)
    s0 = cum0[last[ev]]
    s1 = cum1[last[ev]]
    s2 = cum2[last[ev]]
    xbar = s1 / s0[:, None]
    ll = float(np.sum(eta_s[ev] - m - np.log(s0)))
    score = (xs[ev] - xbar).sum(axis=0)
    info = (s2 / s0[:, None, None] - xbar[:, :, None] * xbar[:, None, :]).sum(axis=0)
    return ll, score, info


def cox_partial_loglik(x, coef, time, event) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    ll, _, _ = _cox_quantities(x, x @ np.asarray(coef, dtype=float),
                               np.asarray(time, dtype=float),
                               np.asarray(event).astype(bool))
    return ll


def fit_cox(x, time, event, names: list[str] | None = None,
            max_iter: int = 50, tol: float = 1e-8) -> SurvivalFit:
    """Newton-Raphson Cox fit with step halving.

    Converged means max |score| <= tol within `max_iter` iterations and an
    invertible observed information; anything else comes back flagged.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    _, time, event = _clean(np.zeros(len(x)), time, event)
    n, p = x.shape
    if names is None:
        names = [f"x{j}" for j in range(p)]
    if len(names) != p:
        raise ValidationError("names length must match covariate count")
    if n <= p:
        raise ValidationError(f"need n > p, got n={n}, p={p}")
    if not event.any():
        raise ValidationError("no events; Cox model undefined")
    if np.any(np.ptp(x, axis=0) == 0):
        raise ValidationError("constant covariate column")

    coef = np.zeros(p)
    ll, score, info = _cox_quantities(x, x @ coef, time, event)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(score)) <= tol:
            converged = True
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            break
        new_coef = coef + step
        new_ll, new_score, new_info = _cox_quantities(x, x @ new_coef, time, event)
        halvings = 0
        while (not np.isfinite(new_ll) or new_ll < ll) and halvings < 20:
            step /= 2.0
            new_coef = coef + step
            new_ll, new_score, new_info = _cox_quantities(x, x @ new_coef, time, event)
            halvings += 1
        if not np.isfinite(new_ll):
            break
        coef, ll, score, info = new_coef, new_ll, new_score, new_info
    if not converged and np.max(np.abs(score)) <= tol:
        converged = True

    se = np.full(p, np.nan)
    if converged:
        try:
            se = np.sqrt(np.diag(np.linalg.inv(info)))
        except np.linalg.LinAlgError:
            converged = False
    with np.errstate(invalid="ignore"):
        z = coef / se
        pvals = 2.0 * stats.norm.sf(np.abs(z))
    return SurvivalFit(
        names=list(names),
        coef=coef,
        se=se,
        hazard_ratio=np.exp(coef),
        ci_lower=np.exp(coef - 1.96 * se),
        ci_upper=np.exp(coef + 1.96 * se),
        p_value=pvals,
        log_likelihood=ll,
        n=n,
        n_events=int(event.sum()),
        converged=converged,
        n_iter=it,
    )


def dichotomize_risk(betas_train, betas_eval) -> np.ndarray:
    """Boolean high-risk labels: beta >= median of the training-fold betas.

    With every beta equal the whole eval set lands in the high group; that
    follows from the >= convention and is intentional.
    """
    betas_train = np.asarray(betas_train, dtype=float)
    if len(betas_train) == 0:
        raise ValidationError("empty training betas")
    return np.asarray(betas_eval, dtype=float) >= np.median(betas_train)


def format_mean_sd(values, decimals: int = 4) -> str:
    values = np.asarray(values, dtype=float)
    sd = values.std(ddof=1) if len(values) > 1 else 0.0
    return f"{values.mean():.{decimals}f} ± {sd:.{decimals}f}"


def stratified_event_folds(subject_ids, events, k: int, seed: int = 0,
                           rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Partition subject ids into k folds, balancing the event count.

    Events and censored subjects are shuffled separately and dealt round-robin,
    so every fold's event share is within one subject of every other's.
    """
    subject_ids = np.asarray(subject_ids)
    events = np.asarray(events).astype(bool)
    if len(subject_ids) != len(events):
        raise ValidationError("subject_ids and events must align")
    if len(np.unique(subject_ids)) != len(subject_ids):
        raise ValidationError("duplicate subject ids")
    if k < 2 or k > len(subject_ids):
        raise ValidationError(f"k={k} incompatible with {len(subject_ids)} subjects")
    if rng is None:
        rng = np.random.default_rng(seed)
    folds: list[list] = [[] for _ in range(k)]
    slot = 0
    for mask in (events, ~events):
        for sid in rng.permutation(subject_ids[mask]):
            folds[slot % k].append(sid)
            slot += 1
    return [np.asarray(f) for f in folds]


@dataclass
class CvResult:
    fold_metrics: pd.DataFrame          # fold, c_index, auc
    risk_table: pd.DataFrame            # subject_id, beta, fold, split
    summary: dict[str, str] = field(default_factory=dict)


def cross_validate(subject_ids, times, events, pipeline, k: int = 5,
                   horizon: float | None = None, seed: int = 0) -> CvResult:
    """k-fold by-subject evaluation harness.

    `pipeline(fold, train_ids, test_ids)` must return (betas_train,
    betas_test) aligned with the id arrays it was given. Metrics are computed
    on each test fold and summarized as "mean ± sd" strings.
    """
    subject_ids = np.asarray(subject_ids)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events).astype(bool)
    pos = {sid: i for i, sid in enumerate(subject_ids)}
    folds = stratified_event_folds(subject_ids, events, k, seed)
    rows, table = [], []
    for fold, test_ids in enumerate(folds):
        test_idx = np.asarray([pos[s] for s in test_ids])
        if not events[test_idx].any():
            raise ValidationError(f"fold {fold}: test split has zero events")
        train_ids = np.asarray([s for s in subject_ids if s not in set(test_ids)])
        train_idx = np.asarray([pos[s] for s in train_ids])
        betas_train, betas_test = pipeline(fold, train_ids, test_ids)
        c = concordance_index(betas_test, times[test_idx], events[test_idx])
        row = {"fold": fold, "c_index": c}
        if horizon is not None:
            row["auc"] = time_dependent_auc(betas_test, times[test_idx],
                                            events[test_idx], horizon)
        rows.append(row)
        for ids, betas, split in ((train_ids, betas_train, "train"),
                                  (test_ids, betas_test, "test")):
            for sid, b in zip(ids, betas):
                table.append({"subject_id": sid, "beta": float(b),
                              "fold": fold, "split": split})
    metrics = pd.DataFrame(rows)
    summary = {"c_index": format_mean_sd(metrics["c_index"])}
    if horizon is not None:
        summary["auc"] = format_mean_sd(metrics["auc"])
    return CvResult(metrics, pd.DataFrame(table), summary)


@dataclass
class BiomarkerReport:
    univariate: pd.DataFrame            # covariate, coef, HR, CI, p, retained
    multivariate: SurvivalFit
    km_high: KmCurve
    km_low: KmCurve
    logrank_chi2: float
    logrank_p: float

    def multivariate_frame(self) -> pd.DataFrame:
        return self.multivariate.to_frame()


def biomarker_analysis(betas_train, betas_eval, covariates: pd.DataFrame,
                       times, events, alpha: float = 0.05,
                       high: np.ndarray | None = None) -> BiomarkerReport:
    """Dichotomized-risk biomarker study on held-out subjects.

    The binary high/low-risk label joins each covariate in univariate Cox
    screens; everything with p < alpha enters one multivariate fit. KM curves
    and a log-rank test compare the two risk groups. Pass `high` to supply
    precomputed group labels (e.g. from per-fold thresholds) instead of the
    single train-median split.
    """
    if high is None:
        high = dichotomize_risk(betas_train, betas_eval)
    high = np.asarray(high).astype(float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events).astype(bool)
    cols = {"risk_group": high}
    for name in covariates.columns:
        cols[name] = covariates[name].to_numpy(dtype=float)

    uni_rows = []
    retained = []
    for name, vals in cols.items():
        try:
            fit = fit_cox(vals[:, None], times, events, names=[name])
            ok = fit.converged
        except ValidationError:
            fit, ok = None, False
        if fit is not None and ok:
            keep = bool(fit.p_value[0] < alpha)
            uni_rows.append({"covariate": name, "coef": fit.coef[0],
                             "HR": fit.hazard_ratio[0],
                             "ci_lower": fit.ci_lower[0],
                             "ci_upper": fit.ci_upper[0],
                             "p": fit.p_value[0], "retained": keep})
            if keep:
                retained.append(name)
        else:
            uni_rows.append({"covariate": name, "coef": np.nan, "HR": np.nan,
                             "ci_lower": np.nan, "ci_upper": np.nan,
                             "p": np.nan, "retained": False})
    if not retained:
        raise UndefinedResultError("no covariate passed the univariate screen")
    x = np.column_stack([cols[name] for name in retained])
    multi = fit_cox(x, times, events, names=retained)

    km_high = km_estimate(times[high == 1.0], events[high == 1.0])
    km_low = km_estimate(times[high == 0.0], events[high == 0.0])
    chi2, p = logrank_test(times[high == 1.0], events[high == 1.0],
                           times[high == 0.0], events[high == 0.0])
    return BiomarkerReport(pd.DataFrame(uni_rows), multi, km_high, km_low, chi2, p)


def km_curves_svg(curves: dict[str, KmCurve], path, title: str = "") -> None:
    """Static step-plot rendering of one or more KM curves."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        t = np.concatenate([[0.0], curve.event_times])
        s = np.concatenate([[1.0], curve.survival])
        ax.step(t, s, where="post", label=label)
    ax.set_xlabel("time")
    ax.set_ylabel("survival probability")
    ax.set_ylim(0.0, 1.05)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
