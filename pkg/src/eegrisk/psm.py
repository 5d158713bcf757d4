"""Propensity scores, common-support trimming, ratio-targeted cohort
reduction, and covariate balance diagnostics.

The propensity model is a maximum-likelihood logistic regression of
carrier status on standardized age and sex, solved by iteratively
reweighted least squares with a small ridge on the normal equations.
Cohort reduction keeps the treated records with the highest scores so
that controls outnumber treated by the requested ratio; an alternative
greedy nearest-neighbor pairing is available for sensitivity analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import RecordMeta
from .errors import (
    ConvergenceError,
    EmptyInputError,
    ParameterError,
    SeparationError,
    SupportError,
)

TREATED_GROUP = "ACr"
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 50
IRLS_RIDGE = 1e-6
SEPARATION_BOUND = 15.0


@dataclass
class PropensityModel:
    """Fitted logistic model in standardized-covariate space."""

    coef: np.ndarray          # [intercept, age, sex] in log-odds units
    age_mean: float
    age_scale: float
    iterations: int
    log_likelihood: float
    converged: bool

    def design(self, records: list[RecordMeta]) -> np.ndarray:
        age = np.array([r.age for r in records], dtype=np.float64)
        sex = np.array([1.0 if r.sex == "M" else 0.0 for r in records])
        return np.column_stack([
            np.ones(len(records)),
            (age - self.age_mean) / self.age_scale,
            sex,
        ])

    def scores(self, records: list[RecordMeta]) -> np.ndarray:
        return _sigmoid(self.design(records) @ self.coef)


@dataclass
class MatchResult:
    """Outcome of common-support filtering plus ratio trimming."""

    scores: dict[str, float]
    support: tuple[float, float]
    kept_treated: list[str]
    kept_control: list[str]
    dropped_treated: list[str]
    dropped_control: list[str]
    requested_ratio: float
    achieved_ratio: float
    balance: list[dict] = field(default_factory=list)

    @property
    def kept_ids(self) -> set[str]:
        return set(self.kept_treated) | set(self.kept_control)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_likelihood(x: np.ndarray, y: np.ndarray, coef: np.ndarray) -> float:
    """Bernoulli log-likelihood of a logistic model, numerically safe."""
    t = x @ coef
    # log(1 + exp(t)) without overflow
    log1pexp = np.where(t > 30, t, np.log1p(np.exp(np.minimum(t, 30))))
    return float(np.sum(y * t - log1pexp))


def fit_propensity(records: list[RecordMeta]) -> PropensityModel:
    """ML logistic fit of group == ACr on standardized age + sex via IRLS.

    Raises SeparationError when coefficients diverge (perfect
    separation) and ConvergenceError with the iteration trace when the
    log-likelihood fails to settle within the iteration budget.
    """
    if len(records) < 10:
        raise ParameterError(
            f"propensity fit needs >= 10 records, got {len(records)}")
    y = np.array([1.0 if r.group == TREATED_GROUP else 0.0 for r in records])
    if y.min() == y.max():
        raise EmptyInputError("both groups must be present")
    age = np.array([r.age for r in records], dtype=np.float64)
    age_mean = float(age.mean())
    age_scale = float(age.std())
    if age_scale == 0.0:
        age_scale = 1.0
    sex = np.array([1.0 if r.sex == "M" else 0.0 for r in records])
    x = np.column_stack([np.ones(len(records)),
                         (age - age_mean) / age_scale, sex])

    coef = np.zeros(3)
    ll = log_likelihood(x, y, coef)
    trace = [ll]
    converged = False
    iterations = 0
    for iterations in range(1, IRLS_MAX_ITER + 1):
        p = _sigmoid(x @ coef)
        w = p * (1.0 - p)
        xtwx = (x * w[:, None]).T @ x + IRLS_RIDGE * np.eye(x.shape[1])
        grad = x.T @ (y - p)
        coef = coef + np.linalg.solve(xtwx, grad)
        if np.max(np.abs(coef)) > SEPARATION_BOUND:
            raise SeparationError(
                "propensity coefficients diverged (|coef| > "
                f"{SEPARATION_BOUND} in standardized units); groups may be "
                "perfectly separated, review covariates or use a caliper")
        ll_new = log_likelihood(x, y, coef)
        trace.append(ll_new)
        if abs(ll_new - ll) < IRLS_TOL:
            converged = True
            ll = ll_new
            break
        ll = ll_new
    if not converged:
        raise ConvergenceError(
            f"IRLS did not converge in {IRLS_MAX_ITER} iterations",
            trace=trace)
    return PropensityModel(coef=coef, age_mean=age_mean, age_scale=age_scale,
                           iterations=iterations, log_likelihood=ll,
                           converged=True)


def common_support(scores: dict[str, float], groups: dict[str, str]
                   ) -> tuple[tuple[float, float], list[str], list[str]]:
    """Shared-support interval and the ids inside/outside it.

    The interval is [max of the two group minima, min of the two group
    maxima]; records strictly outside are dropped.
    """
    treated = [i for i, g in groups.items() if g == TREATED_GROUP]
    control = [i for i, g in groups.items() if g != TREATED_GROUP]
    if not treated or not control:
        raise EmptyInputError("both groups must be nonempty")
    lo = max(min(scores[i] for i in treated), min(scores[i] for i in control))
    hi = min(max(scores[i] for i in treated), max(scores[i] for i in control))
    if lo > hi:
        raise SupportError(
            f"empty common support: [{lo}, {hi}]; score ranges do not overlap")
    inside = [i for i in scores if lo <= scores[i] <= hi]
    outside = [i for i in scores if not lo <= scores[i] <= hi]
    return (lo, hi), inside, outside


def trim_to_ratio(scores: dict[str, float], groups: dict[str, str],
                  ratio: float) -> MatchResult:
    """Trim the treated group so controls outnumber it by at least `ratio`.

    Keeps the floor(n_control / ratio) treated records with the highest
    propensity scores (ties broken by subject_id ascending); controls
    are untouched. Common support is applied first.
    """
    if ratio < 1:
        raise ParameterError(f"ratio must be >= 1, got {ratio}")
    support, inside, outside = common_support(scores, groups)
    treated = sorted([i for i in inside if groups[i] == TREATED_GROUP])
    control = sorted([i for i in inside if groups[i] != TREATED_GROUP])
    dropped_t = sorted([i for i in outside if groups[i] == TREATED_GROUP])
    dropped_c = sorted([i for i in outside if groups[i] != TREATED_GROUP])
    n_keep = int(len(control) // ratio)
    ranked = sorted(treated, key=lambda i: (-scores[i], i))
    kept_t = sorted(ranked[:n_keep]) if len(treated) > n_keep else treated
    dropped_t += sorted(set(treated) - set(kept_t))
    achieved = len(control) / len(kept_t) if kept_t else float("inf")
    return MatchResult(
        scores=dict(scores), support=support,
        kept_treated=kept_t, kept_control=control,
        dropped_treated=sorted(dropped_t), dropped_control=dropped_c,
        requested_ratio=float(ratio), achieved_ratio=achieved)


def nn_match(scores: dict[str, float], groups: dict[str, str],
             ratio: int) -> MatchResult:
    """Greedy k:1 nearest-neighbor pairing without replacement.

    Treated records (descending score) each claim `ratio` controls
    within a caliper of 0.2 standard deviations of the logit; treated
    records with too few in-caliper controls are dropped. Offered for
    sensitivity analysis; the default trimming strategy reproduces the
    published cohort counts.
    """
    if ratio < 1:
        raise ParameterError(f"ratio must be >= 1, got {ratio}")
    support, inside, outside = common_support(scores, groups)
    logit = {i: float(np.log(scores[i] / (1.0 - scores[i]))) for i in inside}
    caliper = 0.2 * float(np.std(list(logit.values())))
    treated = sorted([i for i in inside if groups[i] == TREATED_GROUP],
                     key=lambda i: (-scores[i], i))
    pool = set(i for i in inside if groups[i] != TREATED_GROUP)
    kept_t, kept_c = [], []
    for t in treated:
        near = sorted(pool, key=lambda c: (abs(logit[c] - logit[t]), c))
        near = [c for c in near if abs(logit[c] - logit[t]) <= caliper]
        if len(near) < ratio:
            continue
        chosen = near[:ratio]
        kept_t.append(t)
        kept_c.extend(chosen)
        pool -= set(chosen)
    kept_t, kept_c = sorted(kept_t), sorted(kept_c)
    all_t = sorted([i for i in groups if groups[i] == TREATED_GROUP])
    all_c = sorted([i for i in groups if groups[i] != TREATED_GROUP])
    achieved = len(kept_c) / len(kept_t) if kept_t else float("inf")
    return MatchResult(
        scores=dict(scores), support=support,
        kept_treated=kept_t, kept_control=kept_c,
        dropped_treated=sorted(set(all_t) - set(kept_t)),
        dropped_control=sorted(set(all_c) - set(kept_c)),
        requested_ratio=float(ratio), achieved_ratio=achieved)


def smd(treated_values: np.ndarray, control_values: np.ndarray) -> float:
    """Standardized mean difference (mean_T - mean_C over the pooled-half
    SD); 0 when both groups are degenerate."""
    t = np.asarray(treated_values, dtype=np.float64)
    c = np.asarray(control_values, dtype=np.float64)
    var_t = t.var(ddof=1) if t.size > 1 else 0.0
    var_c = c.var(ddof=1) if c.size > 1 else 0.0
    denom = np.sqrt((var_t + var_c) / 2.0)
    if denom == 0.0:
        return 0.0
    return float((t.mean() - c.mean()) / denom)


def balance_report(records: list[RecordMeta], result: MatchResult
                   ) -> list[dict]:
    """Per-covariate SMD before and after trimming, with a degenerate flag."""
    by_id = {r.subject_id: r for r in records}
    covariates = {
        "age": lambda r: r.age,
        "sex": lambda r: 1.0 if r.sex == "M" else 0.0,
    }
    before_t = [r for r in records if r.group == TREATED_GROUP]
    before_c = [r for r in records if r.group != TREATED_GROUP]
    if not before_t or not before_c:
        raise EmptyInputError("both groups must be nonempty")
    after_t = [by_id[i] for i in result.kept_treated]
    after_c = [by_id[i] for i in result.kept_control]
    rows = []
    for name, get in covariates.items():
        bt = np.array([get(r) for r in before_t])
        bc = np.array([get(r) for r in before_c])
        at = np.array([get(r) for r in after_t])
        ac = np.array([get(r) for r in after_c])
        degenerate = (bt.var() == 0.0 and bc.var() == 0.0)
        rows.append({
            "covariate": name,
            "smd_before": smd(bt, bc),
            "smd_after": smd(at, ac) if after_t and after_c else float("nan"),
            "degenerate": degenerate,
        })
    return rows


def score_histograms(result: MatchResult, groups: dict[str, str],
                     n_bins: int = 20) -> dict:
    """Propensity-score histograms on shared [0, 1] bin edges, per group,
    before and after trimming (common-support figure data)."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    out = {"edges": edges}
    kept = result.kept_ids
    for label, selector in (
            ("treated_before",
             lambda i: groups[i] == TREATED_GROUP),
            ("control_before",
             lambda i: groups[i] != TREATED_GROUP),
            ("treated_after",
             lambda i: groups[i] == TREATED_GROUP and i in kept),
            ("control_after",
             lambda i: groups[i] != TREATED_GROUP and i in kept)):
        vals = [result.scores[i] for i in result.scores if selector(i)]
        counts, _ = np.histogram(vals, bins=edges)
        out[label] = counts
    return out
