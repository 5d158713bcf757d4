"""ComBat location/scale harmonization across sites with covariate
preservation.

The model is feature = alpha + X beta + site location/scale effects:
site effects are constrained to a weighted-zero mean over records,
residuals are standardized by the pooled residual scale, per-site
location (gamma) and squared-scale (delta) estimates are shrunk with
parametric empirical Bayes (normal prior for gamma, inverse-gamma for
delta, hyperparameters by method of moments), and the adjusted data is
reassembled with covariate effects restored.

Both the pooled scale and the per-site delta estimates use the 1/n
denominator so that harmonizing an already site-free table is the
identity up to EB noise.
"""

from __future__ import annotations

import csv
import io
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .datamodel import FeatureTable, format_float
from .errors import ParameterError, RosterError, SchemaError

MODEL_VERSION = "combat-model/1"
EB_TOL = 1e-4
EB_MAX_ITER = 100


@dataclass
class HarmonizationModel:
    """Fitted ComBat parameters for a roster of sites.

    delta entries follow the ComBat convention of squared scales; the
    applied per-site scale factor is sqrt(delta_star).
    """

    sites: list[str]
    site_counts: dict[str, int]
    covariates: list[str]
    age_mean: float
    feature_names: list[str]
    alpha: np.ndarray          # [n_features]
    beta: np.ndarray           # [n_covariates, n_features]
    sigma: np.ndarray          # [n_features], pooled residual scale
    gamma_hat: np.ndarray      # [n_sites, n_features]
    delta_hat: np.ndarray      # [n_sites, n_features]
    gamma_star: np.ndarray     # [n_sites, n_features]
    delta_star: np.ndarray     # [n_sites, n_features]
    gamma_bar: np.ndarray      # [n_sites]
    tau2: np.ndarray           # [n_sites]
    lam: np.ndarray            # [n_sites]
    theta: np.ndarray          # [n_sites]
    dropped: list[str] = field(default_factory=list)
    version: str = MODEL_VERSION


def _covariate_matrix(table: FeatureTable, covariates: list[str],
                      age_mean: float) -> np.ndarray:
    cols = []
    for cov in covariates:
        if cov == "age":
            cols.append(table.ages() - age_mean)
        elif cov == "sex":
            cols.append(table.sex01())
        elif cov == "group":
            cols.append((table.group_labels() == "ACr").astype(np.float64))
        else:
            raise ParameterError(f"unknown covariate {cov!r}")
    if not cols:
        return np.zeros((table.n_records, 0))
    return np.column_stack(cols)


def _moment_priors(delta_hat_row: np.ndarray, n_site: int
                   ) -> tuple[float, float, float]:
    """Inverse-gamma (lambda, theta) by noise-corrected method of moments.

    The cross-feature spread of the per-site variance estimates includes
    their own sampling variance (about 2 delta^2 / n for Gaussian data);
    only the excess over that floor reflects real scale effects. When
    there is no excess the prior collapses to a point mass: at 1 if the
    common per-site level is within its sampling band of the pooled
    scale, else at the common level. Returns (lambda, theta,
    point_target); point_target is NaN on the regular path.
    """
    m = float(np.mean(delta_hat_row))
    floor = 2.0 * float(np.mean(delta_hat_row ** 2)) / n_site
    if delta_hat_row.size < 2:
        s2 = 0.0
    else:
        s2 = max(0.0, float(np.var(delta_hat_row, ddof=1)) - floor)
    if s2 <= 0.0:
        level_se = np.sqrt(floor / max(delta_hat_row.size, 1))
        target = m if abs(m - 1.0) > 3.0 * level_se else 1.0
        return np.nan, np.nan, target
    lam = (2.0 * s2 + m ** 2) / s2
    theta = (m * s2 + m ** 3) / s2
    return lam, theta, np.nan


def _eb_site(z_site: np.ndarray, gamma_hat: np.ndarray, delta_hat: np.ndarray,
             gamma_bar: float, tau2: float, lam: float, theta: float,
             delta_target: float) -> tuple[np.ndarray, np.ndarray]:
    """Alternate posterior updates of (gamma*, delta*) for one site."""
    n = z_site.shape[0]
    degenerate_gamma = tau2 <= 0.0
    degenerate_delta = not np.isfinite(lam)
    g = gamma_hat.copy()
    d = delta_hat.copy()
    for _ in range(EB_MAX_ITER):
        if degenerate_gamma:
            g_new = np.full_like(g, gamma_bar)
        else:
            g_new = (tau2 * n * gamma_hat + d * gamma_bar) / (tau2 * n + d)
        if degenerate_delta:
            d_new = np.full_like(d, delta_target)
        else:
            sum2 = np.sum((z_site - g_new[None, :]) ** 2, axis=0)
            d_new = (0.5 * sum2 + theta) / (n / 2.0 + lam - 1.0)
        change = max(float(np.max(np.abs(g_new - g))),
                     float(np.max(np.abs(d_new - d))))
        g, d = g_new, d_new
        if change < EB_TOL:
            break
    return g, d


def fit_combat(table: FeatureTable,
               covariates: list[str] | None = None) -> HarmonizationModel:
    """Fit ComBat site-effect parameters on a multi-site feature table.

    Requires at least two sites with at least three records each.
    Features that are constant across the whole table (or exactly
    explained by the design) are dropped with a warning and recorded.
    """
    covariates = list(covariates) if covariates is not None else ["age", "sex"]
    sites = table.sites
    if len(sites) < 2:
        raise ParameterError(
            "harmonization needs at least 2 sites; with a single site, "
            "bypass harmonization instead")
    site_of = np.array([m.site for m in table.meta])
    counts = {s: int(np.sum(site_of == s)) for s in sites}
    for s, c in counts.items():
        if c < 3:
            raise ParameterError(f"site {s!r} has {c} records; need >= 3")

    age_mean = float(np.mean(table.ages()))
    x_cov = _covariate_matrix(table, covariates, age_mean)
    onehot = np.column_stack([(site_of == s).astype(np.float64)
                              for s in sites])
    design = np.hstack([onehot, x_cov])
    n, n_sites = table.n_records, len(sites)

    y = table.values
    variances = y.var(axis=0)
    keep = variances > 0.0
    coef, *_ = np.linalg.lstsq(design, y[:, keep], rcond=None)
    weights = np.array([counts[s] / n for s in sites])
    alpha = weights @ coef[:n_sites]
    beta = coef[n_sites:]
    resid = y[:, keep] - design @ coef
    sigma2 = np.mean(resid ** 2, axis=0)
    keep_idx = np.nonzero(keep)[0][sigma2 > 0.0]
    kept_names = [table.feature_names[i] for i in keep_idx]
    dropped = [nm for nm in table.feature_names if nm not in set(kept_names)]
    if dropped:
        warnings.warn(
            f"dropping {len(dropped)} constant feature(s): {dropped[:5]}"
            + ("..." if len(dropped) > 5 else ""))
        sub = np.nonzero(sigma2 > 0.0)[0]
        alpha, beta, sigma2 = alpha[sub], beta[:, sub], sigma2[sub]
    sigma = np.sqrt(sigma2)

    fit = alpha[None, :] + x_cov @ beta
    z = (y[:, keep_idx] - fit) / sigma[None, :]

    n_feat = len(kept_names)
    gamma_hat = np.zeros((n_sites, n_feat))
    delta_hat = np.zeros((n_sites, n_feat))
    gamma_star = np.zeros((n_sites, n_feat))
    delta_star = np.zeros((n_sites, n_feat))
    gamma_bar = np.zeros(n_sites)
    tau2 = np.zeros(n_sites)
    lam = np.zeros(n_sites)
    theta = np.zeros(n_sites)
    for si, s in enumerate(sites):
        z_site = z[site_of == s]
        gamma_hat[si] = z_site.mean(axis=0)
        delta_hat[si] = np.mean((z_site - gamma_hat[si][None, :]) ** 2, axis=0)
        gamma_bar[si] = float(np.mean(gamma_hat[si]))
        # Moment estimate of the prior location variance, corrected for
        # the sampling variance of the per-site means; without the
        # correction a refit on already-harmonized data keeps shrinking
        # sampling noise and fit+apply is not approximately idempotent.
        if n_feat > 1:
            raw = float(np.var(gamma_hat[si], ddof=1))
            noise = float(np.mean(delta_hat[si])) / counts[s]
            tau2[si] = max(0.0, raw - noise)
        else:
            tau2[si] = 0.0
        lam[si], theta[si], delta_target = _moment_priors(delta_hat[si],
                                                          counts[s])
        gamma_star[si], delta_star[si] = _eb_site(
            z_site, gamma_hat[si], delta_hat[si],
            gamma_bar[si], tau2[si], lam[si], theta[si], delta_target)

    return HarmonizationModel(
        sites=sites, site_counts=counts, covariates=covariates,
        age_mean=age_mean, feature_names=kept_names,
        alpha=alpha, beta=beta, sigma=sigma,
        gamma_hat=gamma_hat, delta_hat=delta_hat,
        gamma_star=gamma_star, delta_star=delta_star,
        gamma_bar=gamma_bar, tau2=tau2, lam=lam, theta=theta,
        dropped=dropped)


def apply_combat(model: HarmonizationModel, table: FeatureTable
                 ) -> FeatureTable:
    """Remove fitted site effects, preserving covariate effects.

    Every row's site must be in the model roster. The output carries the
    model's retained features; features the fit dropped are removed.
    """
    unknown = sorted({m.site for m in table.meta} - set(model.sites))
    if unknown:
        raise RosterError(f"sites not in fitted roster: {unknown}")
    missing = [nm for nm in model.feature_names
               if nm not in set(table.feature_names)]
    if missing:
        raise SchemaError(f"table lacks fitted features: {missing[:5]}")
    sub = table.select_features(model.feature_names)
    x_cov = _covariate_matrix(sub, model.covariates, model.age_mean)
    fit = model.alpha[None, :] + x_cov @ model.beta
    z = (sub.values - fit) / model.sigma[None, :]
    site_index = {s: i for i, s in enumerate(model.sites)}
    rows = np.array([site_index[m.site] for m in sub.meta])
    adjusted = (z - model.gamma_star[rows]) / np.sqrt(model.delta_star[rows])
    out = adjusted * model.sigma[None, :] + fit
    return FeatureTable(meta=list(sub.meta),
                        feature_names=list(model.feature_names),
                        values=out, missing_mask=sub.missing_mask.copy())


def site_smd(table: FeatureTable) -> dict[str, float]:
    """Max absolute pairwise standardized mean difference between sites,
    per feature. The balance diagnostic for harmonization reports."""
    sites = table.sites
    site_of = np.array([m.site for m in table.meta])
    stats = {}
    for s in sites:
        vals = table.values[site_of == s]
        stats[s] = (vals.mean(axis=0), vals.var(axis=0, ddof=1))
    out = {}
    for fi, name in enumerate(table.feature_names):
        worst = 0.0
        for a in range(len(sites)):
            for b in range(a + 1, len(sites)):
                ma, va = stats[sites[a]][0][fi], stats[sites[a]][1][fi]
                mb, vb = stats[sites[b]][0][fi], stats[sites[b]][1][fi]
                pooled = np.sqrt((va + vb) / 2.0)
                if pooled > 0.0:
                    worst = max(worst, abs(ma - mb) / pooled)
        out[name] = worst
    return out


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def save_model(model: HarmonizationModel, directory: str) -> None:
    """Serialize the model as a versioned CSV bundle for audit."""
    os.makedirs(directory, exist_ok=True)
    _write_csv(os.path.join(directory, "meta.csv"),
               ["key", "value"],
               [["version", model.version],
                ["covariates", "|".join(model.covariates)],
                ["age_mean", format_float(model.age_mean)],
                ["sites", "|".join(model.sites)],
                ["site_counts",
                 "|".join(str(model.site_counts[s]) for s in model.sites)]])
    feat_rows = []
    for i, nm in enumerate(model.feature_names):
        row = [nm, format_float(model.alpha[i])]
        row += [format_float(b) for b in model.beta[:, i]]
        row.append(format_float(model.sigma[i]))
        feat_rows.append(row)
    _write_csv(os.path.join(directory, "features.csv"),
               ["feature", "alpha"]
               + [f"beta_{c}" for c in model.covariates] + ["sigma"],
               feat_rows)
    site_rows = []
    for si, s in enumerate(model.sites):
        for i, nm in enumerate(model.feature_names):
            site_rows.append([
                s, nm,
                format_float(model.gamma_hat[si, i]),
                format_float(model.delta_hat[si, i]),
                format_float(model.gamma_star[si, i]),
                format_float(model.delta_star[si, i]),
            ])
    _write_csv(os.path.join(directory, "site_params.csv"),
               ["site", "feature", "gamma_hat", "delta_hat",
                "gamma_star", "delta_star"], site_rows)
    _write_csv(os.path.join(directory, "priors.csv"),
               ["site", "gamma_bar", "tau2", "lambda", "theta"],
               [[s, format_float(model.gamma_bar[si]),
                 format_float(model.tau2[si]), format_float(model.lam[si]),
                 format_float(model.theta[si])]
                for si, s in enumerate(model.sites)])
    _write_csv(os.path.join(directory, "dropped.csv"), ["feature"],
               [[nm] for nm in model.dropped])


def load_model(directory: str) -> HarmonizationModel:
    def read(name):
        with open(os.path.join(directory, name), encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        return rows[0], rows[1:]

    _, meta_rows = read("meta.csv")
    meta = {k: v for k, v in meta_rows}
    if meta.get("version") != MODEL_VERSION:
        raise SchemaError(
            f"unsupported model version {meta.get('version')!r}")
    covariates = meta["covariates"].split("|")
    sites = meta["sites"].split("|")
    counts = {s: int(c) for s, c in
              zip(sites, meta["site_counts"].split("|"))}
    _, feat_rows = read("features.csv")
    names = [r[0] for r in feat_rows]
    alpha = np.array([float(r[1]) for r in feat_rows])
    beta = np.array([[float(v) for v in r[2:-1]] for r in feat_rows]).T
    sigma = np.array([float(r[-1]) for r in feat_rows])
    n_sites, n_feat = len(sites), len(names)
    gamma_hat = np.zeros((n_sites, n_feat))
    delta_hat = np.zeros((n_sites, n_feat))
    gamma_star = np.zeros((n_sites, n_feat))
    delta_star = np.zeros((n_sites, n_feat))
    site_index = {s: i for i, s in enumerate(sites)}
    feat_index = {nm: i for i, nm in enumerate(names)}
    _, site_rows = read("site_params.csv")
    for s, nm, gh, dh, gs, ds in site_rows:
        si, fi = site_index[s], feat_index[nm]
        gamma_hat[si, fi] = float(gh)
        delta_hat[si, fi] = float(dh)
        gamma_star[si, fi] = float(gs)
        delta_star[si, fi] = float(ds)
    _, prior_rows = read("priors.csv")
    gamma_bar = np.zeros(n_sites)
    tau2 = np.zeros(n_sites)
    lam = np.zeros(n_sites)
    theta = np.zeros(n_sites)
    for s, gb, t2, la, th in prior_rows:
        si = site_index[s]
        gamma_bar[si], tau2[si] = float(gb), float(t2)
        lam[si], theta[si] = float(la), float(th)
    _, dropped_rows = read("dropped.csv")
    return HarmonizationModel(
        sites=sites, site_counts=counts, covariates=covariates,
        age_mean=float(meta["age_mean"]), feature_names=names,
        alpha=alpha, beta=beta, sigma=sigma,
        gamma_hat=gamma_hat, delta_hat=delta_hat,
        gamma_star=gamma_star, delta_star=delta_star,
        gamma_bar=gamma_bar, tau2=tau2, lam=lam, theta=theta,
        dropped=[r[0] for r in dropped_rows])
