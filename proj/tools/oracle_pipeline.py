#!/usr/bin/env python3
"""Reference values for the VA pipeline and the class-level estimators on
tests/fixtures/fixture_panel.csv (tests/test_va.cpp, tests/test_longrun.cpp).

Everything is recomputed from the CSV with pandas/numpy from the written
formula definitions: within-teacher residualization, class means, the
pooled gap regression (regressors are SUMS of same-gap class means), the
shrunk measure, the no-intercept ratio estimator with a teacher-clustered
sandwich, and pooled leave-out 2SLS with and without year demeaning.
"""
import numpy as np
import pandas as pd

HERE = __file__.rsplit("/", 1)[0]
panel = pd.read_csv(f"{HERE}/../tests/fixtures/fixture_panel.csv")


def p(label, value):
    if np.isscalar(value):
        print(f"{label} = {value:.17g}")
    else:
        flat = np.asarray(value).flatten()
        print(f"{label} = [" + ", ".join(f"{v:.17g}" for v in flat) + "]")


def within_fe(df, ycol):
    """beta-hat from teacher-demeaned OLS; residuals keep the teacher effect."""
    X = df[["x1"]].to_numpy()
    y = df[ycol].to_numpy()
    Xd = X - df.groupby("teacher_id")["x1"].transform("mean").to_numpy()[:, None]
    yd = y - df.groupby("teacher_id")[ycol].transform("mean").to_numpy()
    beta = np.linalg.solve(Xd.T @ Xd, Xd.T @ yd)
    return beta, y - X @ beta


beta, r_resid = within_fe(panel, "score")
beta_y, y_resid = within_fe(panel, "outcome")
p("beta_hat", beta)
p("beta_y_hat", beta_y)

panel = panel.assign(r_resid=r_resid, y_resid=y_resid)
cells = (panel.groupby(["teacher_id", "year"], sort=True)
         .agg(rbar=("r_resid", "mean"), ybar=("y_resid", "mean"),
              xbar=("x1", "mean"), n=("score", "size"))
         .reset_index())
# Teacher-major, year-ascending order with teachers in first-appearance order.
order = {t: i for i, t in enumerate(panel["teacher_id"].drop_duplicates())}
cells = cells.assign(tidx=cells["teacher_id"].map(order))
cells = cells.sort_values(["tidx", "year"]).reset_index(drop=True)

# --- stationary gap regression -------------------------------------------
years = sorted(cells["year"].unique())
gaps = sorted({abs(s - t) for s in years for t in years if s != t})
rows = []
for _, c in cells.iterrows():
    own = cells[cells["tidx"] == c["tidx"]]
    row = []
    for g in gaps:
        row.append(own.loc[(own["year"] - c["year"]).abs() == g, "rbar"].sum())
    rows.append(row)
W = np.array(rows)
rbar = cells["rbar"].to_numpy()
phi = np.linalg.solve(W.T @ W, W.T @ rbar)
p("phi_stationary", phi)

mu_hat = W @ phi
p("mu_hat_first6", mu_hat[:6])

# --- unrestricted (positional leave-out) gap regression -------------------
Z = []
for _, c in cells.iterrows():
    own = cells[(cells["tidx"] == c["tidx"]) & (cells["year"] != c["year"])]
    Z.append(own.sort_values("year")["rbar"].to_numpy())
Z = np.array(Z)
phi_u = np.linalg.solve(Z.T @ Z, Z.T @ rbar)
p("phi_unrestricted", phi_u)

# --- multi-step ratio estimator and clustered naive SE --------------------
ybar = cells["ybar"].to_numpy()
kappa = (ybar @ mu_hat) / (mu_hat @ mu_hat)
p("kappa_hat", kappa)
e = ybar - kappa * mu_hat
meat = 0.0
for t in cells["tidx"].unique():
    m = cells["tidx"] == t
    meat += (mu_hat[m] @ e[m]) ** 2
naive_var = meat / (mu_hat @ mu_hat) ** 2
p("kappa_naive_se", np.sqrt(naive_var))

# --- pooled leave-out 2SLS -------------------------------------------------
# The random-assignment 2SLS works with RAW observed class means (no
# covariate residualization); year effects are handled by demeaning.
raw = (panel.groupby(["teacher_id", "year"], sort=True)
       .agg(rbar=("score", "mean"), ybar=("outcome", "mean"))
       .reset_index())
raw = raw.assign(tidx=raw["teacher_id"].map(order))
raw = raw.sort_values(["tidx", "year"]).reset_index(drop=True)
Zr = []
for _, c in raw.iterrows():
    own = raw[(raw["tidx"] == c["tidx"]) & (raw["year"] != c["year"])]
    Zr.append(own.sort_values("year")["rbar"].to_numpy())
Zr = np.array(Zr)


def tsls(yv, endog, Z, cl):
    fs = np.linalg.solve(Z.T @ Z, Z.T @ endog)
    fit = Z @ fs
    k = (fit @ yv) / (fit @ endog)
    u = yv - k * endog
    meat = sum((fit[cl == c] @ u[cl == c]) ** 2 for c in np.unique(cl))
    return k, np.sqrt(meat / (fit @ fit) ** 2), fs


cl = raw["tidx"].to_numpy()
rbar_raw = raw["rbar"].to_numpy()
ybar_raw = raw["ybar"].to_numpy()
k_raw, se_raw, fs_raw = tsls(ybar_raw, rbar_raw, Zr, cl)
p("tsls_kappa_nodemean", k_raw)
p("tsls_se_nodemean", se_raw)
p("tsls_first_stage_nodemean", fs_raw)

# Year demeaning subtracts the per-year mean from y, endog and each
# instrument column before the same pooled 2SLS.
yr = raw["year"].to_numpy()
def dm(v):
    out = v.astype(float).copy()
    for t in np.unique(yr):
        out[yr == t] -= out[yr == t].mean()
    return out


ybar_d = dm(ybar_raw)
rbar_d = dm(rbar_raw)
Z_d = np.column_stack([dm(Zr[:, k]) for k in range(Zr.shape[1])])
k_dm, se_dm, _ = tsls(ybar_d, rbar_d, Z_d, cl)
p("tsls_kappa_demeaned", k_dm)
p("tsls_se_demeaned", se_dm)

# --- shrinkage sanity -------------------------------------------------------
p("var_rbar", rbar.var(ddof=0))
p("var_muhat", mu_hat.var(ddof=0))
