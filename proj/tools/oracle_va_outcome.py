#!/usr/bin/env python3
"""Reference values for the teacher-year variable regressions on
tests/fixtures/fixture_panel.csv + fixture_dvars.csv (tests/test_longrun.cpp).

Recomputes, directly from the formula definitions with numpy: the pooled
no-intercept regression of (possibly leave-year-out) residualized class
means on D, its clustered covariance, the corrected covariance built from
the per-teacher influence terms, and the D'X orthogonality Wald test.
"""
import numpy as np
import pandas as pd
from scipy.stats import chi2

HERE = __file__.rsplit("/", 1)[0]
panel = pd.read_csv(f"{HERE}/../tests/fixtures/fixture_panel.csv")
dvars = pd.read_csv(f"{HERE}/../tests/fixtures/fixture_dvars.csv")


def p(label, value):
    if np.isscalar(value):
        print(f"{label} = {value:.17g}")
    else:
        flat = np.asarray(value).flatten()
        print(f"{label} = [" + ", ".join(f"{v:.17g}" for v in flat) + "]")


# Within-teacher FE fit for the score equation.
X = panel[["x1"]].to_numpy()
y = panel["score"].to_numpy()
Xd = X - panel.groupby("teacher_id")["x1"].transform("mean").to_numpy()[:, None]
yd = y - panel.groupby("teacher_id")["score"].transform("mean").to_numpy()
beta = np.linalg.solve(Xd.T @ Xd, Xd.T @ yd)

order = {t: i for i, t in enumerate(panel["teacher_id"].drop_duplicates())}
cells = (panel.groupby(["teacher_id", "year"], sort=True)
         .agg(rbar_raw=("score", "mean"), xbar=("x1", "mean"))
         .reset_index())
cells = cells.assign(tidx=cells["teacher_id"].map(order))
cells = cells.sort_values(["tidx", "year"]).reset_index(drop=True)
dv = dvars.assign(tidx=dvars["teacher_id"].map(order))

teachers = sorted(cells["tidx"].unique())
J = len(teachers)


def teacher_blocks(leaveout):
    """Per-teacher (D_j, regressand y_j, covariate loadings Xt_j)."""
    out = []
    for j in teachers:
        c = cells[cells["tidx"] == j].sort_values("year")
        d = dv[dv["tidx"] == j].sort_values("year")[["d1", "d2"]].to_numpy()
        rb = c["rbar_raw"].to_numpy()
        xb = c[["xbar"]].to_numpy()
        T = len(rb)
        if leaveout:
            rb = (rb.sum() - rb) / (T - 1)
            xb = (xb.sum(axis=0)[None, :] - xb) / (T - 1)
        out.append((d, rb - xb @ beta, xb))
    return out


# Student-level moment pieces per teacher.
H1, m1 = [], []
for j in teachers:
    tid = [t for t, i in order.items() if i == j][0]
    rows = panel[panel["teacher_id"] == tid]
    Xj = rows[["x1"]].to_numpy()
    Xjd = Xj - Xj.mean(axis=0)
    H1.append(Xjd.T @ Xjd)
    m1.append(Xjd.T @ (rows["score"].to_numpy() - Xj @ beta))
H1bar_inv = np.linalg.inv(sum(H1) / J)

for leaveout in (False, True):
    tag = "leaveout" if leaveout else "plain"
    blocks = teacher_blocks(leaveout)
    DD = sum(d.T @ d for d, _, _ in blocks)
    alpha = np.linalg.solve(DD, sum(d.T @ yv for d, yv, _ in blocks))
    p(f"alpha_{tag}", alpha)

    edx = sum(d.T @ xb for d, _, xb in blocks) / J
    dd_inv = np.linalg.inv(DD)
    meat_naive = np.zeros((2, 2))
    meat_corr = np.zeros((2, 2))
    for (d, yv, xb), h, m in zip(blocks, H1, m1):
        score = d.T @ (yv - d @ alpha)
        meat_naive += np.outer(score, score)
        gamma = score - edx @ (H1bar_inv @ m)
        meat_corr += np.outer(gamma, gamma)
    p(f"naive_cov_{tag}", dd_inv @ meat_naive @ dd_inv)
    p(f"v1_{tag}", dd_inv @ meat_corr @ dd_inv)

# D'X orthogonality Wald test (always on the plain class-mean covariates).
C = []
for j in teachers:
    c = cells[cells["tidx"] == j].sort_values("year")
    d = dv[dv["tidx"] == j].sort_values("year")[["d1", "d2"]].to_numpy()
    cross = d.T @ c[["xbar"]].to_numpy()  # K_d x K
    C.append(cross.flatten(order="F"))
C = np.array(C)
cbar = C.mean(axis=0)
sigma = np.cov(C.T, ddof=1)
stat = J * cbar @ np.linalg.solve(sigma, cbar)
p("dx_stat", stat)
p("dx_dof", float(C.shape[1]))
p("dx_p", chi2.sf(stat, C.shape[1]))
p("dx_cross", cbar)
