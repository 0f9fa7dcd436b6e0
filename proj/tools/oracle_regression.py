#!/usr/bin/env python3
"""Reference values for the linear building blocks (tests/test_regression.cpp).

Small hand-sized designs, computed with plain numpy linear algebra so the
C++ implementations can be checked against an independent route. The same
literal arrays are typed into the tests; run this script to regenerate the
expected numbers (printed with 17 significant digits).
"""
import numpy as np

np.set_printoptions(precision=17)


def p(label, value):
    if np.isscalar(value):
        print(f"{label} = {value:.17g}")
    else:
        flat = np.asarray(value).flatten()
        print(f"{label} = [" + ", ".join(f"{v:.17g}" for v in flat) + "]")


# ---------------------------------------------------------------------------
# 1. Fixed-effects OLS vs dummy-variable regression (9 obs, 3 groups, K=2)
# ---------------------------------------------------------------------------
X = np.array([
    [0.28, -1.10],
    [-0.57, 0.43],
    [1.32, 0.27],
    [-0.90, 1.68],
    [0.05, -0.34],
    [0.77, 0.91],
    [-1.45, -0.62],
    [0.36, 1.25],
    [2.01, -0.88],
])
y = np.array([1.94, -0.42, 3.55, -2.10, 0.66, 2.89, -3.02, 1.48, 5.34])
group = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])

dummies = np.zeros((9, 3))
dummies[np.arange(9), group] = 1.0
full = np.hstack([X, dummies])
coef, *_ = np.linalg.lstsq(full, y, rcond=None)
p("fe_beta", coef[:2])

# Residuals on the un-demeaned scale: y - X beta (group effect retained).
resid_keep = y - X @ coef[:2]
p("fe_resid_keep", resid_keep)

# ---------------------------------------------------------------------------
# 2. Cluster-robust sandwich, 4 observations, 2 clusters, K=2 (const + x)
# ---------------------------------------------------------------------------
X2 = np.array([[1.0, 0.5], [1.0, -1.0], [1.0, 2.0], [1.0, 0.0]])
y2 = np.array([2.3, -0.8, 4.6, 1.2])
cl2 = np.array([0, 0, 1, 1])

bread = np.linalg.inv(X2.T @ X2)
beta2 = bread @ X2.T @ y2
u2 = y2 - X2 @ beta2
meat = np.zeros((2, 2))
for c in np.unique(cl2):
    sc = X2[cl2 == c].T @ u2[cl2 == c]
    meat += np.outer(sc, sc)
crve = bread @ meat @ bread
p("ols4_beta", beta2)
p("crve4", crve)

# HC0: every observation its own cluster.
meat_h = np.zeros((2, 2))
for i in range(4):
    sc = X2[i] * u2[i]
    meat_h += np.outer(sc, sc)
hc0 = bread @ meat_h @ bread
p("hc0_4", hc0)

# ---------------------------------------------------------------------------
# 3. Overidentified 2SLS vs explicit two-pass regression (10 obs, 2 clusters)
# ---------------------------------------------------------------------------
Z3 = np.array([
    [0.9, -0.3],
    [-0.4, 1.1],
    [1.5, 0.2],
    [-1.2, -0.7],
    [0.3, 0.8],
    [0.6, -1.4],
    [-0.8, 0.5],
    [1.1, 1.3],
    [-0.2, -0.9],
    [0.7, 0.4],
])
exog3 = np.array([[1.0], [1.0], [1.0], [1.0], [1.0],
                  [1.0], [1.0], [1.0], [1.0], [1.0]])
endog3 = np.array([0.62, 0.35, 1.80, -1.95, 1.05,
                   -0.52, -0.33, 2.41, -1.10, 1.12])
y3 = np.array([1.35, 0.80, 3.60, -3.75, 2.20,
               -0.95, -0.45, 4.95, -2.05, 2.35])
cl3 = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1])

# First pass: endog on [Z, exog].
F = np.hstack([Z3, exog3])
fs_coef, *_ = np.linalg.lstsq(F, endog3, rcond=None)
fitted = F @ fs_coef
# Second pass: y on [fitted, exog].
W = np.hstack([fitted[:, None], exog3])
coef3 = np.linalg.solve(W.T @ W, W.T @ y3)
p("tsls_first_stage", fs_coef)
p("tsls_coef", coef3)

# Clustered 2SLS sandwich with residuals from the ORIGINAL endog.
u3 = y3 - np.hstack([endog3[:, None], exog3]) @ coef3
bread3 = np.linalg.inv(W.T @ W)
meat3 = np.zeros((2, 2))
for c in np.unique(cl3):
    sc = W[cl3 == c].T @ u3[cl3 == c]
    meat3 += np.outer(sc, sc)
cov3 = bread3 @ meat3 @ bread3
p("tsls_cov", cov3)
