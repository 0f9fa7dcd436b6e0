#pragma once

/**
 * \file stats.hpp
 * \brief Small numerical statistics helpers: chi-square tail probabilities
 *        (via the regularized incomplete gamma function) and normal
 *        quantities used for confidence intervals.
 */

namespace vagmm {

/** Regularized lower incomplete gamma P(a, x), a > 0, x >= 0. */
double gamma_p(double a, double x);

/** Upper tail P(X > x) for X ~ chi-square(dof). */
double chi2_tail(double x, int dof);

/** Two-sided normal critical value for nominal 95% intervals. */
inline constexpr double z_975 = 1.959963984540054;

}  // namespace vagmm
