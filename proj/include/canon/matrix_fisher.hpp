#pragma once

#include <functional>
#include <optional>

#include "canon/groups.hpp"

namespace canon {

// Isotropic matrix Fisher distribution on SO(2)/SO(3):
//   p(R | Rhat, s) = exp(s tr(Rhat^T R)) / c(s)
// with the Haar measure normalized to total mass 1, so c(0) = 1.
struct MatrixFisherParams {
  RotationMatrix mode;     // Rhat
  double concentration;    // s >= 0
  std::optional<SmallMat> parameter_matrix;  // F, when constructed from one

  static MatrixFisherParams isotropic(RotationMatrix mode, double s);
  // General F: mode and concentration via proper SVD (mode = U V^T,
  // concentration = mean singular value, the isotropic projection).
  static MatrixFisherParams from_parameter_matrix(const SmallMat& f);

  int dim() const { return mode.dim(); }
};

// Prior over group elements used by the canonicalization losses: a point
// mass on the identity for discrete groups, or a matrix Fisher centred at
// the identity for continuous ones.
struct PriorDistribution {
  enum class Kind { DiscreteDelta, MatrixFisher };
  Kind kind = Kind::DiscreteDelta;
  CyclicElement identity;                 // discrete case; mass 1 at k = 0
  std::optional<MatrixFisherParams> fisher;  // continuous case

  static PriorDistribution discrete_delta(long group_order);
  static PriorDistribution matrix_fisher(MatrixFisherParams params);
};

// log c(s): log of the normalizing constant under unit-mass Haar measure.
// dim 2 reduces to an angle integral with tr = 2 cos(theta); dim 3 uses the
// rotation-angle marginal with Haar weight (1 - cos w)/pi on [0, pi].
double mf_log_normalizer(double s, int dim);

// N(s) = d log c / ds, computed as a ratio of two quadratures of the
// differentiated integrand (not by finite differences). N(0) = 0 and
// E[R] = N(s) Rhat.
double mf_mean_coefficient(double s, int dim);

// s tr(Rhat^T R) - log c(s)
double mf_logpdf(const RotationMatrix& r, const MatrixFisherParams& params);

// Closed-form cross-entropy between isotropic matrix Fisher distributions:
//   E_{R~q}[log p(R)] = N(s_q) s_p tr(Rhat_p^T Rhat_q) - log c(s_p)
double mf_cross_entropy(const MatrixFisherParams& p, const MatrixFisherParams& q);

// Adaptive Simpson quadrature (exposed for tests and oracles).
double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double tol = 1e-12);

}  // namespace canon
