#include "canon/matrix_fisher.hpp"

#include <cmath>

#include "canon/error.hpp"

namespace canon {

namespace {

constexpr double kPi = 3.14159265358979323846;

double simpson(double a, double fa, double b, double fb, double fm) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

double adaptive_step(const std::function<double(double)>& f, double a, double fa, double b,
                     double fb, double m, double fm, double whole, double tol, int depth) {
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson(a, fa, m, fm, flm);
  const double right = simpson(m, fm, b, fb, frm);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return adaptive_step(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) +
         adaptive_step(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol) {
  // Seed panels so narrow peaks inside long intervals are not missed.
  const int panels = 32;
  const double h = (b - a) / panels;
  double total = 0.0;
  for (int i = 0; i < panels; ++i) {
    const double x0 = a + i * h, x1 = x0 + h, xm = 0.5 * (x0 + x1);
    const double f0 = f(x0), f1 = f(x1), fm = f(xm);
    const double whole = simpson(x0, f0, x1, f1, fm);
    total += adaptive_step(f, x0, f0, x1, f1, xm, fm, whole, tol / panels, 48);
  }
  return total;
}

// ---- params ---------------------------------------------------------------------

MatrixFisherParams MatrixFisherParams::isotropic(RotationMatrix mode, double s) {
  if (s < 0.0) throw Error(Errc::NegativeConcentration, "matrix Fisher concentration must be >= 0");
  return MatrixFisherParams{std::move(mode), s, std::nullopt};
}

MatrixFisherParams MatrixFisherParams::from_parameter_matrix(const SmallMat& f) {
  const ProperSvd svd = proper_svd(f);
  double mean_s = 0.0;
  for (double v : svd.s) mean_s += v;
  mean_s /= static_cast<double>(svd.s.size());
  if (mean_s < 0.0)
    throw Error(Errc::NegativeConcentration, "parameter matrix implies negative concentration");
  MatrixFisherParams params{svd.mode(), mean_s, f};
  return params;
}

PriorDistribution PriorDistribution::discrete_delta(long group_order) {
  PriorDistribution p;
  p.kind = Kind::DiscreteDelta;
  p.identity = CyclicElement::identity(group_order);
  return p;
}

PriorDistribution PriorDistribution::matrix_fisher(MatrixFisherParams params) {
  PriorDistribution p;
  p.kind = Kind::MatrixFisher;
  p.fisher = std::move(params);
  return p;
}

// ---- normalizer and mean coefficient -----------------------------------------------

namespace {

void check_s_dim(double s, int dim) {
  if (s < 0.0) throw Error(Errc::NegativeConcentration, "concentration must be >= 0");
  if (dim != 2 && dim != 3) throw Error(Errc::DimensionMismatch, "matrix Fisher supports dim 2 or 3");
}

// The trace over SO(2) at relative angle theta is 2 cos(theta); over SO(3)
// at rotation angle w it is 1 + 2 cos(w). Both integrands are exponentially
// shifted by the maximal trace so they stay in [0, 1].

double shifted_mass_2(double s) {
  return adaptive_simpson([s](double t) { return std::exp(2.0 * s * (std::cos(t) - 1.0)); }, 0.0,
                          2.0 * kPi, 1e-13) /
         (2.0 * kPi);
}

double shifted_mass_3(double s) {
  return adaptive_simpson(
             [s](double w) { return std::exp(2.0 * s * (std::cos(w) - 1.0)) * (1.0 - std::cos(w)); },
             0.0, kPi, 1e-13) /
         kPi;
}

}  // namespace

double mf_log_normalizer(double s, int dim) {
  check_s_dim(s, dim);
  if (dim == 2) return 2.0 * s + std::log(shifted_mass_2(s));
  return 3.0 * s + std::log(shifted_mass_3(s));
}

double mf_mean_coefficient(double s, int dim) {
  check_s_dim(s, dim);
  if (dim == 2) {
    const double denom = shifted_mass_2(s);
    const double num =
        adaptive_simpson(
            [s](double t) { return 2.0 * std::cos(t) * std::exp(2.0 * s * (std::cos(t) - 1.0)); },
            0.0, 2.0 * kPi, 1e-13) /
        (2.0 * kPi);
    return num / denom;
  }
  const double denom = shifted_mass_3(s);
  const double num =
      adaptive_simpson(
          [s](double w) {
            return (1.0 + 2.0 * std::cos(w)) * std::exp(2.0 * s * (std::cos(w) - 1.0)) *
                   (1.0 - std::cos(w));
          },
          0.0, kPi, 1e-13) /
      kPi;
  return num / denom;
}

double mf_logpdf(const RotationMatrix& r, const MatrixFisherParams& params) {
  if (r.dim() != params.dim())
    throw Error(Errc::DimensionMismatch, "mf_logpdf: rotation and parameter dims differ");
  if (!RotationMatrix::is_valid(r.matrix()))
    throw Error(Errc::InvalidRotation, "mf_logpdf: argument is not a rotation");
  const double rel_trace = params.mode.transposed().compose(r).trace();
  return params.concentration * rel_trace - mf_log_normalizer(params.concentration, params.dim());
}

double mf_cross_entropy(const MatrixFisherParams& p, const MatrixFisherParams& q) {
  if (p.dim() != q.dim())
    throw Error(Errc::DimensionMismatch, "mf_cross_entropy: parameter dims differ");
  const double align = p.mode.transposed().compose(q.mode).trace();
  // E[R] = (N(s)/dim) Rhat: N(s) is the derivative of log c through the full
  // trace, which sums dim identical diagonal contributions. On SO(2) this
  // reduces to the von Mises mean resultant I1(2s)/I0(2s).
  const double mean_coef = mf_mean_coefficient(q.concentration, q.dim()) / q.dim();
  // The normalizer enters with a minus sign: log p = s_p tr(...) - log c(s_p).
  return mean_coef * p.concentration * align - mf_log_normalizer(p.concentration, p.dim());
}

}  // namespace canon
