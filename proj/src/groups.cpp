#include "canon/groups.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "canon/error.hpp"

namespace canon {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

// ---- CyclicElement -----------------------------------------------------------

CyclicElement::CyclicElement(long k_, long n_) : k(k_), n(n_) {
  if (n <= 0) throw Error(Errc::InvalidArgument, "cyclic group order must be positive");
  k %= n;
  if (k < 0) k += n;
}

CyclicElement CyclicElement::compose(const CyclicElement& other) const {
  if (n != other.n) throw Error(Errc::DimensionMismatch, "cyclic elements from different groups");
  return CyclicElement((k + other.k) % n, n);
}

CyclicElement CyclicElement::inverse() const { return CyclicElement((n - k) % n, n); }

double CyclicElement::angle() const {
  return 2.0 * kPi * static_cast<double>(k) / static_cast<double>(n);
}

// ---- SmallMat ------------------------------------------------------------------

SmallMat SmallMat::identity(int dim) {
  SmallMat m = zero(dim);
  for (int i = 0; i < dim; ++i) m(i, i) = 1.0;
  return m;
}

SmallMat SmallMat::zero(int dim) {
  if (dim != 2 && dim != 3) throw Error(Errc::DimensionMismatch, "SmallMat supports dim 2 or 3");
  SmallMat m;
  m.dim = dim;
  m.a.fill(0.0);
  return m;
}

SmallMat SmallMat::mul(const SmallMat& o) const {
  if (dim != o.dim) throw Error(Errc::DimensionMismatch, "matrix dim mismatch");
  SmallMat r = zero(dim);
  for (int i = 0; i < dim; ++i)
    for (int k = 0; k < dim; ++k) {
      const double v = (*this)(i, k);
      for (int j = 0; j < dim; ++j) r(i, j) += v * o(k, j);
    }
  return r;
}

SmallMat SmallMat::transposed() const {
  SmallMat r = zero(dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) r(j, i) = (*this)(i, j);
  return r;
}

double SmallMat::trace() const {
  double t = 0.0;
  for (int i = 0; i < dim; ++i) t += (*this)(i, i);
  return t;
}

double SmallMat::det() const {
  if (dim == 2) return a[0] * a[3] - a[1] * a[2];
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

bool SmallMat::all_finite() const {
  for (int i = 0; i < dim * dim; ++i)
    if (!std::isfinite(a[static_cast<std::size_t>(i)])) return false;
  return true;
}

// ---- RotationMatrix --------------------------------------------------------------

bool RotationMatrix::is_valid(const SmallMat& m, double tol) {
  if (m.dim != 2 && m.dim != 3) return false;
  if (!m.all_finite()) return false;
  const SmallMat gram = m.mul(m.transposed());
  for (int i = 0; i < m.dim; ++i)
    for (int j = 0; j < m.dim; ++j) {
      const double want = i == j ? 1.0 : 0.0;
      if (std::abs(gram(i, j) - want) > tol) return false;
    }
  return std::abs(m.det() - 1.0) <= tol;
}

RotationMatrix RotationMatrix::identity(int dim) {
  return RotationMatrix(SmallMat::identity(dim));
}

RotationMatrix RotationMatrix::from_angle(double theta) {
  SmallMat m = SmallMat::zero(2);
  const double c = std::cos(theta), s = std::sin(theta);
  m(0, 0) = c;
  m(0, 1) = -s;
  m(1, 0) = s;
  m(1, 1) = c;
  return RotationMatrix(m);
}

RotationMatrix RotationMatrix::from_axis_angle(std::array<double, 3> axis, double angle) {
  const double norm = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  if (norm < 1e-12) throw Error(Errc::Degenerate, "axis of zero length");
  const double x = axis[0] / norm, y = axis[1] / norm, z = axis[2] / norm;
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  SmallMat m = SmallMat::zero(3);
  m(0, 0) = t * x * x + c;
  m(0, 1) = t * x * y - s * z;
  m(0, 2) = t * x * z + s * y;
  m(1, 0) = t * x * y + s * z;
  m(1, 1) = t * y * y + c;
  m(1, 2) = t * y * z - s * x;
  m(2, 0) = t * x * z - s * y;
  m(2, 1) = t * y * z + s * x;
  m(2, 2) = t * z * z + c;
  return RotationMatrix(m);
}

RotationMatrix RotationMatrix::from_matrix(const SmallMat& m) {
  if (!is_valid(m))
    throw Error(Errc::InvalidRotation, "matrix is not a rotation within 1e-9");
  return RotationMatrix(m);
}

RotationMatrix RotationMatrix::from_matrix_unchecked(const SmallMat& m) { return RotationMatrix(m); }

RotationMatrix RotationMatrix::compose(const RotationMatrix& o) const {
  if (dim() != o.dim()) throw Error(Errc::DimensionMismatch, "rotation dim mismatch");
  return RotationMatrix(m_.mul(o.m_));
}

double RotationMatrix::angle() const {
  if (dim() == 2) {
    return std::abs(std::atan2(m_(1, 0), m_(0, 0)));
  }
  const double c = std::clamp((trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

// ---- Haar sampling ------------------------------------------------------------

RotationMatrix sample_uniform_rotation(Rng& rng, int dim) {
  if (dim == 2) return RotationMatrix::from_angle(rng.uniform(0.0, 2.0 * kPi));
  if (dim != 3) throw Error(Errc::DimensionMismatch, "sample_uniform_rotation supports dim 2 or 3");
  // Row-wise Gram-Schmidt with the positive-diagonal convention is Haar on
  // O(3); the determinant fix maps the reflection coset onto SO(3). A second
  // orthogonalization pass restores orthogonality lost on ill-conditioned
  // draws (classical GS error grows with the condition number).
  const auto orthonormalize = [](std::array<std::array<double, 3>, 3>& rows) -> bool {
    for (std::size_t r = 0; r < 3; ++r) {
      auto& v = rows[r];
      for (std::size_t p = 0; p < r; ++p) {
        double dot = 0.0;
        for (std::size_t c = 0; c < 3; ++c) dot += v[c] * rows[p][c];
        for (std::size_t c = 0; c < 3; ++c) v[c] -= dot * rows[p][c];
      }
      const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      if (norm < 1e-12) return false;
      for (std::size_t c = 0; c < 3; ++c) v[c] /= norm;
    }
    return true;
  };
  for (;;) {
    std::array<std::array<double, 3>, 3> rows{};
    for (auto& row : rows)
      for (auto& v : row) v = rng.normal();
    if (!orthonormalize(rows)) continue;
    if (!orthonormalize(rows)) continue;
    SmallMat m = SmallMat::zero(3);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    if (m.det() < 0.0)
      for (int c = 0; c < 3; ++c) m(2, c) = -m(2, c);
    return RotationMatrix::from_matrix_unchecked(m);
  }
}

// ---- proper SVD -----------------------------------------------------------------

ProperSvd proper_svd(const SmallMat& f) {
  if (!f.all_finite()) throw Error(Errc::NonFinite, "proper_svd: non-finite entries");
  const int d = f.dim;
  Eigen::MatrixXd mf(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) mf(i, j) = f(i, j);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(mf, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::MatrixXd u = svd.matrixU();
  Eigen::MatrixXd v = svd.matrixV();
  Eigen::VectorXd s = svd.singularValues();
  // Push any reflection into the smallest singular value so both factors
  // land in SO(d).
  if (u.determinant() < 0.0) {
    u.col(d - 1) *= -1.0;
    s(d - 1) *= -1.0;
  }
  if (v.determinant() < 0.0) {
    v.col(d - 1) *= -1.0;
    s(d - 1) *= -1.0;
  }
  SmallMat um = SmallMat::zero(d), vm = SmallMat::zero(d);
  std::vector<double> sv(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) {
    sv[static_cast<std::size_t>(i)] = s(i);
    for (int j = 0; j < d; ++j) {
      um(i, j) = u(i, j);
      vm(i, j) = v(i, j);
    }
  }
  return ProperSvd{RotationMatrix::from_matrix_unchecked(um), std::move(sv),
                   RotationMatrix::from_matrix_unchecked(vm)};
}

// ---- actions -------------------------------------------------------------------

Tensor rotate_points(const Tensor& points, const RotationMatrix& r) {
  if (!points.defined() || points.rank() != 2)
    throw Error(Errc::ShapeMismatch, "rotate_points expects [N,dim]");
  const std::size_t n = points.shape()[0];
  const std::size_t d = points.shape()[1];
  if (static_cast<int>(d) != r.dim())
    throw Error(Errc::DimensionMismatch, "rotate_points: point dim does not match rotation dim");
  std::vector<double> out(n * d, 0.0);
  const auto p = points.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t row = 0; row < d; ++row) {
      double acc = 0.0;
      for (std::size_t col = 0; col < d; ++col)
        acc += r(static_cast<int>(row), static_cast<int>(col)) * p[i * d + col];
      out[i * d + row] = acc;
    }
  return Tensor::from_vector({n, d}, std::move(out));
}

Tensor rotate_image(const Tensor& image, const CyclicElement& g) {
  if (!image.defined() || image.rank() != 3)
    throw Error(Errc::ShapeMismatch, "rotate_image expects [C,H,W]");
  if (image.shape()[1] != image.shape()[2])
    throw Error(Errc::NonSquareImage, "rotate_image needs a square image");
  return rotate_hw(image, g.k, g.n);
}

Tensor rotate_image_angle(const Tensor& image, double radians) {
  if (!image.defined() || image.rank() != 3)
    throw Error(Errc::ShapeMismatch, "rotate_image expects [C,H,W]");
  if (image.shape()[1] != image.shape()[2])
    throw Error(Errc::NonSquareImage, "rotate_image needs a square image");
  return rotate_hw_angle(image, radians);
}

// ---- Gram-Schmidt rotation head ---------------------------------------------------

namespace {

Tensor row_of(const Tensor& m, std::size_t r) { return select_axis(m, 0, r); }

Tensor dot(const Tensor& a, const Tensor& b) { return reduce_sum(mul(a, b), {}); }

Tensor normalize_row(const Tensor& v, const char* which) {
  const Tensor norm2 = dot(v, v);
  if (norm2.item() < 1e-16)
    throw Error(Errc::Degenerate, std::string("gram_schmidt: ") + which + " row has near-zero norm");
  return div(v, sqrt(norm2));
}

Tensor cross3(const Tensor& a, const Tensor& b) {
  auto ax = gather(a, 0), ay = gather(a, 1), az = gather(a, 2);
  auto bx = gather(b, 0), by = gather(b, 1), bz = gather(b, 2);
  std::array<Tensor, 3> parts = {
      sub(mul(ay, bz), mul(az, by)),
      sub(mul(az, bx), mul(ax, bz)),
      sub(mul(ax, by), mul(ay, bx)),
  };
  return stack(parts);
}

}  // namespace

Tensor gram_schmidt_rotation(const Tensor& vectors) {
  if (!vectors.defined() || vectors.rank() != 2 || vectors.shape()[0] != vectors.shape()[1])
    throw Error(Errc::ShapeMismatch, "gram_schmidt_rotation expects a square [d,d] tensor");
  const std::size_t d = vectors.shape()[0];
  if (d != 2 && d != 3) throw Error(Errc::DimensionMismatch, "gram_schmidt_rotation supports dim 2 or 3");
  for (double v : vectors.data())
    if (!std::isfinite(v)) throw Error(Errc::NonFinite, "gram_schmidt_rotation: non-finite input");

  if (d == 2) {
    const Tensor r0 = row_of(vectors, 0);
    const Tensor e0 = normalize_row(r0, "first");
    // perpendicular with det +1: (x, y) -> (-y, x)
    auto x = gather(e0, 0), y = gather(e0, 1);
    std::array<Tensor, 2> e1_parts = {neg(y), x};
    const Tensor e1 = stack(e1_parts);
    std::array<Tensor, 2> rows = {e0, e1};
    return stack(rows);
  }

  const Tensor r0 = row_of(vectors, 0);
  const Tensor r1 = row_of(vectors, 1);
  const Tensor e0 = normalize_row(r0, "first");
  const Tensor u1 = sub(r1, mul(dot(r1, e0), e0));
  const Tensor e1 = normalize_row(u1, "second");
  const Tensor e2 = cross3(e0, e1);
  std::array<Tensor, 3> rows = {e0, e1, e2};
  return stack(rows);
}

RotationMatrix to_rotation(const Tensor& t) {
  if (!t.defined() || t.rank() != 2 || t.shape()[0] != t.shape()[1])
    throw Error(Errc::ShapeMismatch, "to_rotation expects a square tensor");
  const int d = static_cast<int>(t.shape()[0]);
  SmallMat m = SmallMat::zero(d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = t.at(static_cast<std::size_t>(i * d + j));
  return RotationMatrix::from_matrix(m);
}

}  // namespace canon
