#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "canon/rng.hpp"
#include "canon/tensor.hpp"

namespace canon {

// Element of the cyclic rotation group C_n, k in {0..n-1}.
struct CyclicElement {
  long k = 0;
  long n = 1;

  CyclicElement() = default;
  CyclicElement(long k_, long n_);

  static CyclicElement identity(long n) { return CyclicElement(0, n); }
  CyclicElement compose(const CyclicElement& other) const;
  CyclicElement inverse() const;
  bool is_identity() const { return k == 0; }
  double angle() const;  // 2*pi*k/n
  bool operator==(const CyclicElement&) const = default;
};

// Small dense square matrix (dim 2 or 3), row-major. Shared plumbing for
// rotations and matrix Fisher parameters.
struct SmallMat {
  int dim = 0;
  std::array<double, 9> a{};  // first dim*dim entries used

  static SmallMat identity(int dim);
  static SmallMat zero(int dim);
  double& operator()(int r, int c) { return a[static_cast<std::size_t>(r * dim + c)]; }
  double operator()(int r, int c) const { return a[static_cast<std::size_t>(r * dim + c)]; }
  SmallMat mul(const SmallMat& o) const;
  SmallMat transposed() const;
  double trace() const;
  double det() const;
  std::span<const double> entries() const { return {a.data(), static_cast<std::size_t>(dim * dim)}; }
  bool all_finite() const;
};

// Rotation matrix in SO(2) or SO(3). Construction validates orthogonality
// and det(+1) to 1e-9 unless the factory guarantees them.
class RotationMatrix {
 public:
  static constexpr double kTolerance = 1e-9;

  static RotationMatrix identity(int dim);
  static RotationMatrix from_angle(double theta);  // dim 2
  static RotationMatrix from_axis_angle(std::array<double, 3> axis, double angle);
  static RotationMatrix from_matrix(const SmallMat& m);           // validates
  static RotationMatrix from_matrix_unchecked(const SmallMat& m); // trusted callers
  static bool is_valid(const SmallMat& m, double tol = kTolerance);

  int dim() const { return m_.dim; }
  double operator()(int r, int c) const { return m_(r, c); }
  const SmallMat& matrix() const { return m_; }
  double trace() const { return m_.trace(); }
  RotationMatrix transposed() const { return RotationMatrix(m_.transposed()); }
  RotationMatrix compose(const RotationMatrix& o) const;  // this * o
  // Rotation angle in [0, pi]: |theta| for SO(2), acos((tr-1)/2) for SO(3).
  double angle() const;

 private:
  explicit RotationMatrix(SmallMat m) : m_(m) {}
  SmallMat m_;
};

// Haar-uniform rotation: uniform angle for SO(2); Gram-Schmidt
// orthonormalization of a Gaussian matrix with a determinant fix for SO(3).
RotationMatrix sample_uniform_rotation(Rng& rng, int dim);

// Proper SVD: F = U diag(S) V^T with det(U) = det(V) = +1. S is sorted
// descending; the last entry absorbs any reflection and may be negative.
struct ProperSvd {
  RotationMatrix u;
  std::vector<double> s;
  RotationMatrix v;
  RotationMatrix mode() const { return u.compose(v.transposed()); }
};
ProperSvd proper_svd(const SmallMat& f);

// Row-wise point rotation: each row p -> R p (exact linear action).
Tensor rotate_points(const Tensor& points, const RotationMatrix& r);

// Rotate a [C,H,W] image by a cyclic element about the pixel center
// (H-1)/2. Quarter-turn multiples are exact permutations; other angles use
// bilinear interpolation with zero fill.
Tensor rotate_image(const Tensor& image, const CyclicElement& g);
Tensor rotate_image_angle(const Tensor& image, double radians);

// Differentiable Gram-Schmidt rotation head. Input is a [d,d] tensor whose
// rows are the predicted vectors; rows are orthonormalized in order and the
// final row is replaced to force det = +1 (perpendicular for d=2, cross
// product for d=3). Degenerate inputs (near rank-deficient leading rows)
// raise an error.
Tensor gram_schmidt_rotation(const Tensor& vectors);

// Validated extraction of a rotation matrix from a [d,d] tensor.
RotationMatrix to_rotation(const Tensor& t);

}  // namespace canon
