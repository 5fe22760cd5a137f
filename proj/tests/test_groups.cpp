#include "canon/groups.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "canon/datasets.hpp"
#include "canon/error.hpp"
#include "canon/rng.hpp"
#include "canon/tensor.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace canon;

namespace {
constexpr double kPi = 3.14159265358979323846;

SmallMat to_small(const Tensor& t) {
  const int d = static_cast<int>(t.shape()[0]);
  SmallMat m = SmallMat::zero(d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = t.at(static_cast<std::size_t>(i * d + j));
  return m;
}

Tensor from_small(const SmallMat& m) {
  std::vector<double> v(m.entries().begin(), m.entries().end());
  return Tensor::from_vector({static_cast<std::size_t>(m.dim), static_cast<std::size_t>(m.dim)}, v);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_CASE("cyclic group laws hold exhaustively for n <= 16") {
  for (long n = 1; n <= 16; ++n) {
    for (long a = 0; a < n; ++a) {
      const CyclicElement ea(a, n);
      CHECK(ea.compose(CyclicElement::identity(n)) == ea);
      CHECK(ea.compose(ea.inverse()).is_identity());
      for (long b = 0; b < n; ++b) {
        const CyclicElement eb(b, n);
        const CyclicElement ab = ea.compose(eb);
        CHECK(ab.n == n);
        CHECK(ab.k == (a + b) % n);  // closure
        for (long c = 0; c < n; ++c) {
          const CyclicElement ec(c, n);
          CHECK(ea.compose(eb).compose(ec) == ea.compose(eb.compose(ec)));
        }
      }
    }
  }
  CHECK(CyclicElement(-3, 8).k == 5);  // normalization
  CHECK_THROWS_AS(CyclicElement(0, 0), Error);
}

TEST_CASE("rotation matrix invariants and validation") {
  const RotationMatrix r2 = RotationMatrix::from_angle(0.7);
  CHECK(RotationMatrix::is_valid(r2.matrix()));
  CHECK(r2.angle() == doctest::Approx(0.7));

  const RotationMatrix r3 = RotationMatrix::from_axis_angle({1, 2, -1}, 1.1);
  CHECK(RotationMatrix::is_valid(r3.matrix()));
  CHECK(r3.angle() == doctest::Approx(1.1));

  SmallMat bad = SmallMat::identity(3);
  bad(0, 0) = 1.5;
  CHECK_THROWS_AS(RotationMatrix::from_matrix(bad), Error);

  SmallMat reflect = SmallMat::identity(3);
  reflect(2, 2) = -1.0;  // orthogonal but det -1
  CHECK_THROWS_AS(RotationMatrix::from_matrix(reflect), Error);
}

TEST_CASE("rotate_image identity, involution, exact permutations") {
  Rng rng(41);
  std::vector<double> img(1 * 9 * 9);
  for (auto& v : img) v = rng.uniform();
  const Tensor x = Tensor::from_vector({1, 9, 9}, img);

  const Tensor same = rotate_image(x, CyclicElement(0, 4));
  CHECK(max_abs_diff(same.data(), x.data()) == 0.0);

  // 180 degrees twice is exactly the original
  const Tensor once = rotate_image(x, CyclicElement(2, 4));
  const Tensor twice = rotate_image(once, CyclicElement(2, 4));
  CHECK(max_abs_diff(twice.data(), x.data()) == 0.0);

  // composition law for quarter turns, bit-exact
  for (long k1 = 0; k1 < 4; ++k1)
    for (long k2 = 0; k2 < 4; ++k2) {
      const Tensor lhs = rotate_image(rotate_image(x, CyclicElement(k1, 4)), CyclicElement(k2, 4));
      const Tensor rhs = rotate_image(x, CyclicElement(k1 + k2, 4));
      CHECK(max_abs_diff(lhs.data(), rhs.data()) == 0.0);
    }

  // quarter turns preserve the pixel multiset exactly
  auto sorted = [](std::span<const double> d) {
    std::vector<double> v(d.begin(), d.end());
    std::sort(v.begin(), v.end());
    return v;
  };
  const Tensor q = rotate_image(x, CyclicElement(1, 4));
  CHECK(sorted(q.data()) == sorted(x.data()));

  CHECK_THROWS_AS(rotate_image(Tensor::zeros({1, 3, 4}), CyclicElement(1, 4)), Error);
}

namespace {

// Max abs round-trip error of eight 45-degree rotations over the inscribed
// disc (corners leave the frame under 45-degree rotations).
double eight_step_roundtrip_error(const Tensor& image, std::size_t size) {
  const double center = (static_cast<double>(size) - 1.0) / 2.0;
  const double radius = static_cast<double>(size) / 2.0 - 2.0;
  Tensor y = image;
  for (int step = 0; step < 8; ++step) y = rotate_image(y, CyclicElement(1, 8));
  double worst = 0.0;
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      const double dr = static_cast<double>(r) - center, dc = static_cast<double>(c) - center;
      if (std::sqrt(dr * dr + dc * dc) > radius) continue;
      worst = std::max(worst, std::abs(image.data()[r * size + c] - y.data()[r * size + c]));
    }
  return worst;
}

}  // namespace

TEST_CASE("eight C8 steps approximately return the original image") {
  // Bounds measured empirically on 100 random 28x28 unit-range images and
  // frozen. Bandlimited content (Gaussian blob mixtures) measured 0.136;
  // sharp-edged glyphs measured 0.61 because bilinear resampling blurs
  // edges. Both populations are pinned as regression bounds.
  const std::size_t size = 28;
  Rng rng(777);
  double worst_smooth = 0.0;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> img(size * size, 0.0);
    const int blobs = 3 + static_cast<int>(rng.below(4));
    for (int b = 0; b < blobs; ++b) {
      const double cr = rng.uniform(6, 22), cc = rng.uniform(6, 22);
      const double sig = rng.uniform(2.5, 5.0), amp = rng.uniform(0.3, 1.0);
      for (std::size_t r = 0; r < size; ++r)
        for (std::size_t c = 0; c < size; ++c) {
          const double dr = static_cast<double>(r) - cr, dc = static_cast<double>(c) - cc;
          img[r * size + c] += amp * std::exp(-(dr * dr + dc * dc) / (2 * sig * sig));
        }
    }
    double mx = 0.0;
    for (double v : img) mx = std::max(mx, v);
    for (auto& v : img) v /= std::max(1.0, mx);
    worst_smooth =
        std::max(worst_smooth, eight_step_roundtrip_error(Tensor::from_vector({1, size, size}, img), size));
  }
  CHECK(worst_smooth <= 0.15);

  const ImageDataset data = generate_toy_images(4242, 100, 10, size);
  double worst_glyph = 0.0;
  for (std::size_t i = 0; i < data.count; ++i)
    worst_glyph = std::max(worst_glyph, eight_step_roundtrip_error(data.image(i), size));
  CHECK(worst_glyph <= 0.65);
}

TEST_CASE("rotate_points is the exact linear action") {
  Rng rng(43);
  std::vector<double> pts(30);
  for (auto& v : pts) v = rng.uniform(-1, 1);
  const Tensor p = Tensor::from_vector({10, 3}, pts);

  const Tensor same = rotate_points(p, RotationMatrix::identity(3));
  CHECK(max_abs_diff(same.data(), p.data()) == 0.0);

  for (int trial = 0; trial < 1000; ++trial) {
    const RotationMatrix r = sample_uniform_rotation(rng, 3);
    const Tensor rotated = rotate_points(p, r);
    const Tensor back = rotate_points(rotated, r.transposed());
    CHECK(max_abs_diff(back.data(), p.data()) <= 1e-12);
    // norms preserved
    for (std::size_t i = 0; i < 10; ++i) {
      double n0 = 0, n1 = 0;
      for (std::size_t d = 0; d < 3; ++d) {
        n0 += p.data()[i * 3 + d] * p.data()[i * 3 + d];
        n1 += rotated.data()[i * 3 + d] * rotated.data()[i * 3 + d];
      }
      CHECK(std::abs(std::sqrt(n0) - std::sqrt(n1)) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(rotate_points(p, RotationMatrix::identity(2)), Error);
}

TEST_CASE("uniform rotations satisfy invariants and Haar statistics") {
  Rng rng(47);
  for (int i = 0; i < 200; ++i) {
    CHECK(RotationMatrix::is_valid(sample_uniform_rotation(rng, 3).matrix()));
    CHECK(RotationMatrix::is_valid(sample_uniform_rotation(rng, 2).matrix()));
  }

  // E[tr R] = 0 under Haar; Var(tr) = 1, so 1e5 samples give s.e. ~3e-3.
  double sum5 = 0.0;
  Rng rng2(48);
  for (int i = 0; i < 100000; ++i) sum5 += sample_uniform_rotation(rng2, 3).trace();
  CHECK(std::abs(sum5 / 1e5) <= 0.02);
  // the same statistic at 1e6 samples pins the oracle more tightly
  double sum6 = sum5;
  for (int i = 100000; i < 1000000; ++i) sum6 += sample_uniform_rotation(rng2, 3).trace();
  CHECK(std::abs(sum6 / 1e6) <= 0.01);
}

TEST_CASE("rotation angle histogram matches the Haar density (1-cos w)/pi") {
  Rng rng(53);
  const int bins = 20;
  const int samples = 100000;
  std::vector<double> counts(bins, 0.0);
  for (int i = 0; i < samples; ++i) {
    const double w = sample_uniform_rotation(rng, 3).angle();
    const int b = std::min(bins - 1, static_cast<int>(w / kPi * bins));
    counts[static_cast<std::size_t>(b)] += 1.0;
  }
  double chi2 = 0.0;
  for (int b = 0; b < bins; ++b) {
    const double lo = kPi * b / bins, hi = kPi * (b + 1) / bins;
    // integral of (1-cos w)/pi over the bin
    const double prob = ((hi - std::sin(hi)) - (lo - std::sin(lo))) / kPi;
    const double expected = prob * samples;
    chi2 += (counts[static_cast<std::size_t>(b)] - expected) *
            (counts[static_cast<std::size_t>(b)] - expected) / expected;
  }
  CHECK(chi2 < oracle::chi2_crit_p01(bins - 1));  // p > 0.01
}

TEST_CASE("gram_schmidt_rotation fixed points and hand example") {
  Rng rng(59);
  for (int trial = 0; trial < 20; ++trial) {
    const RotationMatrix r = sample_uniform_rotation(rng, 3);
    const Tensor out = gram_schmidt_rotation(from_small(r.matrix()));
    CHECK(max_abs_diff(out.data(), from_small(r.matrix()).data()) <= 1e-12);
  }

  const Tensor two = gram_schmidt_rotation(Tensor::from_vector({2, 2}, {2, 0, 1, 1}));
  CHECK(two.data()[0] == doctest::Approx(1.0));
  CHECK(two.data()[1] == doctest::Approx(0.0));
  CHECK(two.data()[2] == doctest::Approx(0.0));
  CHECK(two.data()[3] == doctest::Approx(1.0));

  CHECK_THROWS_AS(gram_schmidt_rotation(Tensor::from_vector({3, 3}, {1, 0, 0, 2, 0, 0, 0, 0, 1})),
                  Error);  // second row parallel to first
  CHECK_THROWS_AS(gram_schmidt_rotation(Tensor::zeros({3, 3})), Error);
}

TEST_CASE("gram_schmidt_rotation right-equivariance over 1000 trials") {
  Rng rng(61);
  int tested = 0;
  while (tested < 1000) {
    std::vector<double> vv(9);
    for (auto& v : vv) v = rng.uniform(-1, 1);
    const SmallMat vm = to_small(Tensor::from_vector({3, 3}, vv));
    if (std::abs(vm.det()) < 0.05) continue;  // keep the map well-conditioned
    const RotationMatrix r = sample_uniform_rotation(rng, 3);
    // rows transform as v -> v R^T, i.e. V -> V R^T
    const SmallMat vr = vm.mul(r.transposed().matrix());
    const Tensor lhs = gram_schmidt_rotation(from_small(vr));
    const SmallMat rhs = to_small(gram_schmidt_rotation(from_small(vm))).mul(r.transposed().matrix());
    CHECK(max_abs_diff(lhs.data(), from_small(rhs).data()) <= 1e-9);
    ++tested;
  }
}

TEST_CASE("gram_schmidt_rotation output is a rotation and is differentiable") {
  Rng rng(67);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> vv(9);
    for (auto& v : vv) v = rng.uniform(-1, 1);
    if (std::abs(to_small(Tensor::from_vector({3, 3}, vv)).det()) < 0.05) continue;
    CHECK(RotationMatrix::is_valid(
        to_rotation(gram_schmidt_rotation(Tensor::from_vector({3, 3}, vv))).matrix(), 1e-9));
  }

  // gradcheck through the head
  const std::vector<double> base = {0.9, 0.2, -0.3, 0.1, 1.1, 0.4, -0.2, 0.3, 0.8};
  auto graph = [](const Tensor& v) {
    const Tensor r = gram_schmidt_rotation(v);
    const Tensor target = Tensor::from_vector({3, 3}, {0, 1, 0, 0, 0, 1, 1, 0, 0});
    const Tensor diff = sub(r, target);
    return reduce_sum(mul(diff, diff), {});
  };
  const auto ad = [&] {
    Tensor v = Tensor::from_vector({3, 3}, base, true);
    Tape tape;
    Tensor loss = graph(v);
    tape.backward(loss);
    auto g = v.grad();
    return std::vector<double>(g.begin(), g.end());
  }();
  const auto fd = oracle::fd_gradient(
      [&](const std::vector<double>& v) { return graph(Tensor::from_vector({3, 3}, v)).item(); },
      base, 1e-6);
  CHECK(oracle::max_rel_err(ad, fd) <= 1e-6);
}

TEST_CASE("proper_svd trivial and random cases") {
  // F = s I
  SmallMat f = SmallMat::identity(3);
  for (int i = 0; i < 3; ++i) f(i, i) = 2.5;
  const ProperSvd svd = proper_svd(f);
  CHECK(max_abs_diff(svd.mode().matrix().entries(), SmallMat::identity(3).entries()) <= 1e-12);
  for (double s : svd.s) CHECK(s == doctest::Approx(2.5));

  // F = s R has mode R (polar factor)
  Rng rng(71);
  const RotationMatrix r = sample_uniform_rotation(rng, 3);
  SmallMat sr = r.matrix();
  for (auto& v : sr.a) v *= 1.7;
  sr.dim = 3;
  const ProperSvd svd2 = proper_svd(sr);
  CHECK(max_abs_diff(svd2.mode().matrix().entries(), r.matrix().entries()) <= 1e-9);

  // random F reconstructs, factors are proper, singular values descend
  for (int trial = 0; trial < 200; ++trial) {
    SmallMat rf = SmallMat::zero(3);
    for (auto& v : rf.a) v = rng.uniform(-2, 2);
    rf.dim = 3;
    const ProperSvd s3 = proper_svd(rf);
    CHECK(RotationMatrix::is_valid(s3.u.matrix(), 1e-9));
    CHECK(RotationMatrix::is_valid(s3.v.matrix(), 1e-9));
    CHECK(s3.s[0] >= s3.s[1]);
    CHECK(s3.s[1] >= std::abs(s3.s[2]));  // last entry may be negative
    if (rf.det() < 0) CHECK(s3.s[2] < 0.0);
    // reconstruction
    SmallMat rec = SmallMat::zero(3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k)
          acc += s3.u(i, k) * s3.s[static_cast<std::size_t>(k)] * s3.v(j, k);
        rec(i, j) = acc;
      }
    CHECK(max_abs_diff(rec.entries(), rf.entries()) <= 1e-9);
  }

  SmallMat nan_mat = SmallMat::identity(2);
  nan_mat(0, 0) = std::nan("");
  CHECK_THROWS_AS(proper_svd(nan_mat), Error);
}

TEST_CASE("quaternion Haar oracle agrees with the Gram-Schmidt sampler") {
  // Two independent Haar constructions should agree on angle moments.
  Rng a(73), b(74);
  const int n = 20000;
  double ma = 0, mb = 0;
  for (int i = 0; i < n; ++i) {
    ma += sample_uniform_rotation(a, 3).angle();
    mb += oracle::haar_so3_quaternion(b).angle();
  }
  ma /= n;
  mb /= n;
  // E[w] = pi/2 + 2/pi under Haar; s.e. ~ 4e-3 at 2e4 samples
  const double expected = kPi / 2.0 + 2.0 / kPi;
  CHECK(std::abs(ma - expected) < 0.02);
  CHECK(std::abs(mb - expected) < 0.02);
}
