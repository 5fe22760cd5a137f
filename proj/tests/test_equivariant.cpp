#include "canon/equivariant.hpp"

#include <cmath>
#include <vector>

#include "canon/canonicalize.hpp"
#include "canon/datasets.hpp"
#include "canon/error.hpp"
#include "canon/rng.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace canon;

namespace {

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

void l1_normalize(Tensor& w) {
  auto d = w.raw_data();
  double s = 0.0;
  for (double v : d) s += std::abs(v);
  for (auto& v : d) v /= s;
}

// Worst-case violation of lifting(rho(g) x)[h] == rho(g) lifting(x)[g^-1 h]
// over all g, h.
double lifting_equivariance_error(const Tensor& image, const GConvLayer& lift, long n) {
  const GFeatureMap base = lifting_conv(image, lift);
  double worst = 0.0;
  for (long g = 0; g < n; ++g) {
    const GFeatureMap lhs = lifting_conv(rotate_image(image, CyclicElement(g, n)), lift);
    for (long h = 0; h < n; ++h) {
      const Tensor lhs_slice = select_axis(lhs.values, 1, static_cast<std::size_t>(h));
      const Tensor rhs_slice = rotate_hw(
          select_axis(base.values, 1, static_cast<std::size_t>(((h - g) % n + n) % n)), g, n);
      worst = std::max(worst, max_abs_diff(lhs_slice.data(), rhs_slice.data()));
    }
  }
  return worst;
}

GFeatureMap random_feature_map(Rng& rng, std::size_t c, long n, std::size_t hw) {
  std::vector<double> v(c * static_cast<std::size_t>(n) * hw * hw);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return GFeatureMap{Tensor::from_vector({c, static_cast<std::size_t>(n), hw, hw}, v), n};
}

// Apply the regular-representation transform to a feature map:
// out[., h] = rho_spatial(t) in[., t^-1 h].
GFeatureMap transform_feature_map(const GFeatureMap& f, long t) {
  const long n = f.group_order;
  std::vector<Tensor> fibers;
  for (long h = 0; h < n; ++h) {
    const Tensor src = select_axis(f.values, 1, static_cast<std::size_t>(((h - t) % n + n) % n));
    fibers.push_back(rotate_hw(src, t, n));
  }
  return GFeatureMap{stack_fibers(fibers), n};
}

}  // namespace

TEST_CASE("lifting_conv zero image gives bias-only fibers") {
  Rng rng(211);
  GConvLayer lift = make_lifting_layer(rng, 4, 1, 3, 3);
  lift.bias.raw_data()[0] = 0.5;
  lift.bias.raw_data()[1] = -0.25;
  const GFeatureMap out = lifting_conv(Tensor::zeros({1, 8, 8}), lift);
  CHECK(out.values.shape() == Shape{3, 4, 8, 8});
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const double want = lift.bias.at(ch);
    const Tensor slice = select_axis(out.values, 0, ch);
    for (double v : slice.data()) CHECK(v == want);
  }
}

TEST_CASE("lifting_conv C4 equivariance is exact") {
  Rng rng(213);
  const GConvLayer lift = make_lifting_layer(rng, 4, 1, 4, 3);
  std::vector<double> img(1 * 10 * 10);
  for (auto& v : img) v = rng.uniform();
  CHECK(lifting_equivariance_error(Tensor::from_vector({1, 10, 10}, img), lift, 4) <= 1e-12);
}

TEST_CASE("lifting_conv C8 equivariance within the frozen measured bound") {
  // Bilinear kernel rotation: pixel-level bound measured at 0.25-0.27 for
  // L1-normalized 3x3 kernels on unit-range inputs and frozen at 0.30; the
  // mass lost by corner taps under 45-degree rotation dominates. The
  // logit-level error (after spatial averaging) is 18x smaller; see the
  // fiber_logits case below.
  Rng rng(2028);
  GConvLayer lift = make_lifting_layer(rng, 8, 1, 1, 3);
  l1_normalize(lift.base_weight);
  const ImageDataset data = generate_toy_images(99, 20, 10, 24);
  double worst = 0.0;
  for (std::size_t i = 0; i < data.count; ++i)
    worst = std::max(worst, lifting_equivariance_error(data.image(i), lift, 8));
  CHECK(worst <= 0.30);
}

TEST_CASE("group_conv passthrough with a one-hot 1x1 base kernel") {
  Rng rng(217);
  const long n = 4;
  GConvLayer layer = make_group_layer(rng, n, 2, 2, 1);
  auto w = layer.base_weight.raw_data();  // [2,2,4,1,1]
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t c = 0; c < 2; ++c) w[c * 2 * 4 + c * 4 + 0] = 1.0;  // delta at fiber 0, c==c'
  std::fill(layer.bias.raw_data().begin(), layer.bias.raw_data().end(), 0.0);

  const GFeatureMap in = random_feature_map(rng, 2, n, 6);
  const GFeatureMap out = group_conv(in, layer);
  CHECK(max_abs_diff(out.values.data(), in.values.data()) == 0.0);
}

TEST_CASE("group_conv C4 equivariance is exact") {
  Rng rng(219);
  const long n = 4;
  const GConvLayer layer = make_group_layer(rng, n, 3, 2, 3);
  const GFeatureMap in = random_feature_map(rng, 3, n, 9);
  for (long t = 0; t < n; ++t) {
    const GFeatureMap lhs = group_conv(transform_feature_map(in, t), layer);
    const GFeatureMap rhs = transform_feature_map(group_conv(in, layer), t);
    CHECK(max_abs_diff(lhs.values.data(), rhs.values.data()) <= 1e-12);
  }
}

TEST_CASE("gradcheck through two stacked group convolutions") {
  Rng rng(223);
  const long n = 4;
  const GConvLayer l1 = make_group_layer(rng, n, 2, 2, 3);
  const GConvLayer l2 = make_group_layer(rng, n, 2, 1, 3);
  const GFeatureMap in = random_feature_map(rng, 2, n, 5);

  const auto loss_with_w1 = [&](const Tensor& w) {
    GConvLayer patched = l1;
    patched.base_weight = w;
    const GFeatureMap h = group_conv(g_relu(group_conv(in, patched)), l2);
    return reduce_sum(mul(h.values, h.values), {});
  };
  const auto base = l1.base_weight.data();
  const std::vector<double> wv(base.begin(), base.end());
  const auto ad = [&] {
    Tensor w = Tensor::from_vector(l1.base_weight.shape(), wv, true);
    Tape tape;
    Tensor loss = loss_with_w1(w);
    tape.backward(loss);
    auto g = w.grad();
    return std::vector<double>(g.begin(), g.end());
  }();
  const auto fd = oracle::fd_gradient(
      [&](const std::vector<double>& v) {
        return loss_with_w1(Tensor::from_vector(l1.base_weight.shape(), v)).item();
      },
      wv, 1e-5);
  CHECK(oracle::max_rel_err(ad, fd) <= 1e-4);
}

TEST_CASE("fiber_logits symmetry and shift property") {
  // constant features give equal logits
  const GFeatureMap constant{Tensor::full({3, 4, 5, 5}, 0.7), 4};
  const Tensor logits = fiber_logits(constant);
  REQUIRE(logits.shape() == Shape{4});
  for (double v : logits.data()) CHECK(v == doctest::Approx(0.7));

  // C4: rotating the input cyclically shifts the logits, exactly up to
  // 64-bit reassociation noise
  Rng rng(227);
  GConvLayer lift4 = make_lifting_layer(rng, 4, 1, 2, 3);
  std::vector<double> img(1 * 12 * 12);
  for (auto& v : img) v = rng.uniform();
  const Tensor x = Tensor::from_vector({1, 12, 12}, img);
  const Tensor base_logits = fiber_logits(lifting_conv(x, lift4));
  for (long g = 0; g < 4; ++g) {
    const Tensor shifted = fiber_logits(lifting_conv(rotate_image(x, CyclicElement(g, 4)), lift4));
    const Tensor expect = roll_axis(base_logits, 0, static_cast<std::size_t>(g));
    CHECK(max_abs_diff(shifted.data(), expect.data()) <= 1e-10);
  }

  // C8: within the spec tolerance 5e-2 (measured 0.0137 for L1-normalized
  // kernels on glyph images, frozen at the spec value)
  Rng rng8(2028);
  GConvLayer lift8 = make_lifting_layer(rng8, 8, 1, 1, 3);
  l1_normalize(lift8.base_weight);
  const ImageDataset data = generate_toy_images(99, 20, 10, 24);
  double worst = 0.0;
  for (std::size_t i = 0; i < data.count; ++i) {
    const Tensor xi = data.image(i);
    const Tensor l0 = fiber_logits(lifting_conv(xi, lift8));
    for (long g = 0; g < 8; ++g) {
      const Tensor lg = fiber_logits(lifting_conv(rotate_image(xi, CyclicElement(g, 8)), lift8));
      worst = std::max(worst, max_abs_diff(lg.data(), roll_axis(l0, 0, static_cast<std::size_t>(g)).data()));
    }
  }
  CHECK(worst <= 5e-2);
}

TEST_CASE("equivariant_norm: statistics, shifts, and stability") {
  Rng rng(229);
  GNorm norm = make_gnorm(3);
  std::vector<GFeatureMap> batch;
  for (int b = 0; b < 4; ++b) batch.push_back(random_feature_map(rng, 3, 4, 6));

  // batch statistics: output per-channel mean ~0, var ~1
  auto out = equivariant_norm_train(batch, norm);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double mean = 0.0, var = 0.0;
    std::size_t count = 0;
    for (const auto& f : out) {
      const Tensor slice = select_axis(f.values, 0, ch);
      for (double v : slice.data()) {
        mean += v;
        count++;
      }
    }
    mean /= static_cast<double>(count);
    for (const auto& f : out) {
      const Tensor slice = select_axis(f.values, 0, ch);
      for (double v : slice.data()) var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(count);
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-3);  // eps = 1e-5 shifts variance slightly
  }

  // renormalizing an already-normalized batch changes nothing beyond eps
  GNorm norm2 = make_gnorm(3);
  auto twice = equivariant_norm_train(out, norm2);
  for (std::size_t b = 0; b < out.size(); ++b)
    CHECK(max_abs_diff(twice[b].values.data(), out[b].values.data()) <= 1e-4);

  // normalization commutes with fiber shifts (statistics are fiber-uniform;
  // tolerance covers 64-bit reassociation only)
  const GFeatureMap f = random_feature_map(rng, 3, 4, 6);
  const GFeatureMap shifted{roll_axis(f.values, 1, 1), 4};
  const GFeatureMap norm_then_shift{
      roll_axis(equivariant_norm_eval(f, norm).values, 1, 1), 4};
  const GFeatureMap shift_then_norm = equivariant_norm_eval(shifted, norm);
  CHECK(max_abs_diff(norm_then_shift.values.data(), shift_then_norm.values.data()) <= 1e-12);

  // zero-variance channel is guarded by eps
  GNorm norm3 = make_gnorm(1);
  std::vector<GFeatureMap> flat = {GFeatureMap{Tensor::full({1, 4, 3, 3}, 2.0), 4}};
  auto guarded = equivariant_norm_train(flat, norm3);
  for (double v : guarded[0].values.data()) CHECK(std::isfinite(v));

  CHECK_THROWS_AS(equivariant_norm(f, std::vector<double>{0.0}, std::vector<double>{1.0, 1.0, 1.0},
                                   norm.gamma, norm.beta, 1e-5),
                  Error);
}

TEST_CASE("equivariant_norm gradcheck through batch statistics") {
  Rng rng(233);
  std::vector<GFeatureMap> batch = {random_feature_map(rng, 2, 4, 4),
                                    random_feature_map(rng, 2, 4, 4)};
  GNorm norm = make_gnorm(2);
  const auto loss_with = [&](const Tensor& x0) {
    GNorm scratch = make_gnorm(2);
    std::vector<GFeatureMap> b = {GFeatureMap{x0, 4}, batch[1]};
    auto out = equivariant_norm_train(b, scratch);
    Tensor acc = reduce_sum(mul(out[0].values, out[0].values), {});
    return add(acc, reduce_sum(mul(out[1].values, exp(out[1].values)), {}));
  };
  const auto base = batch[0].values.data();
  const std::vector<double> xv(base.begin(), base.end());
  const auto ad = [&] {
    Tensor x = Tensor::from_vector(batch[0].values.shape(), xv, true);
    Tape tape;
    Tensor loss = loss_with(x);
    tape.backward(loss);
    auto g = x.grad();
    return std::vector<double>(g.begin(), g.end());
  }();
  const auto fd = oracle::fd_gradient(
      [&](const std::vector<double>& v) {
        return loss_with(Tensor::from_vector(batch[0].values.shape(), v)).item();
      },
      xv, 1e-5);
  CHECK(oracle::max_rel_err(ad, fd) <= 1e-4);
}

TEST_CASE("vector_head_points equivariance for arbitrary weights") {
  Rng rng(239);
  const PointHeadNet net = make_point_head(rng, 16);
  const ImageDataset unused = {};  // silence unused-include warnings in some configs
  (void)unused;

  // a centered, well-spread random cloud
  const std::size_t n = 40;
  std::vector<double> pts(n * 3);
  for (auto& v : pts) v = rng.uniform(-1, 1);
  double mean[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) mean[d] += pts[i * 3 + static_cast<std::size_t>(d)];
  for (int d = 0; d < 3; ++d) mean[d] /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) pts[i * 3 + static_cast<std::size_t>(d)] -= mean[d];
  const Tensor cloud = Tensor::from_vector({n, 3}, pts);

  for (int trial = 0; trial < 1000; ++trial) {
    const RotationMatrix r = sample_uniform_rotation(rng, 3);
    const Tensor rotated = rotate_points(cloud, r);  // rows p -> R p, i.e. P R^T
    const Tensor lhs = vector_head_points(rotated, net);
    // rows of V transform the same way: V -> V R^T
    const Tensor rhs_t = vector_head_points(cloud, net);
    SmallMat rhs = SmallMat::zero(3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k)
          acc += rhs_t.at(static_cast<std::size_t>(i * 3 + k)) * r(j, k);
        rhs(i, j) = acc;
      }
    CHECK(max_abs_diff(lhs.data(), rhs.entries()) <= 1e-9);
  }

  CHECK_THROWS_AS(vector_head_points(Tensor::zeros({2, 3}), net), Error);   // too few points
  CHECK_THROWS_AS(vector_head_points(Tensor::zeros({10, 3}), net), Error);  // coincident
  CHECK_THROWS_AS(vector_head_points(Tensor::full({10, 3}, 0.5), net), Error);  // not centered
}

TEST_CASE("vector_head_points gradcheck through the invariant-feature MLP") {
  Rng rng(241);
  const PointHeadNet net = make_point_head(rng, 8);
  std::vector<double> pts(30);
  for (auto& v : pts) v = rng.uniform(-1, 1);
  double mean[3] = {0, 0, 0};
  for (std::size_t i = 0; i < 10; ++i)
    for (int d = 0; d < 3; ++d) mean[d] += pts[i * 3 + static_cast<std::size_t>(d)];
  for (int d = 0; d < 3; ++d) mean[d] /= 10.0;
  for (std::size_t i = 0; i < 10; ++i)
    for (int d = 0; d < 3; ++d) pts[i * 3 + static_cast<std::size_t>(d)] -= mean[d];
  const Tensor cloud = Tensor::from_vector({10, 3}, pts);

  const auto loss_with_w1 = [&](const Tensor& w1) {
    PointHeadNet patched = net;
    patched.w1 = w1;
    const Tensor v = vector_head_points(cloud, patched);
    return reduce_sum(mul(v, v), {});
  };
  const auto base = net.w1.data();
  const std::vector<double> wv(base.begin(), base.end());
  const auto ad = [&] {
    Tensor w = Tensor::from_vector(net.w1.shape(), wv, true);
    Tape tape;
    Tensor loss = loss_with_w1(w);
    tape.backward(loss);
    auto g = w.grad();
    return std::vector<double>(g.begin(), g.end());
  }();
  const auto fd = oracle::fd_gradient(
      [&](const std::vector<double>& v) {
        return loss_with_w1(Tensor::from_vector(net.w1.shape(), v)).item();
      },
      wv, 1e-5);
  CHECK(oracle::max_rel_err(ad, fd) <= 1e-4);
}

TEST_CASE("C4 canonicalizer end to end: logits shift exactly across the orbit") {
  Rng rng(251);
  GCanonicalizer net = make_canonicalizer(rng, 4, 3, 3, 3);
  const ImageDataset data = generate_toy_images(31, 12, 6, 24);
  for (std::size_t i = 0; i < data.count; ++i) {
    const Tensor x = data.image(i);
    const Tensor l0 = net.logits(x);
    for (long g = 0; g < 4; ++g) {
      const Tensor lg = net.logits(rotate_image(x, CyclicElement(g, 4)));
      CHECK(max_abs_diff(lg.data(), roll_axis(l0, 0, static_cast<std::size_t>(g)).data()) <= 1e-10);
    }
  }
}

TEST_CASE("C8 canonicalizer logits shift within the frozen regression bound") {
  Rng rng(2024);
  GCanonicalizer net = make_canonicalizer(rng, 8, 4, 4, 3);
  const ImageDataset data = generate_toy_images(99, 20, 10, 24);
  double worst = 0.0;
  for (std::size_t i = 0; i < data.count; ++i) {
    const Tensor x = data.image(i);
    const Tensor l0 = net.logits(x);
    for (long g = 0; g < 8; ++g) {
      const Tensor lg = net.logits(rotate_image(x, CyclicElement(g, 8)));
      worst = std::max(worst, max_abs_diff(lg.data(), roll_axis(l0, 0, static_cast<std::size_t>(g)).data()));
    }
  }
  CHECK(worst <= 0.08);  // measured 0.058 for this seed; regression bound
}
