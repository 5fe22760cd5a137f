#include "canon/equivariant.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "canon/error.hpp"

namespace canon {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_square_kernel(std::size_t k) {
  if (k % 2 == 0) throw Error(Errc::NonOddKernel, "equivariant layers need odd square kernels");
}

Tensor bias4(const Tensor& bias) {
  return reshape(bias, {bias.size(), 1, 1, 1});
}

// ---- C8 kernel rotation ---------------------------------------------------
//
// A 3x3 kernel is bijective with a polar parameterization (center value plus
// a ring of 8 samples at 45-degree spacing, splatted bilinearly onto the
// grid). In that basis a 45-degree rotation is an exact cyclic shift, so the
// per-fiber kernels of a C8 layer are exact conjugated permutations of the
// base kernel: rotations compose exactly, the response scale is identical
// across fibers, and quarter turns coincide with the exact grid
// permutations. Plain bilinear resampling instead damps the odd fibers
// (corner taps leave the grid and interpolation shrinks signed kernels),
// which biases argmax selection toward even group elements.

// Splat basis B: column j is the 3x3 footprint of polar parameter j
// (j = 0 center, j = 1..8 ring angle (j-1)*45 degrees).
Eigen::Matrix<double, 9, 9> polar_splat_basis() {
  Eigen::Matrix<double, 9, 9> b = Eigen::Matrix<double, 9, 9>::Zero();
  auto tap = [](double x, double y) {  // grid tap index from coordinates
    const int c = static_cast<int>(std::lround(x)) + 1;
    const int r = 1 - static_cast<int>(std::lround(y));
    return r * 3 + c;
  };
  b(tap(0, 0), 0) = 1.0;
  for (int a = 0; a < 8; ++a) {
    const double x = std::cos(kPi / 4.0 * a), y = std::sin(kPi / 4.0 * a);
    const double fx = std::floor(x), fy = std::floor(y);
    const double dx = x - fx, dy = y - fy;
    struct P { double x, y, w; };
    const P taps[4] = {{fx, fy, (1 - dx) * (1 - dy)},
                       {fx + 1, fy, dx * (1 - dy)},
                       {fx, fy + 1, (1 - dx) * dy},
                       {fx + 1, fy + 1, dx * dy}};
    for (const auto& t : taps) {
      if (t.w <= 1e-15) continue;
      if (t.x < -1.5 || t.x > 1.5 || t.y < -1.5 || t.y > 1.5) continue;
      b(tap(t.x, t.y), a + 1) += t.w;
    }
  }
  return b;
}

// Exact rotation maps M_h = B shift_h B^{-1} for h = 0..7.
const std::array<std::array<double, 81>, 8>& c8_kernel_maps() {
  static const std::array<std::array<double, 81>, 8> maps = [] {
    const Eigen::Matrix<double, 9, 9> b = polar_splat_basis();
    const Eigen::Matrix<double, 9, 9> binv = b.inverse();
    std::array<std::array<double, 81>, 8> out{};
    for (int h = 0; h < 8; ++h) {
      Eigen::Matrix<double, 9, 9> shift = Eigen::Matrix<double, 9, 9>::Zero();
      shift(0, 0) = 1.0;
      for (int a = 0; a < 8; ++a) shift((a + h) % 8 + 1, a + 1) = 1.0;
      const Eigen::Matrix<double, 9, 9> m = b * shift * binv;
      for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j)
          out[static_cast<std::size_t>(h)][static_cast<std::size_t>(i * 9 + j)] = m(i, j);
    }
    return out;
  }();
  return maps;
}

// Rotate the trailing 3x3 kernel axes of `w` by 2*pi*k/n. Quarter-turn
// multiples use the exact grid permutation; C8 on 3x3 kernels uses the
// exact polar-shift map; anything else falls back to bilinear resampling.
Tensor rotate_kernel(const Tensor& w, long k, long n) {
  long kk = k % n;
  if (kk < 0) kk += n;
  if ((4 * kk) % n == 0) return rotate_hw(w, kk, n);
  const Shape& s = w.shape();
  const std::size_t kh = s[s.size() - 2], kw = s[s.size() - 1];
  if (n == 8 && kh == 3 && kw == 3) {
    const auto& m = c8_kernel_maps()[static_cast<std::size_t>(kk)];
    // rows of [planes, 9] mapped by M^T on the right
    Tensor mt = Tensor::from_vector({9, 9}, [&] {
      std::vector<double> v(81);
      for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j)
          v[static_cast<std::size_t>(j * 9 + i)] = m[static_cast<std::size_t>(i * 9 + j)];
      return v;
    }());
    const std::size_t planes = w.size() / 9;
    return reshape(matmul(reshape(w, {planes, 9}), mt), s);
  }
  return rotate_hw(w, kk, n);
}

// He-style init. For C8 3x3 layers the weights are drawn in the polar basis
// (i.i.d. there) and mapped to the grid, so every fiber's kernel is
// statistically identical from the start.
Tensor kernel_init(Rng& rng, Shape shape, double fan_in, long group_order) {
  const double scale = std::sqrt(2.0 / fan_in);
  const std::size_t kh = shape[shape.size() - 2], kw = shape[shape.size() - 1];
  std::vector<double> v(numel(shape));
  if (group_order == 8 && kh == 3 && kw == 3) {
    static const Eigen::Matrix<double, 9, 9> b = polar_splat_basis();
    for (std::size_t plane = 0; plane < v.size() / 9; ++plane) {
      Eigen::Matrix<double, 9, 1> p;
      for (int i = 0; i < 9; ++i) p(i) = rng.normal() * scale;
      const Eigen::Matrix<double, 9, 1> w = b * p;
      for (int i = 0; i < 9; ++i) v[plane * 9 + static_cast<std::size_t>(i)] = w(i);
    }
  } else {
    for (auto& x : v) x = rng.normal() * scale;
  }
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

}  // namespace

std::vector<Param> GConvLayer::params(const std::string& prefix) const {
  return {{prefix + ".weight", base_weight}, {prefix + ".bias", bias}};
}

GConvLayer make_lifting_layer(Rng& rng, long group_order, std::size_t c_in, std::size_t c_out,
                              std::size_t kernel) {
  check_square_kernel(kernel);
  GConvLayer layer;
  layer.kind = GConvLayer::Kind::Lifting;
  layer.group_order = group_order;
  layer.base_weight = kernel_init(rng, {c_out, c_in, kernel, kernel},
                                  static_cast<double>(c_in * kernel * kernel), group_order);
  layer.bias = Tensor::zeros({c_out}, true);
  layer.padding = static_cast<int>((kernel - 1) / 2);
  return layer;
}

GConvLayer make_group_layer(Rng& rng, long group_order, std::size_t c_in, std::size_t c_out,
                            std::size_t kernel) {
  check_square_kernel(kernel);
  GConvLayer layer;
  layer.kind = GConvLayer::Kind::Group;
  layer.group_order = group_order;
  layer.base_weight =
      kernel_init(rng, {c_out, c_in, static_cast<std::size_t>(group_order), kernel, kernel},
                  static_cast<double>(c_in * group_order * kernel * kernel), group_order);
  layer.bias = Tensor::zeros({c_out}, true);
  layer.padding = static_cast<int>((kernel - 1) / 2);
  return layer;
}

GFeatureMap lifting_conv(const Tensor& image, const GConvLayer& layer) {
  if (layer.kind != GConvLayer::Kind::Lifting)
    throw Error(Errc::InvalidArgument, "lifting_conv called with a group layer");
  if (!image.defined() || image.rank() != 3)
    throw Error(Errc::ShapeMismatch, "lifting_conv expects [C,H,W]");
  if (image.shape()[1] != image.shape()[2])
    throw Error(Errc::NonSquareImage, "lifting_conv needs a square image");
  const long n = layer.group_order;
  std::vector<Tensor> fibers;
  fibers.reserve(static_cast<std::size_t>(n));
  for (long h = 0; h < n; ++h)
    fibers.push_back(conv2d(image, rotate_kernel(layer.base_weight, h, n), layer.padding));
  Tensor out = stack_fibers(fibers);
  out = add(out, bias4(layer.bias));
  return GFeatureMap{std::move(out), n};
}

GFeatureMap group_conv(const GFeatureMap& input, const GConvLayer& layer) {
  if (layer.kind != GConvLayer::Kind::Group)
    throw Error(Errc::InvalidArgument, "group_conv called with a lifting layer");
  if (input.group_order != layer.group_order)
    throw Error(Errc::ShapeMismatch, "group_conv: fiber orders differ");
  const Tensor& x = input.values;
  if (!x.defined() || x.rank() != 4)
    throw Error(Errc::ShapeMismatch, "group_conv expects [C,n,H,W] features");
  const std::size_t c_in = x.shape()[0];
  const std::size_t n = x.shape()[1];
  if (static_cast<long>(n) != layer.group_order)
    throw Error(Errc::ShapeMismatch, "group_conv: feature fiber axis does not match layer order");
  const std::size_t h_dim = x.shape()[2], w_dim = x.shape()[3];
  const std::size_t c_out = layer.base_weight.shape()[0];
  const std::size_t k = layer.base_weight.shape()[3];

  // Flatten (channel, fiber) into one channel axis; for output fiber h the
  // effective kernel is the base kernel rotated by h with its fiber axis
  // rolled by h, so slot (c, g) holds w[c, (g-h) mod n].
  const Tensor x_flat = reshape(x, {c_in * n, h_dim, w_dim});
  std::vector<Tensor> fibers;
  fibers.reserve(n);
  for (long h = 0; h < static_cast<long>(n); ++h) {
    Tensor kernel = rotate_kernel(layer.base_weight, h, static_cast<long>(n));
    kernel = roll_axis(kernel, 2, static_cast<std::size_t>(h));
    kernel = reshape(kernel, {c_out, c_in * n, k, k});
    fibers.push_back(conv2d(x_flat, kernel, layer.padding));
  }
  Tensor out = stack_fibers(fibers);
  out = add(out, bias4(layer.bias));
  return GFeatureMap{std::move(out), static_cast<long>(n)};
}

Tensor fiber_logits(const GFeatureMap& features) {
  const Tensor& x = features.values;
  if (!x.defined() || x.rank() != 4)
    throw Error(Errc::ShapeMismatch, "fiber_logits expects [C,n,H,W]");
  return reduce_mean(x, {0, 2, 3});
}

// ---- normalization ------------------------------------------------------------

std::vector<Param> GNorm::params(const std::string& prefix) const {
  return {{prefix + ".gamma", gamma}, {prefix + ".beta", beta}};
}

GNorm make_gnorm(std::size_t channels) {
  GNorm norm;
  norm.channels = channels;
  norm.gamma = Tensor::full({channels}, 1.0, true);
  norm.beta = Tensor::zeros({channels}, true);
  norm.running_mean.assign(channels, 0.0);
  norm.running_var.assign(channels, 1.0);
  return norm;
}

namespace {

GFeatureMap apply_norm(const GFeatureMap& f, const Tensor& mean_c, const Tensor& var_c,
                       const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = f.values.shape()[0];
  const Tensor mean4 = reshape(mean_c, {c, 1, 1, 1});
  const Tensor denom = sqrt(add(var_c, Tensor::full({c}, eps)));
  const Tensor scale4 = reshape(div(gamma, denom), {c, 1, 1, 1});
  const Tensor beta4 = reshape(beta, {c, 1, 1, 1});
  Tensor y = add(mul(sub(f.values, mean4), scale4), beta4);
  return GFeatureMap{std::move(y), f.group_order};
}

}  // namespace

GFeatureMap equivariant_norm(const GFeatureMap& features, std::span<const double> mean,
                             std::span<const double> var, const Tensor& gamma, const Tensor& beta,
                             double eps) {
  const std::size_t c = features.values.shape()[0];
  if (mean.size() != c || var.size() != c || gamma.size() != c || beta.size() != c)
    throw Error(Errc::ShapeMismatch, "equivariant_norm: per-channel stats size mismatch");
  const Tensor mean_c = Tensor::from_vector({c}, {mean.begin(), mean.end()});
  const Tensor var_c = Tensor::from_vector({c}, {var.begin(), var.end()});
  return apply_norm(features, mean_c, var_c, gamma, beta, eps);
}

std::vector<GFeatureMap> equivariant_norm_train(std::span<const GFeatureMap> batch, GNorm& layer) {
  if (batch.empty()) throw Error(Errc::InvalidArgument, "equivariant_norm_train: empty batch");
  const std::size_t c = batch[0].values.shape()[0];
  if (c != layer.channels) throw Error(Errc::ShapeMismatch, "equivariant_norm_train: channel mismatch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Tensor mean_c, ex2_c;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor& x = batch[b].values;
    if (x.shape()[0] != c) throw Error(Errc::ShapeMismatch, "equivariant_norm_train: ragged batch");
    const Tensor m = reduce_mean(x, {1, 2, 3});
    const Tensor m2 = reduce_mean(mul(x, x), {1, 2, 3});
    mean_c = b == 0 ? m : add(mean_c, m);
    ex2_c = b == 0 ? m2 : add(ex2_c, m2);
  }
  const Tensor inv = Tensor::full({c}, inv_b);
  mean_c = mul(mean_c, inv);
  ex2_c = mul(ex2_c, inv);
  const Tensor var_c = sub(ex2_c, mul(mean_c, mean_c));

  for (std::size_t ch = 0; ch < c; ++ch) {
    layer.running_mean[ch] =
        (1.0 - layer.momentum) * layer.running_mean[ch] + layer.momentum * mean_c.at(ch);
    layer.running_var[ch] =
        (1.0 - layer.momentum) * layer.running_var[ch] + layer.momentum * var_c.at(ch);
  }

  std::vector<GFeatureMap> out;
  out.reserve(batch.size());
  for (const auto& f : batch) out.push_back(apply_norm(f, mean_c, var_c, layer.gamma, layer.beta, layer.eps));
  return out;
}

GFeatureMap equivariant_norm_eval(const GFeatureMap& features, const GNorm& layer) {
  return equivariant_norm(features, layer.running_mean, layer.running_var, layer.gamma, layer.beta,
                          layer.eps);
}

GFeatureMap g_relu(const GFeatureMap& features) {
  return GFeatureMap{relu(features.values), features.group_order};
}

// ---- point head -----------------------------------------------------------------

std::vector<Param> PointHeadNet::params(const std::string& prefix) const {
  return {{prefix + ".w1", w1}, {prefix + ".b1", b1}, {prefix + ".w2", w2}, {prefix + ".b2", b2}};
}

PointHeadNet make_point_head(Rng& rng, std::size_t hidden) {
  PointHeadNet net;
  const std::size_t features = kPointFeatureCount;
  net.w1 = kernel_init(rng, {features, hidden}, static_cast<double>(features), 1);
  net.b1 = Tensor::zeros({hidden}, true);
  net.w2 = kernel_init(rng, {hidden, 3}, static_cast<double>(hidden), 1);
  net.b2 = Tensor::zeros({3}, true);
  return net;
}

Tensor point_invariant_features(const Tensor& points) {
  if (!points.defined() || points.rank() != 2 || points.shape()[1] != 3)
    throw Error(Errc::ShapeMismatch, "point_invariant_features expects [N,3]");
  const std::size_t n = points.shape()[0];
  const auto p = points.data();
  const std::size_t f = kPointFeatureCount;
  std::vector<double> feats(n * f, 0.0);
  std::vector<double> dists(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* pi = &p[i * 3];
    const double norm2 = pi[0] * pi[0] + pi[1] * pi[1] + pi[2] * pi[2];
    for (std::size_t j = 0; j < n; ++j) {
      const double* pj = &p[j * 3];
      const double dx = pi[0] - pj[0], dy = pi[1] - pj[1], dz = pi[2] - pj[2];
      dists[j] = std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    std::sort(dists.begin(), dists.end());
    double mean_dist = 0.0;
    for (double d : dists) mean_dist += d;
    mean_dist /= static_cast<double>(n);
    // distance profile quantiles describe where the point sits in the shape
    feats[i * f + 0] = std::sqrt(norm2);
    feats[i * f + 1] = mean_dist;
    feats[i * f + 2] = norm2;
    feats[i * f + 3] = dists[std::min(n - 1, std::size_t{4})];  // local density
    feats[i * f + 4] = dists[n / 4];
    feats[i * f + 5] = dists[n / 2];
    feats[i * f + 6] = dists[n - 1];  // farthest point
  }
  return Tensor::from_vector({n, f}, std::move(feats));
}

Tensor vector_head_points(const Tensor& points, const PointHeadNet& net) {
  if (!points.defined() || points.rank() != 2 || points.shape()[1] != 3)
    throw Error(Errc::ShapeMismatch, "vector_head_points expects [N,3]");
  const std::size_t n = points.shape()[0];
  if (n < 3) throw Error(Errc::Degenerate, "vector_head_points needs at least 3 points");
  const auto p = points.data();
  double mean[3] = {0, 0, 0};
  double spread = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) mean[d] += p[i * 3 + static_cast<std::size_t>(d)];
  for (int d = 0; d < 3; ++d) mean[d] /= static_cast<double>(n);
  if (std::abs(mean[0]) > 1e-6 || std::abs(mean[1]) > 1e-6 || std::abs(mean[2]) > 1e-6)
    throw Error(Errc::InvalidArgument, "vector_head_points expects a centered cloud");
  for (std::size_t i = 0; i < n; ++i) {
    const double* pi = &p[i * 3];
    spread = std::max(spread, pi[0] * pi[0] + pi[1] * pi[1] + pi[2] * pi[2]);
  }
  if (spread < 1e-18) throw Error(Errc::Degenerate, "vector_head_points: all points coincide");

  const Tensor feats = point_invariant_features(points);         // [N,F], constant
  const Tensor hidden = relu(add(matmul(feats, net.w1), net.b1));  // [N,H]
  const Tensor weights = add(matmul(hidden, net.w2), net.b2);      // [N,3]
  return matmul(transpose2d(weights), points);                     // [3,3]
}

}  // namespace canon
