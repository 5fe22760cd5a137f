#pragma once

#include <span>
#include <string>
#include <vector>

#include "canon/groups.hpp"
#include "canon/rng.hpp"
#include "canon/tensor.hpp"

namespace canon {

// Feature map carrying the regular representation of C_n: one fiber slot per
// group element. Rotating the input by g rotates the map spatially and
// cyclically shifts the fiber axis by g.
struct GFeatureMap {
  Tensor values;  // [C, n, H, W]
  long group_order = 1;
};

// Group-equivariant convolution layer. The stored kernel is the base copy;
// rotated / fiber-shifted copies are derived inside the forward pass, never
// learned independently.
struct GConvLayer {
  enum class Kind { Lifting, Group };
  Kind kind = Kind::Lifting;
  long group_order = 1;
  Tensor base_weight;  // lifting: [Co,Ci,k,k]; group: [Co,Ci,n,k,k]
  Tensor bias;         // [Co], shared across fiber and space
  int padding = 1;     // same-size by default: (k-1)/2

  std::vector<Param> params(const std::string& prefix) const;
};

GConvLayer make_lifting_layer(Rng& rng, long group_order, std::size_t c_in, std::size_t c_out,
                              std::size_t kernel);
GConvLayer make_group_layer(Rng& rng, long group_order, std::size_t c_in, std::size_t c_out,
                            std::size_t kernel);

// First layer: trivial representation in, regular representation out. Fiber
// slot h is the correlation of the image with the base kernel rotated by h.
GFeatureMap lifting_conv(const Tensor& image, const GConvLayer& layer);

// Regular-representation convolution: output fiber h sums, over input fibers
// g, correlations with the base kernel rotated by h and fiber-shifted by
// h^{-1} g.
GFeatureMap group_conv(const GFeatureMap& input, const GConvLayer& layer);

// Spatial-and-channel mean per fiber slot: one logit per group element.
Tensor fiber_logits(const GFeatureMap& features);

// Equivariant normalization: per-channel statistics pooled over fiber and
// spatial axes (and the batch, in training), so normalization commutes with
// fiber shifts and spatial rotations.
struct GNorm {
  std::size_t channels = 0;
  Tensor gamma, beta;  // [C]
  std::vector<double> running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  std::vector<Param> params(const std::string& prefix) const;
};

GNorm make_gnorm(std::size_t channels);

// Normalize one map with explicit per-channel statistics.
GFeatureMap equivariant_norm(const GFeatureMap& features, std::span<const double> mean,
                             std::span<const double> var, const Tensor& gamma, const Tensor& beta,
                             double eps);

// Training path: differentiable statistics pooled over batch, fiber and
// spatial axes; updates the layer's running statistics.
std::vector<GFeatureMap> equivariant_norm_train(std::span<const GFeatureMap> batch, GNorm& layer);
// Evaluation path: running statistics.
GFeatureMap equivariant_norm_eval(const GFeatureMap& features, const GNorm& layer);

GFeatureMap g_relu(const GFeatureMap& features);

// Rotation-equivariant vector head for point clouds: each output vector is a
// weighted sum of the points, with weights produced by an MLP on
// rotation-invariant per-point features. The output therefore transforms as
// V -> V R^T when the points do.
struct PointHeadNet {
  Tensor w1, b1;  // [F,hidden], [hidden]
  Tensor w2, b2;  // [hidden,3], [3]

  std::vector<Param> params(const std::string& prefix) const;
};

PointHeadNet make_point_head(Rng& rng, std::size_t hidden = 16);

// Rotation-invariant per-point features: norm, mean pairwise distance,
// squared norm, and distance-profile quantiles. Plain data, not tracked by
// the tape.
inline constexpr std::size_t kPointFeatureCount = 7;
Tensor point_invariant_features(const Tensor& points);

// [3,3] matrix of predicted vectors (rows). Requires a centered,
// non-degenerate cloud of at least 3 points.
Tensor vector_head_points(const Tensor& points, const PointHeadNet& net);

}  // namespace canon
