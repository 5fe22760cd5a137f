#include "canon/canonicalize.hpp"

#include <cmath>

#include "canon/error.hpp"

namespace canon {

namespace {

// [1 2 1] x [1 2 1] / 16 binomial smoothing, one channel, same size.
Tensor binomial_smooth(const Tensor& x, int passes) {
  static const Tensor kernel = Tensor::from_vector(
      {1, 1, 3, 3}, {1 / 16.0, 2 / 16.0, 1 / 16.0, 2 / 16.0, 4 / 16.0, 2 / 16.0, 1 / 16.0,
                     2 / 16.0, 1 / 16.0});
  Tensor out = x;
  for (int i = 0; i < passes; ++i) out = conv2d(out, kernel, 1);
  return out;
}

}  // namespace

std::vector<Param> GCanonicalizer::params(const std::string& prefix) const {
  std::vector<Param> out;
  for (auto&& group : {lift.params(prefix + ".lift"), norm1.params(prefix + ".norm1"),
                       conv2.params(prefix + ".conv2"), norm2.params(prefix + ".norm2"),
                       conv3.params(prefix + ".conv3")})
    out.insert(out.end(), group.begin(), group.end());
  return out;
}

std::vector<Tensor> GCanonicalizer::logits_batch(std::span<const Tensor> images, bool training) {
  std::vector<GFeatureMap> maps;
  maps.reserve(images.size());
  for (const auto& x : images)
    maps.push_back(lifting_conv(binomial_smooth(x, smoothing_passes), lift));
  if (training)
    maps = equivariant_norm_train(maps, norm1);
  else
    for (auto& m : maps) m = equivariant_norm_eval(m, norm1);
  for (auto& m : maps) m = group_conv(g_relu(m), conv2);
  if (training)
    maps = equivariant_norm_train(maps, norm2);
  else
    for (auto& m : maps) m = equivariant_norm_eval(m, norm2);
  std::vector<Tensor> logits;
  logits.reserve(images.size());
  for (auto& m : maps) logits.push_back(fiber_logits(group_conv(g_relu(m), conv3)));
  return logits;
}

Tensor GCanonicalizer::logits(const Tensor& image) const {
  GFeatureMap m = lifting_conv(binomial_smooth(image, smoothing_passes), lift);
  m = equivariant_norm_eval(m, norm1);
  m = group_conv(g_relu(m), conv2);
  m = equivariant_norm_eval(m, norm2);
  m = group_conv(g_relu(m), conv3);
  return fiber_logits(m);
}

GCanonicalizer make_canonicalizer(Rng& rng, long group_order, std::size_t c1, std::size_t c2,
                                  std::size_t kernel) {
  GCanonicalizer net;
  net.group_order = group_order;
  net.lift = make_lifting_layer(rng, group_order, 1, c1, kernel);
  net.norm1 = make_gnorm(c1);
  net.conv2 = make_group_layer(rng, group_order, c1, c2, kernel);
  net.norm2 = make_gnorm(c2);
  net.conv3 = make_group_layer(rng, group_order, c2, 1, kernel);
  return net;
}

std::vector<Param> PointCanonicalizer::params(const std::string& prefix) const {
  return head.params(prefix + ".head");
}

PointCanonicalizer make_point_canonicalizer(Rng& rng, std::size_t hidden) {
  return PointCanonicalizer{make_point_head(rng, hidden)};
}

// ---- discrete ---------------------------------------------------------------

namespace {

std::size_t argmax_lowest(std::span<const double> v, bool* tie) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  if (tie) {
    *tie = false;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (i != best && v[i] == v[best]) *tie = true;
  }
  return best;
}

}  // namespace

DiscreteCanonOutput canonicalize_discrete_with_logits(const Tensor& image, Tensor logits,
                                                      long group_order) {
  if (!image.defined() || image.rank() != 3)
    throw Error(Errc::ShapeMismatch, "canonicalize_discrete expects [C,H,W]");
  if (static_cast<long>(logits.size()) != group_order)
    throw Error(Errc::ShapeMismatch, "canonicalize_discrete: logits size != group order");
  DiscreteCanonOutput out;
  out.logits = logits;
  out.probs = softmax(logits);
  const std::size_t sel = argmax_lowest(out.logits.data(), &out.tie);
  out.selected = CyclicElement(static_cast<long>(sel), group_order);

  // Straight-through surrogate: one_hot + probs - stop_grad(probs). The
  // forward value equals the hard one-hot selection bit-exactly.
  Tensor one_hot = Tensor::zeros({static_cast<std::size_t>(group_order)});
  one_hot.raw_data()[sel] = 1.0;
  const Tensor weights = add(one_hot, sub(out.probs, detach(out.probs)));

  Tensor canonical;
  for (long h = 0; h < group_order; ++h) {
    const Tensor xh = rotate_hw(image, -h, group_order);  // rho(h)^{-1} x
    const Tensor term = mul(gather(weights, static_cast<std::size_t>(h)), xh);
    canonical = h == 0 ? term : add(canonical, term);
  }
  out.canonical_input = canonical;
  return out;
}

DiscreteCanonOutput canonicalize_discrete(const Tensor& image, const GCanonicalizer& net) {
  return canonicalize_discrete_with_logits(image, net.logits(image), net.group_order);
}

Tensor prior_loss_discrete(const DiscreteCanonOutput& out) {
  // Kronecker-delta prior at the identity: cross-entropy collapses to
  // -log probs[0].
  return cross_entropy(out.probs, 0);
}

// ---- continuous ------------------------------------------------------------

ContinuousCanonOutput canonicalize_continuous(const Tensor& points, const PointCanonicalizer& net) {
  const Tensor vectors = vector_head_points(points, net.head);
  const Tensor frame = gram_schmidt_rotation(vectors);  // rows transform as V -> V R^T
  ContinuousCanonOutput out;
  // The group element satisfying c(rho(Q) x) = Q c(x) is the transpose of
  // the Gram-Schmidt frame.
  out.rotation = transpose2d(frame);
  out.canonical_input = matmul(points, out.rotation);
  return out;
}

Tensor prior_loss_continuous(const ContinuousCanonOutput& out, double lambda) {
  if (!(lambda > 0.0)) throw Error(Errc::InvalidArgument, "prior_loss_continuous: lambda must be > 0");
  const std::size_t d = out.rotation.shape()[0];
  Tensor tr = gather(out.rotation, 0);
  for (std::size_t i = 1; i < d; ++i) tr = add(tr, gather(out.rotation, i * d + i));
  return mul(Tensor::scalar(lambda), sub(Tensor::scalar(static_cast<double>(d)), tr));
}

// ---- canonicalized forward ---------------------------------------------------

Tensor canonicalized_forward_image(const Tensor& image, const GCanonicalizer* canon,
                                   const std::function<Tensor(const Tensor&)>& predictor,
                                   OutputAction action) {
  if (canon == nullptr) return predictor(image);
  const DiscreteCanonOutput out = canonicalize_discrete(image, *canon);
  Tensor pred = predictor(out.canonical_input);
  if (action == OutputAction::Trivial) return pred;
  if (pred.rank() != 3 || pred.shape()[1] != pred.shape()[2])
    throw Error(Errc::ShapeMismatch,
                "group output action needs a square [C,H,W] prediction, got " +
                    shape_str(pred.shape()));
  return rotate_hw(pred, out.selected.k, out.selected.n);
}

Tensor canonicalized_forward_points(const Tensor& points, const PointCanonicalizer* canon,
                                    const std::function<Tensor(const Tensor&)>& predictor,
                                    OutputAction action) {
  if (canon == nullptr) return predictor(points);
  const ContinuousCanonOutput out = canonicalize_continuous(points, *canon);
  Tensor pred = predictor(out.canonical_input);
  if (action == OutputAction::Trivial) return pred;
  if (pred.rank() != 2 || pred.shape()[1] != 3)
    throw Error(Errc::ShapeMismatch,
                "group output action needs per-point [N,3] vectors, got " + shape_str(pred.shape()));
  return matmul(pred, transpose2d(out.rotation));
}

Tensor total_loss(const Tensor& task_loss, const Tensor& prior_loss, double beta) {
  if (beta < 0.0) throw Error(Errc::InvalidArgument, "total_loss: beta must be >= 0");
  if (!prior_loss.defined()) throw Error(Errc::InvalidArgument, "total_loss: prior loss required");
  const Tensor weighted = mul(Tensor::scalar(beta), prior_loss);
  if (!task_loss.defined()) return weighted;
  return add(task_loss, weighted);
}

}  // namespace canon
