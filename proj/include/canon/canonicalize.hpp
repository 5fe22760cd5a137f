#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "canon/equivariant.hpp"
#include "canon/groups.hpp"
#include "canon/tensor.hpp"

namespace canon {

// C_n-equivariant canonicalization network for images: lifting convolution,
// two group convolutions with equivariant normalization, spatial average to
// one logit per group element. The final convolution outputs a single
// channel so fiber_logits needs no channel mixing.
struct GCanonicalizer {
  long group_order = 4;
  // Fixed binomial smoothing passes applied to the canonicalizer's input
  // (never the predictor's). Interpolated rotations only approximately
  // commute with convolution on high-frequency content, so the fiber logits
  // are computed from a bandlimited view; the kernel is 90-degree symmetric,
  // which keeps the C4 path exact.
  int smoothing_passes = 2;
  GConvLayer lift;
  GNorm norm1;
  GConvLayer conv2;
  GNorm norm2;
  GConvLayer conv3;  // -> 1 channel

  std::vector<Param> params(const std::string& prefix = "canon") const;
  // Per-sample logits [n]. Training mode pools normalization statistics over
  // the batch and updates running stats; eval mode uses running stats.
  std::vector<Tensor> logits_batch(std::span<const Tensor> images, bool training);
  Tensor logits(const Tensor& image) const;  // eval mode, single sample
};

GCanonicalizer make_canonicalizer(Rng& rng, long group_order, std::size_t c1 = 4,
                                  std::size_t c2 = 4, std::size_t kernel = 3);

// SO(3) canonicalizer for point clouds: equivariant vector head followed by
// differentiable Gram-Schmidt.
struct PointCanonicalizer {
  PointHeadNet head;
  std::vector<Param> params(const std::string& prefix = "canon") const;
};

PointCanonicalizer make_point_canonicalizer(Rng& rng, std::size_t hidden = 16);

struct DiscreteCanonOutput {
  Tensor logits;            // [n], in-graph
  Tensor probs;             // softmax(logits)
  CyclicElement selected;   // argmax, lowest index on ties
  bool tie = false;         // metadata: exact tie encountered
  Tensor canonical_input;   // rho(selected)^{-1} x, straight-through in backward
};

struct ContinuousCanonOutput {
  Tensor rotation;         // [d,d] group element, in-graph
  Tensor canonical_input;  // points * rotation (the R^{-1} action)
  RotationMatrix rotation_value() const { return to_rotation(rotation); }
};

// Forward: hard argmax selection and exact inverse rotation. Backward: the
// one-hot selector is replaced by (one-hot + probs - stop_grad(probs)) so
// task gradients reach the logits while the forward value stays bit-equal
// to the hard path.
DiscreteCanonOutput canonicalize_discrete(const Tensor& image, const GCanonicalizer& net);
// Same selection/mixture applied to externally computed logits (training
// path where logits come from logits_batch).
DiscreteCanonOutput canonicalize_discrete_with_logits(const Tensor& image, Tensor logits,
                                                      long group_order);

// -log probs[identity]
Tensor prior_loss_discrete(const DiscreteCanonOutput& out);

ContinuousCanonOutput canonicalize_continuous(const Tensor& points, const PointCanonicalizer& net);

// lambda * (dim - tr(R)) == (lambda/2) * ||R - I||_F^2; zero iff R = I.
Tensor prior_loss_continuous(const ContinuousCanonOutput& out, double lambda);

enum class OutputAction { Trivial, Group };

// f(x) = rho'(c(x)) . p(rho(c(x))^{-1} x). Trivial rho' covers invariant
// tasks; Group transforms the prediction back (spatial rotation for image
// outputs, row-wise R^T for per-point vectors).
Tensor canonicalized_forward_image(const Tensor& image, const GCanonicalizer* canon,
                                   const std::function<Tensor(const Tensor&)>& predictor,
                                   OutputAction action);
Tensor canonicalized_forward_points(const Tensor& points, const PointCanonicalizer* canon,
                                    const std::function<Tensor(const Tensor&)>& predictor,
                                    OutputAction action);

// task_loss + beta * prior_loss; an undefined task tensor means prior-only
// (zero-shot canonicalizer training).
Tensor total_loss(const Tensor& task_loss, const Tensor& prior_loss, double beta);

}  // namespace canon
