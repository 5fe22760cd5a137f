#pragma once

#include <string>
#include <vector>

#include "canon/rng.hpp"
#include "canon/tensor.hpp"

namespace canon {

// Small unconstrained image classifier: two conv blocks with 2x2 average
// pooling, then a linear head on the flattened grid. Deliberately not
// rotation-robust; that property is what canonicalization must supply.
struct ImageClassifier {
  std::size_t classes = 0;
  std::size_t hidden = 8;
  std::size_t image_size = 24;
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor fc_w, fc_b;

  Tensor forward(const Tensor& image) const;  // [classes] logits
  std::vector<Param> params(const std::string& prefix = "pred") const;
  std::size_t parameter_count() const;
};

// image_size must be divisible by 4 (two pooling stages).
ImageClassifier make_image_classifier(Rng& rng, std::size_t classes, std::size_t image_size,
                                      std::size_t hidden = 8);

// Shared per-point MLP with max pooling and a linear head (PointNet-style).
// Acts on raw coordinates, so it is deliberately not rotation-invariant.
struct PointClassifier {
  std::size_t classes = 0;
  Tensor w1, b1;  // [3,h1]
  Tensor w2, b2;  // [h1,h2]
  Tensor w3, b3;  // [h2,classes]

  Tensor forward(const Tensor& points) const;  // [classes] logits
  std::vector<Param> params(const std::string& prefix = "pred") const;
  std::size_t parameter_count() const;
};

PointClassifier make_point_classifier(Rng& rng, std::size_t classes, std::size_t h1 = 32,
                                      std::size_t h2 = 64);

}  // namespace canon
