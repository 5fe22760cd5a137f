#include "canon/nets.hpp"

#include <cmath>

#include "canon/error.hpp"

namespace canon {

namespace {

Tensor he_normal(Rng& rng, Shape shape, double fan_in) {
  const double scale = std::sqrt(2.0 / fan_in);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

Tensor avgpool2(const Tensor& x) {
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const Tensor r = reshape(x, {c, h / 2, 2, w / 2, 2});
  return reduce_mean(r, {2, 4});
}

Tensor linear_row(const Tensor& row, const Tensor& w, const Tensor& b) {
  return add(reshape(matmul(reshape(row, {1, row.size()}), w), {w.shape()[1]}), b);
}

}  // namespace

Tensor ImageClassifier::forward(const Tensor& image) const {
  if (!image.defined() || image.rank() != 3)
    throw Error(Errc::ShapeMismatch, "ImageClassifier expects [C,H,W]");
  Tensor x = relu(add(conv2d(image, conv1_w, 1), reshape(conv1_b, {hidden, 1, 1})));
  x = avgpool2(x);
  x = relu(add(conv2d(x, conv2_w, 1), reshape(conv2_b, {hidden, 1, 1})));
  x = avgpool2(x);
  const std::size_t flat = x.size();
  return linear_row(reshape(x, {flat}), fc_w, fc_b);
}

std::vector<Param> ImageClassifier::params(const std::string& prefix) const {
  return {{prefix + ".conv1.weight", conv1_w}, {prefix + ".conv1.bias", conv1_b},
          {prefix + ".conv2.weight", conv2_w}, {prefix + ".conv2.bias", conv2_b},
          {prefix + ".fc.weight", fc_w},       {prefix + ".fc.bias", fc_b}};
}

std::size_t ImageClassifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params()) n += p.value.size();
  return n;
}

ImageClassifier make_image_classifier(Rng& rng, std::size_t classes, std::size_t image_size,
                                      std::size_t hidden) {
  if (image_size % 4 != 0)
    throw Error(Errc::InvalidArgument, "image size must be divisible by 4");
  if (classes == 0) throw Error(Errc::InvalidArgument, "need at least one class");
  ImageClassifier net;
  net.classes = classes;
  net.hidden = hidden;
  net.image_size = image_size;
  net.conv1_w = he_normal(rng, {hidden, 1, 3, 3}, 9.0);
  net.conv1_b = Tensor::zeros({hidden}, true);
  net.conv2_w = he_normal(rng, {hidden, hidden, 3, 3}, static_cast<double>(9 * hidden));
  net.conv2_b = Tensor::zeros({hidden}, true);
  const std::size_t flat = hidden * (image_size / 4) * (image_size / 4);
  net.fc_w = he_normal(rng, {flat, classes}, static_cast<double>(flat));
  net.fc_b = Tensor::zeros({classes}, true);
  return net;
}

Tensor PointClassifier::forward(const Tensor& points) const {
  if (!points.defined() || points.rank() != 2 || points.shape()[1] != 3)
    throw Error(Errc::ShapeMismatch, "PointClassifier expects [N,3]");
  Tensor h = relu(add(matmul(points, w1), b1));
  h = relu(add(matmul(h, w2), b2));
  const Tensor pooled = reduce_max(h, {0}).values;  // [h2]
  return linear_row(pooled, w3, b3);
}

std::vector<Param> PointClassifier::params(const std::string& prefix) const {
  return {{prefix + ".w1", w1}, {prefix + ".b1", b1}, {prefix + ".w2", w2},
          {prefix + ".b2", b2}, {prefix + ".w3", w3}, {prefix + ".b3", b3}};
}

std::size_t PointClassifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params()) n += p.value.size();
  return n;
}

PointClassifier make_point_classifier(Rng& rng, std::size_t classes, std::size_t h1,
                                      std::size_t h2) {
  if (classes == 0) throw Error(Errc::InvalidArgument, "need at least one class");
  PointClassifier net;
  net.classes = classes;
  net.w1 = he_normal(rng, {3, h1}, 3.0);
  net.b1 = Tensor::zeros({h1}, true);
  net.w2 = he_normal(rng, {h1, h2}, static_cast<double>(h1));
  net.b2 = Tensor::zeros({h2}, true);
  net.w3 = he_normal(rng, {h2, classes}, static_cast<double>(h2));
  net.b3 = Tensor::zeros({classes}, true);
  return net;
}

}  // namespace canon
