#include "canon/harness.hpp"

#include <algorithm>
#include <cmath>

#include "canon/error.hpp"

namespace canon {

namespace {
constexpr double kPi = 3.14159265358979323846;

std::size_t argmax_index(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Vanilla: return "vanilla";
    case TrainMode::RotationAugmented: return "rotation-augmented";
    case TrainMode::Joint: return "joint";
    case TrainMode::ZeroShotCanon: return "zero-shot-canon";
  }
  return "?";
}

const char* to_string(AugKind a) {
  switch (a) {
    case AugKind::None: return "none";
    case AugKind::Small: return "small";
    case AugKind::Full: return "full";
    case AugKind::Group: return "group";
  }
  return "?";
}

const char* to_string(OptKind o) { return o == OptKind::Sgd ? "sgd" : "adam"; }

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "vanilla") return TrainMode::Vanilla;
  if (s == "rotation-augmented") return TrainMode::RotationAugmented;
  if (s == "joint") return TrainMode::Joint;
  if (s == "zero-shot-canon") return TrainMode::ZeroShotCanon;
  throw Error(Errc::Usage, "unknown train mode '" + s + "'");
}

AugKind aug_kind_from_string(const std::string& s) {
  if (s == "none") return AugKind::None;
  if (s == "small") return AugKind::Small;
  if (s == "full") return AugKind::Full;
  if (s == "group") return AugKind::Group;
  throw Error(Errc::Usage, "unknown augmentation kind '" + s + "'");
}

OptKind opt_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptKind::Sgd;
  if (s == "adam") return OptKind::Adam;
  throw Error(Errc::Usage, "unknown optimizer '" + s + "'");
}

// ---- bundles -------------------------------------------------------------------

std::vector<Param> ImageModelBundle::all_params() const {
  std::vector<Param> out;
  if (canon) {
    auto c = canon->params("canon");
    out.insert(out.end(), c.begin(), c.end());
  }
  auto p = predictor.params("pred");
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<Param> ImageModelBundle::trainable_params(TrainMode mode) const {
  if (mode == TrainMode::ZeroShotCanon) {
    if (!canon) throw Error(Errc::InvalidArgument, "zero-shot mode needs a canonicalizer");
    return canon->params("canon");
  }
  if (mode == TrainMode::Vanilla || mode == TrainMode::RotationAugmented)
    return predictor.params("pred");
  return all_params();
}

std::vector<Param> PointModelBundle::all_params() const {
  std::vector<Param> out;
  if (canon) {
    auto c = canon->params("canon");
    out.insert(out.end(), c.begin(), c.end());
  }
  auto p = predictor.params("pred");
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<Param> PointModelBundle::trainable_params(TrainMode mode) const {
  if (mode == TrainMode::ZeroShotCanon) {
    if (!canon) throw Error(Errc::InvalidArgument, "zero-shot mode needs a canonicalizer");
    return canon->params("canon");
  }
  if (mode == TrainMode::Vanilla || mode == TrainMode::RotationAugmented)
    return predictor.params("pred");
  return all_params();
}

ImageModelBundle build_image_classifier(std::uint64_t seed, std::size_t classes,
                                        std::size_t image_size, long group_order,
                                        bool with_canonicalizer, std::size_t pred_hidden,
                                        std::size_t canon_channels) {
  Rng rng(seed);
  ImageModelBundle bundle;
  bundle.group_order = group_order;
  if (with_canonicalizer)
    bundle.canon = make_canonicalizer(rng, group_order, canon_channels, canon_channels, 3);
  bundle.predictor = make_image_classifier(rng, classes, image_size, pred_hidden);
  return bundle;
}

PointModelBundle build_point_classifier(std::uint64_t seed, std::size_t classes,
                                        bool with_canonicalizer, std::size_t h1, std::size_t h2,
                                        std::size_t canon_hidden) {
  Rng rng(seed);
  PointModelBundle bundle;
  if (with_canonicalizer) bundle.canon = make_point_canonicalizer(rng, canon_hidden);
  bundle.predictor = make_point_classifier(rng, classes, h1, h2);
  return bundle;
}

// ---- augmentation ---------------------------------------------------------------

Tensor augment_image(AugKind kind, Rng& rng, const Tensor& image, long group_order) {
  CyclicElement applied;
  return augment_image_tracked(kind, rng, image, group_order, &applied);
}

Tensor augment_image_tracked(AugKind kind, Rng& rng, const Tensor& image, long group_order,
                             CyclicElement* applied) {
  *applied = CyclicElement::identity(group_order);
  switch (kind) {
    case AugKind::None:
      return image;
    case AugKind::Small:
      return rotate_image_angle(image, rng.uniform(-kPi / 18.0, kPi / 18.0));
    case AugKind::Full:
      return rotate_image_angle(image, rng.uniform(-kPi, kPi));
    case AugKind::Group: {
      *applied = CyclicElement(
          static_cast<long>(rng.below(static_cast<std::uint64_t>(group_order))), group_order);
      return rotate_image(image, *applied);
    }
  }
  return image;
}

Tensor augment_points(AugKind kind, Rng& rng, const Tensor& cloud) {
  switch (kind) {
    case AugKind::None:
      return cloud;
    case AugKind::Small: {
      std::array<double, 3> axis = {rng.normal(), rng.normal(), rng.normal()};
      const double angle = rng.uniform(-kPi / 18.0, kPi / 18.0);
      return rotate_points(cloud, RotationMatrix::from_axis_angle(axis, angle));
    }
    case AugKind::Full:
    case AugKind::Group:
      return rotate_points(cloud, sample_uniform_rotation(rng, 3));
  }
  return cloud;
}

// ---- training -------------------------------------------------------------------

namespace {

void check_finite_loss(double loss, int epoch, std::size_t batch, double lr) {
  if (!std::isfinite(loss))
    throw Error(Errc::NumericalFailure,
                "non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                    std::to_string(batch) + " (lr " + std::to_string(lr) + ")");
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

void optimizer_step(std::vector<Param>& params, AdamState& adam, const TrainConfig& config) {
  if (config.optimizer == OptKind::Adam)
    adam_step(params, adam, config.lr);
  else
    sgd_step(params, config.lr);
  zero_all_grads(params);
}

}  // namespace

std::vector<EpochMetrics> train_image(ImageModelBundle& bundle, const ImageDataset& data,
                                      const TrainConfig& config) {
  const bool uses_canon =
      config.mode == TrainMode::Joint || config.mode == TrainMode::ZeroShotCanon;
  if (uses_canon && !bundle.canon)
    throw Error(Errc::InvalidArgument, "mode needs a canonicalizer in the bundle");
  const bool zero_shot = config.mode == TrainMode::ZeroShotCanon;

  auto trainable = bundle.trainable_params(config.mode);
  // Freeze everything that is not trained so the tape skips its gradients.
  auto all = bundle.all_params();
  for (auto& p : all) p.value.set_requires_grad(false);
  for (auto& p : trainable) p.value.set_requires_grad(true);

  Rng rng(config.seed);
  AdamState adam;
  std::vector<EpochMetrics> history;
  history.reserve(static_cast<std::size_t>(config.epochs));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto order = shuffled_indices(data.count, rng);
    double task_sum = 0.0, prior_sum = 0.0;
    std::size_t seen = 0, correct = 0, batch_id = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_id) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> images;
      std::vector<std::size_t> labels;
      std::vector<CyclicElement> applied;
      images.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        CyclicElement g;
        images.push_back(augment_image_tracked(config.augmentation, rng, data.image(order[i]),
                                               config.group_order, &g));
        labels.push_back(data.labels[order[i]]);
        applied.push_back(g);
      }

      Tape tape;
      Tensor task_acc, prior_acc;
      std::vector<Tensor> logits_list;
      if (uses_canon) logits_list = bundle.canon->logits_batch(images, /*training=*/true);
      for (std::size_t b = 0; b < images.size(); ++b) {
        Tensor input = images[b];
        if (uses_canon) {
          auto out = canonicalize_discrete_with_logits(images[b], logits_list[b],
                                                       bundle.group_order);
          // delta prior composed with the augmentation element
          const Tensor prior =
              cross_entropy(out.probs, static_cast<std::size_t>(applied[b].k));
          prior_acc = b == 0 ? prior : add(prior_acc, prior);
          input = out.canonical_input;
        }
        // In zero-shot mode the predictor stays frozen and its loss is
        // tracked for the metrics only; the total loss below excludes it.
        const Tensor pred_logits = bundle.predictor.forward(input);
        const Tensor task = cross_entropy(softmax(pred_logits), labels[b]);
        task_acc = !task_acc.defined() ? task : add(task_acc, task);
        if (argmax_index(pred_logits.data()) == labels[b]) ++correct;
        ++seen;
      }
      const double inv_b = 1.0 / static_cast<double>(images.size());
      Tensor task_mean, prior_mean;
      if (task_acc.defined()) task_mean = mul(task_acc, Tensor::scalar(inv_b));
      if (prior_acc.defined()) prior_mean = mul(prior_acc, Tensor::scalar(inv_b));

      Tensor loss;
      if (zero_shot)
        loss = total_loss(Tensor(), prior_mean, config.beta);
      else if (uses_canon)
        loss = total_loss(task_mean, prior_mean, config.beta);
      else
        loss = task_mean;

      check_finite_loss(loss.item(), epoch, batch_id, config.lr);
      tape.backward(loss);
      optimizer_step(trainable, adam, config);

      if (task_mean.defined()) task_sum += task_mean.item() * static_cast<double>(images.size());
      if (prior_mean.defined()) prior_sum += prior_mean.item() * static_cast<double>(images.size());
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.task_loss = seen ? task_sum / static_cast<double>(seen) : 0.0;
    m.prior_loss = seen ? prior_sum / static_cast<double>(seen) : 0.0;
    m.accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    history.push_back(m);
  }
  // Leave every parameter trainable again for downstream callers.
  for (auto& p : all) p.value.set_requires_grad(true);
  return history;
}

std::vector<EpochMetrics> train_points(PointModelBundle& bundle, const PointDataset& data,
                                       const TrainConfig& config) {
  const bool uses_canon =
      config.mode == TrainMode::Joint || config.mode == TrainMode::ZeroShotCanon;
  if (uses_canon && !bundle.canon)
    throw Error(Errc::InvalidArgument, "mode needs a canonicalizer in the bundle");
  const bool zero_shot = config.mode == TrainMode::ZeroShotCanon;

  auto trainable = bundle.trainable_params(config.mode);
  auto all = bundle.all_params();
  for (auto& p : all) p.value.set_requires_grad(false);
  for (auto& p : trainable) p.value.set_requires_grad(true);

  Rng rng(config.seed);
  AdamState adam;
  std::vector<EpochMetrics> history;
  history.reserve(static_cast<std::size_t>(config.epochs));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto order = shuffled_indices(data.count, rng);
    double task_sum = 0.0, prior_sum = 0.0;
    std::size_t seen = 0, correct = 0, batch_id = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_id) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      Tape tape;
      Tensor task_acc, prior_acc;
      std::size_t batch_n = 0;
      for (std::size_t i = start; i < stop; ++i, ++batch_n) {
        const Tensor cloud = augment_points(config.augmentation, rng, data.cloud(order[i]));
        Tensor input = cloud;
        if (uses_canon) {
          auto out = canonicalize_continuous(cloud, *bundle.canon);
          const Tensor prior = prior_loss_continuous(out, 1.0);
          prior_acc = !prior_acc.defined() ? prior : add(prior_acc, prior);
          input = out.canonical_input;
        }
        const Tensor pred_logits = bundle.predictor.forward(input);
        const Tensor task = cross_entropy(softmax(pred_logits), data.labels[order[i]]);
        task_acc = !task_acc.defined() ? task : add(task_acc, task);
        if (argmax_index(pred_logits.data()) == data.labels[order[i]]) ++correct;
        ++seen;
      }
      const double inv_b = 1.0 / static_cast<double>(batch_n);
      Tensor task_mean, prior_mean;
      if (task_acc.defined()) task_mean = mul(task_acc, Tensor::scalar(inv_b));
      if (prior_acc.defined()) prior_mean = mul(prior_acc, Tensor::scalar(inv_b));

      Tensor loss;
      if (zero_shot)
        loss = total_loss(Tensor(), prior_mean, config.beta);
      else if (uses_canon)
        loss = total_loss(task_mean, prior_mean, config.beta);
      else
        loss = task_mean;

      check_finite_loss(loss.item(), epoch, batch_id, config.lr);
      tape.backward(loss);
      optimizer_step(trainable, adam, config);

      if (task_mean.defined()) task_sum += task_mean.item() * static_cast<double>(batch_n);
      if (prior_mean.defined()) prior_sum += prior_mean.item() * static_cast<double>(batch_n);
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.task_loss = seen ? task_sum / static_cast<double>(seen) : 0.0;
    m.prior_loss = seen ? prior_sum / static_cast<double>(seen) : 0.0;
    m.accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    history.push_back(m);
  }
  for (auto& p : all) p.value.set_requires_grad(true);
  return history;
}

// ---- evaluation -----------------------------------------------------------------

EvalReport evaluate_image(const ImageModelBundle& bundle, const ImageDataset& test,
                          long group_order) {
  if (test.count == 0) throw Error(Errc::InvalidArgument, "evaluate: empty test set");
  EvalReport report;
  report.test_size = test.count;
  report.angle_histogram.assign(static_cast<std::size_t>(group_order), 0);
  report.per_element_accuracy.assign(static_cast<std::size_t>(group_order), 0.0);

  std::size_t identity_hits = 0;
  std::vector<std::size_t> correct_per_g(static_cast<std::size_t>(group_order), 0);

  const auto predict = [&](const Tensor& x) -> std::size_t {
    if (bundle.canon) {
      auto out = canonicalize_discrete(x, *bundle.canon);
      return argmax_index(bundle.predictor.forward(out.canonical_input).data());
    }
    return argmax_index(bundle.predictor.forward(x).data());
  };

  for (std::size_t i = 0; i < test.count; ++i) {
    const Tensor x = test.image(i);
    if (bundle.canon) {
      auto out = canonicalize_discrete(x, *bundle.canon);
      const auto sel = static_cast<std::size_t>(out.selected.k);
      report.angle_histogram[sel % static_cast<std::size_t>(group_order)]++;
      if (out.selected.is_identity()) ++identity_hits;
    } else {
      report.angle_histogram[0]++;
      ++identity_hits;
    }
    for (long g = 0; g < group_order; ++g) {
      const Tensor xg = g == 0 ? x : rotate_image(x, CyclicElement(g, group_order));
      if (predict(xg) == test.labels[i]) ++correct_per_g[static_cast<std::size_t>(g)];
    }
  }

  const double n = static_cast<double>(test.count);
  report.accuracy = static_cast<double>(correct_per_g[0]) / n;
  std::size_t total_correct = 0;
  for (long g = 0; g < group_order; ++g) {
    total_correct += correct_per_g[static_cast<std::size_t>(g)];
    report.per_element_accuracy[static_cast<std::size_t>(g)] =
        static_cast<double>(correct_per_g[static_cast<std::size_t>(g)]) / n;
  }
  report.g_avg_accuracy =
      static_cast<double>(total_correct) / (n * static_cast<double>(group_order));
  report.identity_fraction = static_cast<double>(identity_hits) / n;
  return report;
}

EvalReport evaluate_points(const PointModelBundle& bundle, const PointDataset& test,
                           std::size_t rotations_per_sample, std::uint64_t seed) {
  if (test.count == 0) throw Error(Errc::InvalidArgument, "evaluate: empty test set");
  EvalReport report;
  report.test_size = test.count;
  const std::size_t bins = 18;  // rotation angle of the canonical element, [0, pi]
  report.angle_histogram.assign(bins, 0);
  report.per_element_accuracy.assign(rotations_per_sample + 1, 0.0);

  Rng rng(seed);
  std::size_t identity_hits = 0;
  std::vector<std::size_t> correct(rotations_per_sample + 1, 0);

  const auto predict = [&](const Tensor& p) -> std::size_t {
    if (bundle.canon) {
      auto out = canonicalize_continuous(p, *bundle.canon);
      return argmax_index(bundle.predictor.forward(out.canonical_input).data());
    }
    return argmax_index(bundle.predictor.forward(p).data());
  };

  for (std::size_t i = 0; i < test.count; ++i) {
    const Tensor p = test.cloud(i);
    if (bundle.canon) {
      auto out = canonicalize_continuous(p, *bundle.canon);
      const double angle = out.rotation_value().angle();
      const std::size_t bin =
          std::min(bins - 1, static_cast<std::size_t>(angle / kPi * static_cast<double>(bins)));
      report.angle_histogram[bin]++;
      if (angle < 0.1) ++identity_hits;
    } else {
      report.angle_histogram[0]++;
      ++identity_hits;
    }
    if (predict(p) == test.labels[i]) ++correct[0];
    for (std::size_t r = 0; r < rotations_per_sample; ++r) {
      const Tensor rotated = rotate_points(p, sample_uniform_rotation(rng, 3));
      if (predict(rotated) == test.labels[i]) ++correct[r + 1];
    }
  }

  const double n = static_cast<double>(test.count);
  report.accuracy = static_cast<double>(correct[0]) / n;
  std::size_t rotated_correct = 0;
  for (std::size_t r = 0; r <= rotations_per_sample; ++r)
    report.per_element_accuracy[r] = static_cast<double>(correct[r]) / n;
  for (std::size_t r = 1; r <= rotations_per_sample; ++r) rotated_correct += correct[r];
  report.g_avg_accuracy = rotations_per_sample == 0
                              ? report.accuracy
                              : static_cast<double>(rotated_correct) /
                                    (n * static_cast<double>(rotations_per_sample));
  report.identity_fraction = static_cast<double>(identity_hits) / n;
  return report;
}

}  // namespace canon
