#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "canon/canonicalize.hpp"
#include "canon/datasets.hpp"
#include "canon/nets.hpp"

namespace canon {

enum class TrainMode { Vanilla, RotationAugmented, Joint, ZeroShotCanon };
enum class AugKind { None, Small, Full, Group };
enum class OptKind { Sgd, Adam };

const char* to_string(TrainMode m);
const char* to_string(AugKind a);
const char* to_string(OptKind o);
TrainMode train_mode_from_string(const std::string& s);
AugKind aug_kind_from_string(const std::string& s);
OptKind opt_kind_from_string(const std::string& s);

struct TrainConfig {
  std::uint64_t seed = 0;
  int epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  OptKind optimizer = OptKind::Adam;
  double beta = 100.0;  // prior weight
  long group_order = 8;
  TrainMode mode = TrainMode::Joint;
  AugKind augmentation = AugKind::None;
};

struct EpochMetrics {
  int epoch = 0;
  double task_loss = 0.0;
  double prior_loss = 0.0;
  double accuracy = 0.0;  // training accuracy over the epoch
};

struct EvalReport {
  double accuracy = 0.0;
  double g_avg_accuracy = 0.0;
  double identity_fraction = 0.0;
  std::vector<std::size_t> angle_histogram;   // selected element counts (originals)
  std::vector<double> per_element_accuracy;   // accuracy per applied group element
  std::size_t test_size = 0;
};

struct ImageModelBundle {
  long group_order = 8;
  std::optional<GCanonicalizer> canon;
  ImageClassifier predictor;

  std::vector<Param> all_params() const;
  std::vector<Param> trainable_params(TrainMode mode) const;
};

struct PointModelBundle {
  std::optional<PointCanonicalizer> canon;
  PointClassifier predictor;

  std::vector<Param> all_params() const;
  std::vector<Param> trainable_params(TrainMode mode) const;
};

// Model factories driven by the config (spec surface: deterministic builds
// from a seed; parameter counts reported via the nets).
ImageModelBundle build_image_classifier(std::uint64_t seed, std::size_t classes,
                                        std::size_t image_size, long group_order,
                                        bool with_canonicalizer, std::size_t pred_hidden = 8,
                                        std::size_t canon_channels = 4);
PointModelBundle build_point_classifier(std::uint64_t seed, std::size_t classes,
                                        bool with_canonicalizer, std::size_t h1 = 32,
                                        std::size_t h2 = 64, std::size_t canon_hidden = 16);

// Rotation augmentation: none, small (within +/-10 degrees), full (+/-180),
// or uniform over the group (C_n for images, Haar for clouds).
Tensor augment_image(AugKind kind, Rng& rng, const Tensor& image, long group_order);
// Group augmentation reports the applied element: under the delta prior a
// g-rotated sample's canonical orientation is g, so the prior target
// composes with the augmentation (identical to the plain identity prior
// whenever the canonicalizer is exactly equivariant).
Tensor augment_image_tracked(AugKind kind, Rng& rng, const Tensor& image, long group_order,
                             CyclicElement* applied);
Tensor augment_points(AugKind kind, Rng& rng, const Tensor& cloud);

// Minibatch training. Deterministic under a fixed config; throws
// NumericalFailure when the loss turns non-finite (message carries the batch
// id and learning rate). Zero-shot mode freezes the predictor and trains the
// canonicalizer on the prior loss alone.
std::vector<EpochMetrics> train_image(ImageModelBundle& bundle, const ImageDataset& data,
                                      const TrainConfig& config);
std::vector<EpochMetrics> train_points(PointModelBundle& bundle, const PointDataset& data,
                                       const TrainConfig& config);

// Accuracy on originals, G-averaged accuracy over all group elements, and
// canonicalizer statistics (selected elements on the untransformed test set).
EvalReport evaluate_image(const ImageModelBundle& bundle, const ImageDataset& test,
                          long group_order);
// Continuous analog: rotations_per_sample Haar rotations per cloud stand in
// for the group average; the angle histogram bins the canonicalizer's
// rotation angle on originals, and identity_fraction counts angles < 0.1 rad.
EvalReport evaluate_points(const PointModelBundle& bundle, const PointDataset& test,
                           std::size_t rotations_per_sample, std::uint64_t seed);

}  // namespace canon
