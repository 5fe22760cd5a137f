#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "canon/tensor.hpp"

namespace canon {

struct ImageDataset {
  std::string name;
  std::size_t count = 0;
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t class_count = 0;
  bool canonical_orientation = true;
  std::vector<double> pixels;        // count*channels*height*width, in [0,1]
  std::vector<std::size_t> labels;   // count

  Tensor image(std::size_t i) const;  // leaf [C,H,W]
};

struct PointDataset {
  std::string name;
  std::size_t count = 0;
  std::size_t points_per_cloud = 0;
  std::size_t class_count = 0;
  std::size_t part_count = 0;
  std::vector<double> coords;            // count*points*3, each cloud centered
  std::vector<std::size_t> labels;       // count
  std::vector<std::size_t> part_labels;  // count*points

  Tensor cloud(std::size_t i) const;  // leaf [P,3]
};

// Procedural rotationally-asymmetric glyphs (L/T/arrow-style stroke motifs)
// in a fixed upright orientation, with per-sample scale/translation/
// brightness jitter and pixel noise. Every class prototype differs from all
// of its nontrivial C8 rotations by more than 10% of its norm (checked at
// generation time).
ImageDataset generate_toy_images(std::uint64_t seed, std::size_t n_samples, std::size_t n_classes,
                                 std::size_t size);

// Renders the jitter-free prototype of one class (used by the asymmetry
// tests).
std::vector<double> toy_image_prototype(std::size_t class_index, std::size_t size);

// Asymmetric 3D shapes (chiral helix, bent prism, twisted ribbon, ...) in a
// canonical pose; per-point part labels for the segmentation variant. Each
// cloud is exactly centered after jitter.
PointDataset generate_toy_pointclouds(std::uint64_t seed, std::size_t n_samples,
                                      std::size_t n_classes, std::size_t points_per_cloud);

std::vector<double> toy_pointcloud_prototype(std::size_t class_index, std::size_t points);

// IDX (MNIST-style) ingestion: big-endian magic 0x803 for images and 0x801
// for labels, u8 payload. Pixels are scaled to [0,1]; image and label counts
// are cross-checked.
ImageDataset load_idx(const std::string& images_path, const std::string& labels_path);
// Writes the dataset in the same format (pixels quantized to bytes).
void save_idx(const ImageDataset& data, const std::string& images_path,
              const std::string& labels_path);

// Simple binary container for point datasets ("CANONPTS", little-endian).
void save_points(const PointDataset& data, const std::string& path);
PointDataset load_points(const std::string& path);

}  // namespace canon
