#include "canon/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "canon/error.hpp"
#include "canon/groups.hpp"
#include "canon/rng.hpp"

namespace canon {

Tensor ImageDataset::image(std::size_t i) const {
  if (i >= count) throw Error(Errc::IndexOutOfRange, "image index", i);
  const std::size_t n = channels * height * width;
  std::vector<double> v(pixels.begin() + static_cast<long>(i * n),
                        pixels.begin() + static_cast<long>((i + 1) * n));
  return Tensor::from_vector({channels, height, width}, std::move(v));
}

Tensor PointDataset::cloud(std::size_t i) const {
  if (i >= count) throw Error(Errc::IndexOutOfRange, "cloud index", i);
  const std::size_t n = points_per_cloud * 3;
  std::vector<double> v(coords.begin() + static_cast<long>(i * n),
                        coords.begin() + static_cast<long>((i + 1) * n));
  return Tensor::from_vector({points_per_cloud, 3}, std::move(v));
}

// ---- toy images -------------------------------------------------------------

namespace {

struct Segment {
  double x0, y0, x1, y1;
};

// Stroke motifs in logical [-1,1]^2 coordinates (x right, y up), upright.
// None has any rotational self-symmetry; the generator verifies this.
const std::vector<std::vector<Segment>>& glyph_motifs() {
  static const std::vector<std::vector<Segment>> motifs = {
      // L
      {{-0.45, 0.70, -0.45, -0.60}, {-0.45, -0.60, 0.50, -0.60}},
      // arrow (up)
      {{0.0, -0.70, 0.0, 0.55}, {0.0, 0.70, -0.45, 0.15}, {0.0, 0.70, 0.45, 0.15}},
      // F
      {{-0.45, -0.70, -0.45, 0.70}, {-0.45, 0.70, 0.50, 0.70}, {-0.45, 0.05, 0.30, 0.05}},
      // J
      {{-0.30, 0.70, 0.45, 0.70}, {0.45, 0.70, 0.45, -0.35}, {0.45, -0.35, 0.0, -0.70}},
      // seven
      {{-0.50, 0.70, 0.50, 0.70}, {0.50, 0.70, -0.20, -0.70}},
      // P
      {{-0.45, -0.70, -0.45, 0.70},
       {-0.45, 0.70, 0.35, 0.70},
       {0.35, 0.70, 0.35, 0.05},
       {0.35, 0.05, -0.45, 0.05}},
      // r
      {{-0.30, -0.60, -0.30, 0.45}, {-0.30, 0.20, 0.40, 0.45}},
      // flag
      {{-0.40, -0.70, -0.40, 0.70}, {-0.40, 0.70, 0.50, 0.45}, {-0.40, 0.25, 0.50, 0.45}},
      // cane
      {{-0.35, -0.70, -0.35, 0.35}, {-0.35, 0.35, 0.05, 0.68}, {0.05, 0.68, 0.42, 0.40}},
      // b
      {{-0.40, 0.70, -0.40, -0.70},
       {-0.40, -0.70, 0.35, -0.70},
       {0.35, -0.70, 0.35, -0.05},
       {0.35, -0.05, -0.40, -0.05}},
  };
  return motifs;
}

double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = s.x0 + t * dx, cy = s.y0 + t * dy;
  return std::hypot(px - cx, py - cy);
}

void render_glyph(std::vector<double>& out, std::size_t size, std::size_t class_index, double scale,
                  double dx, double dy, double brightness) {
  const auto& segments = glyph_motifs()[class_index % glyph_motifs().size()];
  const double half = (static_cast<double>(size) - 1.0) / 2.0;
  const double extent = half * 0.80 * scale;  // logical unit in pixels
  const double stroke = static_cast<double>(size) * 0.060;
  const double aa = 0.9;
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const double x = (static_cast<double>(c) - half - dx) / extent;
      const double y = (half - static_cast<double>(r) - dy) / extent;
      double best = 1e9;
      for (const auto& s : segments) best = std::min(best, segment_distance(x, y, s));
      const double dist_px = best * extent;
      const double v = std::clamp(0.5 + (stroke - dist_px) / aa, 0.0, 1.0);
      out[r * size + c] = std::max(out[r * size + c], brightness * v);
    }
  }
}

}  // namespace

std::vector<double> toy_image_prototype(std::size_t class_index, std::size_t size) {
  std::vector<double> out(size * size, 0.0);
  render_glyph(out, size, class_index, 1.0, 0.0, 0.0, 1.0);
  return out;
}

ImageDataset generate_toy_images(std::uint64_t seed, std::size_t n_samples, std::size_t n_classes,
                                 std::size_t size) {
  if (size < 16) throw Error(Errc::InvalidArgument, "toy images need size >= 16");
  if (n_classes == 0 || n_classes > 10)
    throw Error(Errc::InvalidArgument, "toy images support 1..10 classes");

  // Asymmetry gate: every prototype must differ from all of its nontrivial
  // C8 rotations by more than 10% of its norm.
  for (std::size_t cls = 0; cls < n_classes; ++cls) {
    auto proto = toy_image_prototype(cls, size);
    const Tensor t = Tensor::from_vector({1, size, size}, proto);
    double norm = 0.0;
    for (double v : proto) norm += v * v;
    norm = std::sqrt(norm);
    for (long k = 1; k < 8; ++k) {
      const Tensor rot = rotate_image(t, CyclicElement(k, 8));
      double diff = 0.0;
      const auto rv = rot.data();
      for (std::size_t i = 0; i < proto.size(); ++i) {
        const double d = proto[i] - rv[i];
        diff += d * d;
      }
      if (std::sqrt(diff) <= 0.10 * norm)
        throw Error(Errc::InvalidArgument,
                    "glyph prototype " + std::to_string(cls) + " too symmetric under C8");
    }
  }

  Rng rng(seed);
  ImageDataset data;
  data.name = "toy-images";
  data.count = n_samples;
  data.channels = 1;
  data.height = size;
  data.width = size;
  data.class_count = n_classes;
  data.canonical_orientation = true;
  data.pixels.assign(n_samples * size * size, 0.0);
  data.labels.resize(n_samples);

  for (std::size_t i = 0; i < n_samples; ++i) {
    const std::size_t cls = i % n_classes;  // balanced by construction
    data.labels[i] = cls;
    std::vector<double> img(size * size, 0.0);
    const double scale = rng.uniform(0.85, 1.05);
    const double dx = rng.uniform(-1.5, 1.5);
    const double dy = rng.uniform(-1.5, 1.5);
    const double brightness = rng.uniform(0.75, 1.0);
    render_glyph(img, size, cls, scale, dx, dy, brightness);
    for (auto& v : img) v = std::clamp(v + 0.03 * rng.normal(), 0.0, 1.0);
    std::copy(img.begin(), img.end(), data.pixels.begin() + static_cast<long>(i * size * size));
  }
  return data;
}

// ---- toy point clouds ----------------------------------------------------------

namespace {

// Parametric asymmetric shapes in canonical pose; part label is the second
// output. Points are later jittered and centered.
void shape_point(std::size_t cls, double t, double u, double* out, std::size_t* part) {
  switch (cls % 5) {
    case 0: {  // chiral helix, 1.5 turns, thickening
      const double a = t * 3.0 * 3.14159265358979323846;
      const double r = 0.45 + 0.10 * t;
      out[0] = r * std::cos(a);
      out[1] = r * std::sin(a);
      out[2] = t - 0.5;
      *part = t < 0.5 ? 0 : 1;
      break;
    }
    case 1: {  // bent prism: unequal legs meeting at a corner
      if (t < 0.65) {
        const double s = t / 0.65;
        out[0] = 0.12 * u;
        out[1] = 0.12 * (1.0 - u);
        out[2] = -0.6 + s * 1.0;
        *part = 0;
      } else {
        const double s = (t - 0.65) / 0.35;
        out[0] = s * 0.55;
        out[1] = 0.12 * u;
        out[2] = 0.4 + 0.12 * (1.0 - u) * 0.5;
        *part = 1;
      }
      break;
    }
    case 2: {  // twisted ribbon (chiral); tilted center line kills the
               // residual two-fold symmetry about the x axis
      const double a = t * 3.14159265358979323846;
      out[0] = t - 0.5;
      out[1] = 0.14 * t + 0.28 * (2.0 * u - 1.0) * std::cos(a);
      out[2] = 0.28 * (2.0 * u - 1.0) * std::sin(a);
      *part = u < 0.5 ? 0 : 1;
      break;
    }
    case 3: {  // tadpole: ball head plus tilted tail
      if (t < 0.4) {
        const double theta = t / 0.4 * 3.14159265358979323846;
        const double phi = u * 2.0 * 3.14159265358979323846;
        const double r = 0.28;
        out[0] = 0.40 + r * std::sin(theta) * std::cos(phi);
        out[1] = r * std::sin(theta) * std::sin(phi);
        out[2] = r * std::cos(theta);
        *part = 0;
      } else {
        const double s = (t - 0.4) / 0.6;
        out[0] = 0.40 - s * 1.0;
        out[1] = 0.05 * (2.0 * u - 1.0);
        out[2] = s * 0.35;
        *part = 1;
      }
      break;
    }
    default: {  // staircase with a blob at the start
      if (t < 0.15) {
        const double phi = u * 2.0 * 3.14159265358979323846;
        out[0] = -0.60 + 0.12 * std::cos(phi);
        out[1] = 0.12 * std::sin(phi);
        out[2] = -0.40 + 0.12 * std::sin(phi * 2.0);
        *part = 0;
      } else {
        const double s = (t - 0.15) / 0.85;
        const double legs[5][2] = {{-0.6, -0.4}, {-0.2, -0.4}, {-0.2, 0.0}, {0.25, 0.0}, {0.25, 0.45}};
        const double seg = s * 4.0;
        const int li = std::min(3, static_cast<int>(seg));
        const double f = seg - li;
        out[0] = legs[li][0] + f * (legs[li + 1][0] - legs[li][0]);
        out[1] = 0.10 * (2.0 * u - 1.0);
        out[2] = legs[li][1] + f * (legs[li + 1][1] - legs[li][1]);
        *part = s < 0.5 ? 1 : 2;
      }
      break;
    }
  }
}

std::size_t shape_part_count(std::size_t cls) { return (cls % 5) == 4 ? 3 : 2; }

}  // namespace

std::vector<double> toy_pointcloud_prototype(std::size_t class_index, std::size_t points) {
  std::vector<double> out(points * 3, 0.0);
  std::size_t part = 0;
  for (std::size_t i = 0; i < points; ++i) {
    const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(points);
    const double u = std::fmod(static_cast<double>(i) * 0.61803398875, 1.0);
    shape_point(class_index, t, u, &out[i * 3], &part);
  }
  double mean[3] = {0, 0, 0};
  for (std::size_t i = 0; i < points; ++i)
    for (int d = 0; d < 3; ++d) mean[d] += out[i * 3 + static_cast<std::size_t>(d)];
  for (int d = 0; d < 3; ++d) mean[d] /= static_cast<double>(points);
  for (std::size_t i = 0; i < points; ++i)
    for (int d = 0; d < 3; ++d) out[i * 3 + static_cast<std::size_t>(d)] -= mean[d];
  return out;
}

PointDataset generate_toy_pointclouds(std::uint64_t seed, std::size_t n_samples,
                                      std::size_t n_classes, std::size_t points_per_cloud) {
  if (points_per_cloud < 64)
    throw Error(Errc::InvalidArgument, "toy point clouds need at least 64 points");
  if (n_classes == 0 || n_classes > 5)
    throw Error(Errc::InvalidArgument, "toy point clouds support 1..5 classes");
  Rng rng(seed);
  PointDataset data;
  data.name = "toy-points";
  data.count = n_samples;
  data.points_per_cloud = points_per_cloud;
  data.class_count = n_classes;
  data.part_count = 0;
  data.coords.assign(n_samples * points_per_cloud * 3, 0.0);
  data.labels.resize(n_samples);
  data.part_labels.assign(n_samples * points_per_cloud, 0);

  for (std::size_t cls = 0; cls < n_classes; ++cls)
    data.part_count = std::max(data.part_count, shape_part_count(cls));

  for (std::size_t i = 0; i < n_samples; ++i) {
    const std::size_t cls = i % n_classes;
    data.labels[i] = cls;
    double* cloud = &data.coords[i * points_per_cloud * 3];
    std::size_t* parts = &data.part_labels[i * points_per_cloud];
    const double scale = rng.uniform(0.9, 1.1);
    for (std::size_t j = 0; j < points_per_cloud; ++j) {
      const double t = rng.uniform();
      const double u = rng.uniform();
      shape_point(cls, t, u, &cloud[j * 3], &parts[j]);
      for (int d = 0; d < 3; ++d)
        cloud[j * 3 + static_cast<std::size_t>(d)] =
            scale * cloud[j * 3 + static_cast<std::size_t>(d)] + 0.02 * rng.normal();
    }
    double mean[3] = {0, 0, 0};
    for (std::size_t j = 0; j < points_per_cloud; ++j)
      for (int d = 0; d < 3; ++d) mean[d] += cloud[j * 3 + static_cast<std::size_t>(d)];
    for (int d = 0; d < 3; ++d) mean[d] /= static_cast<double>(points_per_cloud);
    for (std::size_t j = 0; j < points_per_cloud; ++j)
      for (int d = 0; d < 3; ++d) cloud[j * 3 + static_cast<std::size_t>(d)] -= mean[d];
  }
  return data;
}

// ---- IDX ------------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::ifstream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw Error(Errc::Truncated, "unexpected end of file reading " + what);
  return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace

ImageDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw Error(Errc::Io, "cannot open " + images_path);
  if (read_be32(fi, "image magic") != 0x00000803u)
    throw Error(Errc::BadMagic, "image file magic is not 0x00000803");
  const std::uint32_t n = read_be32(fi, "image count");
  const std::uint32_t rows = read_be32(fi, "row count");
  const std::uint32_t cols = read_be32(fi, "column count");
  if (rows != cols) throw Error(Errc::NonSquareImage, "IDX images must be square");
  std::vector<unsigned char> raw(static_cast<std::size_t>(n) * rows * cols);
  if (!fi.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw Error(Errc::Truncated, "image payload shorter than header promises");

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw Error(Errc::Io, "cannot open " + labels_path);
  if (read_be32(fl, "label magic") != 0x00000801u)
    throw Error(Errc::BadMagic, "label file magic is not 0x00000801");
  const std::uint32_t nl = read_be32(fl, "label count");
  if (nl != n)
    throw Error(Errc::CountMismatch, "image count " + std::to_string(n) + " != label count " +
                                         std::to_string(nl));
  std::vector<unsigned char> labels(nl);
  if (!fl.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(labels.size())))
    throw Error(Errc::Truncated, "label payload shorter than header promises");

  ImageDataset data;
  data.name = "idx";
  data.count = n;
  data.channels = 1;
  data.height = rows;
  data.width = cols;
  data.canonical_orientation = true;
  data.pixels.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) data.pixels[i] = static_cast<double>(raw[i]) / 255.0;
  data.labels.resize(nl);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < nl; ++i) {
    data.labels[i] = labels[i];
    max_label = std::max
        (max_label, static_cast<std::size_t>(labels[i]));
  }
  data.class_count = max_label + 1;
  return data;
}

void save_idx(const ImageDataset& data, const std::string& images_path,
              const std::string& labels_path) {
  if (data.channels != 1) throw Error(Errc::InvalidArgument, "IDX export supports 1 channel");
  std::ofstream fi(images_path, std::ios::binary);
  if (!fi) throw Error(Errc::Io, "cannot open " + images_path + " for writing");
  write_be32(fi, 0x00000803u);
  write_be32(fi, static_cast<std::uint32_t>(data.count));
  write_be32(fi, static_cast<std::uint32_t>(data.height));
  write_be32(fi, static_cast<std::uint32_t>(data.width));
  for (double v : data.pixels) {
    const double q = std::clamp(std::round(v * 255.0), 0.0, 255.0);
    const unsigned char b = static_cast<unsigned char>(q);
    fi.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!fi) throw Error(Errc::Io, "short write to " + images_path);

  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl) throw Error(Errc::Io, "cannot open " + labels_path + " for writing");
  write_be32(fl, 0x00000801u);
  write_be32(fl, static_cast<std::uint32_t>(data.count));
  for (std::size_t v : data.labels) {
    const unsigned char b = static_cast<unsigned char>(v);
    fl.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!fl) throw Error(Errc::Io, "short write to " + labels_path);
}

// ---- point container ---------------------------------------------------------------

namespace {

template <class T>
void write_le(std::ofstream& out, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<char*>(b), sizeof(T));
}

template <class T>
T read_le(std::ifstream& in, const std::string& what) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T)))
    throw Error(Errc::Truncated, "unexpected end of file reading " + what);
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_points(const PointDataset& data, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::Io, "cannot open " + path + " for writing");
  f.write("CANONPTS", 8);
  write_le<std::uint32_t>(f, 1u);  // version
  write_le<std::uint64_t>(f, data.count);
  write_le<std::uint64_t>(f, data.points_per_cloud);
  write_le<std::uint64_t>(f, data.class_count);
  write_le<std::uint64_t>(f, data.part_count);
  for (double v : data.coords) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_le<std::uint64_t>(f, bits);
  }
  for (std::size_t v : data.labels) write_le<std::uint64_t>(f, v);
  for (std::size_t v : data.part_labels) write_le<std::uint64_t>(f, v);
  if (!f) throw Error(Errc::Io, "short write to " + path);
}

PointDataset load_points(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::Io, "cannot open " + path);
  char magic[8];
  if (!f.read(magic, 8)) throw Error(Errc::Truncated, "missing magic");
  if (std::memcmp(magic, "CANONPTS", 8) != 0) throw Error(Errc::BadMagic, "not a CANONPTS file");
  const auto version = read_le<std::uint32_t>(f, "version");
  if (version != 1u)
    throw Error(Errc::UnsupportedVersion, "CANONPTS version " + std::to_string(version));
  PointDataset data;
  data.name = "points-file";
  data.count = read_le<std::uint64_t>(f, "count");
  data.points_per_cloud = read_le<std::uint64_t>(f, "points per cloud");
  data.class_count = read_le<std::uint64_t>(f, "class count");
  data.part_count = read_le<std::uint64_t>(f, "part count");
  data.coords.resize(data.count * data.points_per_cloud * 3);
  for (auto& v : data.coords) {
    const std::uint64_t bits = read_le<std::uint64_t>(f, "coordinates");
    std::memcpy(&v, &bits, 8);
  }
  data.labels.resize(data.count);
  for (auto& v : data.labels) v = read_le<std::uint64_t>(f, "labels");
  data.part_labels.resize(data.count * data.points_per_cloud);
  for (auto& v : data.part_labels) v = read_le<std::uint64_t>(f, "part labels");
  return data;
}

}  // namespace canon
