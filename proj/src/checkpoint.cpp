#include "canon/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "canon/error.hpp"

namespace canon {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size()) throw Error(Errc::Truncated, std::string("checkpoint ends inside ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  double f64(const char* what) {
    const std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointBundle& bundle) {
  std::string out;
  out.reserve(64 + bundle.config_json.size());
  out.append("CANONKPT", 8);
  put_u32(out, bundle.version);
  put_u32(out, static_cast<std::uint32_t>(bundle.config_json.size()));
  out.append(bundle.config_json);
  put_u32(out, static_cast<std::uint32_t>(bundle.params.size()));
  for (const auto& p : bundle.params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.append(p.name);
    put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) put_u64(out, d);
    for (double v : p.value.data()) put_f64(out, v);
  }
  put_u32(out, static_cast<std::uint32_t>(bundle.rng_state.size()));
  for (auto w : bundle.rng_state) put_u64(out, w);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Errc::Io, "cannot open " + tmp + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(Errc::Io, "short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw Error(Errc::Io, "cannot rename " + tmp + " to " + path);
}

CheckpointBundle load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::Io, "cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), "CANONKPT", 8) != 0)
    throw Error(Errc::BadMagic, "not a CANONKPT checkpoint");
  Reader r{buf, 8};
  CheckpointBundle bundle;
  bundle.version = r.u32("version");
  if (bundle.version != kCheckpointVersion)
    throw Error(Errc::UnsupportedVersion, "checkpoint version " + std::to_string(bundle.version));
  const std::uint32_t config_len = r.u32("config length");
  bundle.config_json = r.bytes(config_len, "config");
  const std::uint32_t n_params = r.u32("parameter count");
  bundle.params.reserve(n_params);
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const std::uint32_t name_len = r.u32("parameter name length");
    std::string name = r.bytes(name_len, "parameter name");
    const std::uint32_t rank = r.u32("parameter rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64("parameter dim");
    std::vector<double> values(numel(shape));
    for (auto& v : values) v = r.f64("parameter data");
    bundle.params.push_back({std::move(name), Tensor::from_vector(std::move(shape), std::move(values), true)});
  }
  const std::uint32_t rng_words = r.u32("rng word count");
  bundle.rng_state.resize(rng_words);
  for (auto& w : bundle.rng_state) w = r.u64("rng state");
  return bundle;
}

void restore_params(std::vector<Param>& live, const std::vector<Param>& stored) {
  std::unordered_map<std::string, const Param*> index;
  for (const auto& p : stored) index[p.name] = &p;
  for (auto& p : live) {
    auto it = index.find(p.name);
    if (it == index.end())
      throw Error(Errc::CountMismatch, "checkpoint is missing parameter '" + p.name + "'");
    const Param& src = *it->second;
    if (src.value.shape() != p.value.shape())
      throw Error(Errc::ShapeMismatch, "checkpoint parameter '" + p.name + "' has shape " +
                                           shape_str(src.value.shape()) + ", expected " +
                                           shape_str(p.value.shape()));
    auto dst = p.value.raw_data();
    auto s = src.value.data();
    std::copy(s.begin(), s.end(), dst.begin());
  }
}

}  // namespace canon
