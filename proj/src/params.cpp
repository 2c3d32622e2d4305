#include "diffris/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "diffris/errors.hpp"

namespace diffris {

// ---- Rng -------------------------------------------------------------------

Rng Rng::derive(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return Rng(z ^ (z >> 31));
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ParameterError("Rng::below: empty range");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::gumbel() {
  double u = uniform();
  while (u <= 0.0) u = uniform();
  return -std::log(-std::log(u));
}

Matrix Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal() * stddev;
  return m;
}

Matrix Rng::gumbel_matrix(Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gumbel();
  return m;
}

// ---- ParamStore ------------------------------------------------------------

Param& ParamStore::add(std::string name, Matrix init, bool trainable) {
  if (tensors_.contains(name)) throw UsageError("parameter registered twice: " + name);
  round_to_float32(init);
  Param p;
  p.value = std::move(init);
  p.trainable = trainable;
  return tensors_.emplace(std::move(name), std::move(p)).first->second;
}

bool ParamStore::contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }

Param& ParamStore::at(std::string_view name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw UsageError("unknown parameter: " + std::string(name));
  return it->second;
}

const Param& ParamStore::at(std::string_view name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw UsageError("unknown parameter: " + std::string(name));
  return it->second;
}

ad::Var ParamStore::bind(ad::Tape& tape, std::string_view name) {
  Param& p = at(name);
  return tape.parameter(p.value, p.trainable ? &p.grad : nullptr);
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : tensors_) p.grad.resize(0, 0);
}

void ParamStore::set_trainable(std::string_view prefix, bool trainable) {
  for (auto& [name, p] : tensors_) {
    if (name.starts_with(prefix)) p.trainable = trainable;
  }
}

std::size_t ParamStore::count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& [name, p] : tensors_) {
    if (name.starts_with(prefix)) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

std::uint64_t ParamStore::digest(std::string_view prefix) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, p] : tensors_) {
    if (!name.starts_with(prefix)) continue;
    mix(name.data(), name.size());
    const std::int64_t shape[2] = {p.value.rows(), p.value.cols()};
    mix(shape, sizeof(shape));
    mix(p.value.data(), sizeof(double) * static_cast<std::size_t>(p.value.size()));
  }
  return h;
}

void round_to_float32(Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  }
}

// ---- container -------------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(std::string_view in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw IoError("container truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace

std::string encode_container(const TensorMap& tensors) {
  std::string out = "DRIS";
  put_u32(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i])));
    }
  }
  return out;
}

TensorMap decode_container(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != "DRIS") throw IoError("not a DRIS container");
  std::size_t pos = 4;
  const std::uint32_t version = get_u32(bytes, pos);
  if (version != kContainerVersion) {
    throw IoError("unsupported DRIS container version " + std::to_string(version));
  }
  const std::uint32_t count = get_u32(bytes, pos);
  TensorMap tensors;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = get_u32(bytes, pos);
    if (pos + len > bytes.size()) throw IoError("container truncated in tensor name");
    std::string name(bytes.substr(pos, len));
    pos += len;
    const std::uint32_t rows = get_u32(bytes, pos);
    const std::uint32_t cols = get_u32(bytes, pos);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes, pos)));
    }
    tensors.emplace(std::move(name), std::move(m));
  }
  if (pos != bytes.size()) throw IoError("trailing bytes after DRIS container");
  return tensors;
}

void write_container(const std::filesystem::path& path, const TensorMap& tensors) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  const std::string bytes = encode_container(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

TensorMap read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_container(ss.str());
}

}  // namespace diffris
