#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <string_view>

#include "diffris/autodiff.hpp"

namespace diffris {

// Seeded pseudo-random source. The bit stream comes from std::mt19937_64,
// whose output sequence is fixed by the standard; the distribution mappings
// below are spelled out so results do not depend on the standard library
// vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Stream for item `index` of a run seeded with `seed`.
  static Rng derive(std::uint64_t seed, std::uint64_t index);

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1).
  double uniform();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  // Gumbel(0, 1).
  double gumbel();

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev);
  Matrix gumbel_matrix(Eigen::Index rows, Eigen::Index cols);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

struct Param {
  Matrix value;
  Matrix grad;
  bool trainable = true;
};

// Named parameter tensors. Names are slash-separated ("cp_adapter/W_q");
// iteration order is lexicographic so serialization is deterministic.
class ParamStore {
 public:
  using Map = std::map<std::string, Param, std::less<>>;

  Param& add(std::string name, Matrix init, bool trainable = true);
  [[nodiscard]] bool contains(std::string_view name) const;
  [[nodiscard]] Param& at(std::string_view name);
  [[nodiscard]] const Param& at(std::string_view name) const;

  // Binds a parameter onto a tape. Trainable parameters collect gradients
  // into Param::grad on backward(); the rest are constants.
  ad::Var bind(ad::Tape& tape, std::string_view name);

  void zero_grad();
  void set_trainable(std::string_view prefix, bool trainable);
  [[nodiscard]] std::size_t count(std::string_view prefix = {}) const;

  // FNV-1a over names and raw float64 bytes of every tensor under prefix.
  [[nodiscard]] std::uint64_t digest(std::string_view prefix) const;

  [[nodiscard]] Map& tensors() { return tensors_; }
  [[nodiscard]] const Map& tensors() const { return tensors_; }

 private:
  Map tensors_;
};

// Rounds every entry to the nearest float32 so a tensor survives a round
// trip through the on-disk container unchanged.
void round_to_float32(Matrix& m);

// ---- DRIS container --------------------------------------------------------
//
// Layout, all integers little-endian:
//   "DRIS" | u32 version | u32 count |
//   count x ( u32 name_len | name bytes | u32 rows | u32 cols | rows*cols f32 )
// Tensors are written row-major in lexicographic name order.

inline constexpr std::uint32_t kContainerVersion = 1;

using TensorMap = std::map<std::string, Matrix, std::less<>>;

void write_container(const std::filesystem::path& path, const TensorMap& tensors);
[[nodiscard]] TensorMap read_container(const std::filesystem::path& path);
[[nodiscard]] std::string encode_container(const TensorMap& tensors);
[[nodiscard]] TensorMap decode_container(std::string_view bytes);

}  // namespace diffris
