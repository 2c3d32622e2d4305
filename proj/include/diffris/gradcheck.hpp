#pragma once

// Finite-difference checks of the analytic gradients and the
// straight-through identities, run at tiny dimensions in float64.

#include <cstdint>
#include <string>
#include <vector>

#include "diffris/model.hpp"

namespace diffris::gradcheck {

// 32x32 canvas, 4 queries, 8 tokens.
ModelConfig tiny_config();

struct Options {
  // Dimensions must stay small: every check walks every trainable entry.
  ModelConfig model = tiny_config();
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-3;
  double loss_tolerance = 1e-4;
  double straight_through_tolerance = 1e-10;
  // Entries sampled per tensor in the full-model check; 0 checks all.
  int model_entries_per_tensor = 0;
  int straight_through_instances = 1000;
};

struct ComponentResult {
  std::string component;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::string worst_tensor;
  std::size_t entries = 0;
  bool pass = false;
};

// max |a - n| / max(|a|_inf, |n|_inf, 1e-6) over one tensor.
double relative_error(const Matrix& analytic, const Matrix& numeric);

ComponentResult check_loss(const Options& opts);
ComponentResult check_cp_adapter(const Options& opts);
ComponentResult check_oaqil(const Options& opts);
ComponentResult check_model(const Options& opts);
// Reports the largest gradient difference; forward mismatches fail outright.
ComponentResult check_straight_through(const Options& opts);

std::vector<ComponentResult> run_all(const Options& opts);
std::string format_table(const std::vector<ComponentResult>& results);

}  // namespace diffris::gradcheck
