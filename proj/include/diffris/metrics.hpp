#pragma once

// Referring-segmentation evaluation: per-sample intersection/union counts,
// overall IoU (pooled counts), mean IoU (averaged ratios), and precision at
// IoU thresholds.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffris/types.hpp"

namespace diffris::metrics {

inline const std::vector<double> kDefaultThresholds{0.5, 0.6, 0.7, 0.8, 0.9};

struct EvalRecord {
  std::uint64_t intersection = 0;
  std::uint64_t union_area = 0;

  // Two empty masks agree perfectly: U = 0 gives IoU = 1.
  [[nodiscard]] double iou() const;
  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

struct EvalSummary {
  double oiou = 0.0;
  double miou = 0.0;
  std::map<double, double> pr_at;
  std::size_t count = 0;
};

EvalRecord mask_iou(const BinaryMask& pred, const BinaryMask& gt);
double overall_iou(std::span<const EvalRecord> records);
double mean_iou(std::span<const EvalRecord> records);
std::map<double, double> precision_at(std::span<const EvalRecord> records,
                                      std::span<const double> thresholds = kDefaultThresholds);
EvalSummary summarize(std::span<const EvalRecord> records,
                      std::span<const double> thresholds = kDefaultThresholds);

// Throws ContractViolation when a ratio leaves [0, 1] or Pr@X increases with X.
void check_summary(const EvalSummary& summary);

// Markdown table: one column per threshold, then oIoU and mIoU, as
// percentages with two decimals.
std::string emit_report(const EvalSummary& summary);

// Summary plus the raw per-sample counts.
nlohmann::json summary_json(const EvalSummary& summary, std::span<const EvalRecord> records);

}  // namespace diffris::metrics
