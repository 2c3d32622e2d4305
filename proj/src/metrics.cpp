#include "diffris/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "diffris/errors.hpp"

namespace diffris::metrics {

namespace {

void require_records(std::span<const EvalRecord> records, const char* op) {
  if (records.empty()) throw UsageError(std::string(op) + ": no evaluation records");
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string threshold_label(double t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", t);
  return buf;
}

}  // namespace

double EvalRecord::iou() const {
  if (union_area == 0) return 1.0;
  return static_cast<double>(intersection) / static_cast<double>(union_area);
}

EvalRecord mask_iou(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.values.size() != gt.values.size()) {
    throw ShapeError("mask_iou: masks have different dimensions");
  }
  EvalRecord r;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool a = pred.values[i] != 0;
    const bool b = gt.values[i] != 0;
    r.intersection += a && b;
    r.union_area += a || b;
  }
  return r;
}

double overall_iou(std::span<const EvalRecord> records) {
  require_records(records, "overall_iou");
  std::uint64_t inter = 0;
  std::uint64_t uni = 0;
  for (const auto& r : records) {
    inter += r.intersection;
    uni += r.union_area;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double mean_iou(std::span<const EvalRecord> records) {
  require_records(records, "mean_iou");
  double total = 0.0;
  for (const auto& r : records) total += r.iou();
  return total / static_cast<double>(records.size());
}

std::map<double, double> precision_at(std::span<const EvalRecord> records, std::span<const double> thresholds) {
  require_records(records, "precision_at");
  std::map<double, double> out;
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw UsageError("precision_at: thresholds must lie in (0, 1]");
    std::size_t hits = 0;
    for (const auto& r : records) hits += r.iou() >= t;
    out[t] = static_cast<double>(hits) / static_cast<double>(records.size());
  }
  return out;
}

EvalSummary summarize(std::span<const EvalRecord> records, std::span<const double> thresholds) {
  EvalSummary s;
  s.oiou = overall_iou(records);
  s.miou = mean_iou(records);
  s.pr_at = precision_at(records, thresholds);
  s.count = records.size();
  return s;
}

void check_summary(const EvalSummary& summary) {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (summary.count < 1) throw ContractViolation("evaluation summary over zero samples");
  if (!in_unit(summary.oiou) || !in_unit(summary.miou)) throw ContractViolation("IoU outside [0, 1]");
  double previous = 1.0;
  for (const auto& [t, v] : summary.pr_at) {
    if (!in_unit(v)) throw ContractViolation("Pr@" + threshold_label(t) + " outside [0, 1]");
    if (v > previous) throw ContractViolation("Pr@X increases at X = " + threshold_label(t));
    previous = v;
  }
}

std::string emit_report(const EvalSummary& summary) {
  std::ostringstream out;
  out << "|";
  for (const auto& [t, v] : summary.pr_at) out << " Pr@" << threshold_label(t) << " |";
  out << " oIoU | mIoU |\n|";
  for (std::size_t i = 0; i < summary.pr_at.size() + 2; ++i) out << "---:|";
  out << "\n|";
  for (const auto& [t, v] : summary.pr_at) out << " " << fixed2(100.0 * v) << " |";
  out << " " << fixed2(100.0 * summary.oiou) << " | " << fixed2(100.0 * summary.miou) << " |\n";
  return out.str();
}

nlohmann::json summary_json(const EvalSummary& summary, std::span<const EvalRecord> records) {
  nlohmann::json j;
  j["count"] = summary.count;
  j["oiou"] = summary.oiou;
  j["miou"] = summary.miou;
  nlohmann::json pr = nlohmann::json::object();
  for (const auto& [t, v] : summary.pr_at) pr[threshold_label(t)] = v;
  j["pr_at"] = pr;
  std::vector<std::uint64_t> inter;
  std::vector<std::uint64_t> uni;
  for (const auto& r : records) {
    inter.push_back(r.intersection);
    uni.push_back(r.union_area);
  }
  j["intersections"] = inter;
  j["unions"] = uni;
  return j;
}

}  // namespace diffris::metrics
