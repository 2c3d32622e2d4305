#include "commands.hpp"

#include <fstream>
#include <iostream>

#include <spdlog/spdlog.h>

#include "diffris/autodiff.hpp"
#include "diffris/config.hpp"
#include "diffris/errors.hpp"
#include "diffris/gradcheck.hpp"
#include "diffris/metrics.hpp"
#include "diffris/model.hpp"
#include "diffris/png_io.hpp"
#include "diffris/synthdata.hpp"
#include "diffris/training.hpp"

namespace diffris::cli {

namespace {

const std::vector<std::string> kFaultOps{"matmul", "softmax_rows", "layer_norm_rows", "l2_normalize_rows"};

template <typename F>
int guarded(const char* command, F&& body) {
  try {
    return body();
  } catch (const UsageError& e) {
    std::cerr << command << ": " << e.what() << '\n';
    return kUsageError;
  } catch (const ParameterError& e) {
    std::cerr << command << ": invalid configuration: " << e.what() << '\n';
    return kUsageError;
  } catch (const ContractViolation& e) {
    std::cerr << command << ": contract violation: " << e.what() << '\n';
    return kRuntimeFailure;
  } catch (const std::exception& e) {
    std::cerr << command << ": " << e.what() << '\n';
    return kRuntimeFailure;
  }
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(path.string() + ": " + e.what());
  }
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides) {
  nlohmann::json doc = path ? read_json(*path) : nlohmann::json::object();
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw IoError("failed writing " + path.string());
}

Image overlay(const Image& image, const BinaryMask& pred) {
  Image out = image;
  auto inside = [&](int y, int x) {
    return y >= 0 && x >= 0 && y < pred.height && x < pred.width && pred.at(y, x) != 0;
  };
  for (int y = 0; y < pred.height; ++y) {
    for (int x = 0; x < pred.width; ++x) {
      if (!inside(y, x)) continue;
      if (inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1)) continue;
      out.pixels.row(y * pred.width + x) << 1.0, 0.0, 1.0;
    }
  }
  return out;
}

}  // namespace

int cmd_gen_data(const GenDataArgs& args) {
  return guarded("gen-data", [&] {
    if (args.n < 1) throw UsageError("--n must be at least 1");
    const RunConfig cfg = resolve_config(args.config, args.overrides);
    const auto manifest = synthdata::generate_split(args.n, args.seed, cfg.data, args.out);
    std::cout << manifest.string() << '\n';
    return kOk;
  });
}

int cmd_train(const TrainArgs& args) {
  return guarded("train", [&] {
    const RunConfig cfg = resolve_config(args.config, args.overrides);
    const auto train_set = synthdata::load_split(args.data, "train", cfg.model.backbones.max_tokens);
    const auto val_set = synthdata::load_split(args.data, "val", cfg.model.backbones.max_tokens);
    if (train_set.empty()) throw UsageError("dataset " + args.data.string() + " has no training samples");

    std::filesystem::create_directories(args.out);
    write_text(args.out / "config.json", config_to_json(cfg).dump(2) + "\n");

    Model model(cfg.model);
    training::TrainOptions options;
    options.out_dir = args.out;
    options.thresholds = cfg.eval.thresholds;
    options.binarize_threshold = cfg.eval.binarize_threshold;
    options.inject_freeze_violation = args.inject_freeze_violation;
    if (args.resume) options.resume = training::load_checkpoint(*args.resume);

    const auto result = training::train(model, cfg.training, train_set, val_set, options);
    if (val_set.empty()) {
      std::cout << "best validation mIoU: n/a (no validation samples)\n";
    } else {
      std::cout << "best validation mIoU: " << result.best_miou << " (epoch " << result.best_epoch << ")\n";
    }
    return kOk;
  });
}

int cmd_eval(const EvalArgs& args) {
  return guarded("eval", [&] {
    if (args.split != "val" && args.split != "test" && args.split != "train") {
      throw UsageError("--split must be val or test");
    }
    std::optional<std::filesystem::path> config_path = args.config;
    if (!config_path) {
      const auto sidecar = args.checkpoint.parent_path() / "config.json";
      if (std::filesystem::exists(sidecar)) config_path = sidecar;
    }
    const RunConfig cfg = resolve_config(config_path, args.overrides);
    const auto ckpt = training::load_checkpoint(args.checkpoint);
    Model model(cfg.model);
    training::restore_params(model, ckpt);

    const auto samples = synthdata::load_split(args.data, args.split, cfg.model.backbones.max_tokens);
    if (samples.empty()) throw UsageError("split '" + args.split + "' of " + args.data.string() + " is empty");

    std::vector<metrics::EvalRecord> records;
    const auto summary =
        training::evaluate(model, samples, cfg.eval.thresholds, cfg.eval.binarize_threshold, &records);
    const std::string table = metrics::emit_report(summary);
    write_text(args.report, table);
    auto json_path = args.report;
    json_path.replace_extension(".json");
    nlohmann::json j = metrics::summary_json(summary, records);
    std::vector<std::string> ids;
    for (const auto& s : samples) ids.push_back(s.id);
    j["ids"] = ids;
    j["split"] = args.split;
    write_text(json_path, j.dump(2) + "\n");

    if (args.overlay_dir) {
      std::filesystem::create_directories(*args.overlay_dir);
      for (const auto& s : samples) {
        const BinaryMask pred = model.predict(s.triplet.image, s.triplet.expression, cfg.eval.binarize_threshold);
        png::write_image(*args.overlay_dir / (s.id + ".png"), overlay(s.triplet.image, pred));
      }
    }
    std::cout << table;
    return kOk;
  });
}

int cmd_gradcheck(const GradcheckArgs& args) {
  return guarded("gradcheck", [&] {
    const RunConfig cfg = resolve_config(args.config, args.overrides);
    gradcheck::Options opts;
    opts.seed = args.seed;
    // Dimensions stay tiny; the ablation switches follow the configuration.
    opts.model.adapter.enable_context = cfg.model.adapter.enable_context;
    opts.model.adapter.enable_object_reasoning = cfg.model.adapter.enable_object_reasoning;
    opts.model.adapter.enable_domain_adjust = cfg.model.adapter.enable_domain_adjust;
    opts.model.decoder.hard_assignment = cfg.model.decoder.hard_assignment;
    opts.model.decoder.multiscale_fusion = cfg.model.decoder.multiscale_fusion;
    opts.model.decoder.use_refined_text = cfg.model.decoder.use_refined_text;
    if (!args.inject_fault.empty()) {
      if (std::find(kFaultOps.begin(), kFaultOps.end(), args.inject_fault) == kFaultOps.end()) {
        throw UsageError("--inject-fault must name one of matmul, softmax_rows, layer_norm_rows, l2_normalize_rows");
      }
      ad::debug::inject_gradient_fault(args.inject_fault);
    }
    const auto results = gradcheck::run_all(opts);
    ad::debug::inject_gradient_fault("");
    std::cout << gradcheck::format_table(results);
    std::vector<std::string> failing;
    for (const auto& r : results) {
      if (!r.pass) failing.push_back(r.component);
    }
    if (failing.empty()) return kOk;
    std::cerr << "gradcheck: failing components:";
    for (const auto& f : failing) std::cerr << ' ' << f;
    if (!args.inject_fault.empty()) std::cerr << " (injected fault in " << args.inject_fault << ")";
    std::cerr << '\n';
    return kRuntimeFailure;
  });
}

}  // namespace diffris::cli
