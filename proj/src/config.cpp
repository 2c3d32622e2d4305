#include "diffris/config.hpp"

#include <fstream>
#include <set>

#include "diffris/errors.hpp"

namespace diffris {

namespace {

using nlohmann::json;

const std::set<std::string> kSections{"backbones", "cp_adapter", "pcmrd", "training", "data", "eval"};

// Reads the keys of one section and remembers which ones it knows about.
class Section {
 public:
  Section(const json& doc, std::string name) : name_(std::move(name)) {
    if (doc.contains(name_)) {
      obj_ = doc.at(name_);
      if (!obj_.is_object()) throw ParameterError("config: section '" + name_ + "' must be an object");
    } else {
      obj_ = json::object();
    }
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    known_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ParameterError("config: " + name_ + "." + key + " has the wrong type");
    }
  }

  template <typename T, typename Parse>
  void read_list(const std::string& key, std::vector<T>& out, Parse parse) {
    std::vector<std::string> raw;
    known_.insert(key);
    if (!obj_.contains(key)) return;
    read(key, raw);
    out.clear();
    for (const auto& s : raw) out.push_back(parse(s));
  }

  void read_sub(const std::string& key, const std::set<std::string>& fields, json& out) {
    known_.insert(key);
    if (!obj_.contains(key)) return;
    out = obj_.at(key);
    if (!out.is_object()) throw ParameterError("config: " + name_ + "." + key + " must be an object");
    for (const auto& [k, v] : out.items()) {
      if (!fields.contains(k)) throw ParameterError("config: unknown key " + name_ + "." + key + "." + k);
    }
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!known_.contains(k)) throw ParameterError("config: unknown key " + name_ + "." + k);
    }
  }

 private:
  std::string name_;
  json obj_;
  std::set<std::string> known_;
};

}  // namespace

void RunConfig::validate() const {
  model.validate();
  training::validate(training);
  synthdata::validate(data);
  if (model.backbones.vocab_size < static_cast<int>(synthdata::vocabulary().size())) {
    throw ParameterError("config: backbones.vocab_size must cover the " +
                         std::to_string(synthdata::vocabulary().size()) + "-word vocabulary");
  }
  const int stride = model.backbones.downsample * 4;
  if (data.height % stride != 0 || data.width % stride != 0) {
    throw ParameterError("config: data canvas must be divisible by " + std::to_string(stride));
  }
  for (double t : eval.thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw ParameterError("config: eval.thresholds must lie in (0, 1]");
  }
}

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ParameterError("config: top level must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!kSections.contains(k)) throw ParameterError("config: unknown section '" + k + "'");
  }
  RunConfig cfg;

  auto& bb = cfg.model.backbones;
  Section b(j, "backbones");
  b.read("vocab_size", bb.vocab_size);
  b.read("max_tokens", bb.max_tokens);
  b.read("text_dim", bb.text_dim);
  b.read("text_depth", bb.text_depth);
  b.read("text_heads", bb.text_heads);
  b.read("text_ffn", bb.text_ffn);
  b.read("downsample", bb.downsample);
  b.read("latent_channels", bb.latent_channels);
  b.read("pyramid_channels", bb.pyramid_channels);
  b.read("attn_dim", bb.attn_dim);
  b.read("frozen", bb.frozen);
  b.read("seed", bb.seed);
  b.finish();

  auto& ad = cfg.model.adapter;
  Section a(j, "cp_adapter");
  a.read("depth", ad.depth);
  a.read("heads", ad.heads);
  a.read("ffn_dim", ad.ffn_dim);
  a.read("proj_hidden", ad.proj_hidden);
  a.read("rank", ad.rank);
  a.read("lora_init_std", ad.lora_init_std);
  a.read("enable_context", ad.enable_context);
  a.read("enable_object_reasoning", ad.enable_object_reasoning);
  a.read("enable_domain_adjust", ad.enable_domain_adjust);
  a.read("seed", ad.seed);
  a.finish();

  auto& dc = cfg.model.decoder;
  Section p(j, "pcmrd");
  p.read("num_queries", dc.num_queries);
  p.read("query_dim", dc.query_dim);
  p.read("fused_channels", dc.fused_channels);
  p.read("oaqil_per_stage", dc.oaqil_per_stage);
  p.read("tau_init", dc.tau_init);
  p.read("mlp_hidden", dc.mlp_hidden);
  p.read("query_init_std", dc.query_init_std);
  p.read("head_bias_init", dc.head_bias_init);
  p.read("hard_assignment", dc.hard_assignment);
  p.read("multiscale_fusion", dc.multiscale_fusion);
  p.read("use_refined_text_in_decoder", dc.use_refined_text);
  p.read("seed", dc.seed);
  p.finish();

  auto& tr = cfg.training;
  Section t(j, "training");
  t.read("lr", tr.lr);
  t.read("weight_decay", tr.weight_decay);
  t.read("beta1", tr.beta1);
  t.read("beta2", tr.beta2);
  t.read("eps", tr.eps);
  t.read("batch_size", tr.batch_size);
  t.read("epochs", tr.epochs);
  t.read("seed", tr.seed);
  json weights;
  t.read_sub("loss_weights", {"bce", "dice"}, weights);
  if (!weights.is_null()) {
    try {
      tr.loss_weights.bce = weights.value("bce", tr.loss_weights.bce);
      tr.loss_weights.dice = weights.value("dice", tr.loss_weights.dice);
    } catch (const json::exception&) {
      throw ParameterError("config: training.loss_weights entries must be numbers");
    }
  }
  t.read("freeze_backbones", tr.freeze_backbones);
  t.read("grad_clip", tr.grad_clip);
  t.read("lr_schedule", tr.lr_schedule);
  t.read("eval_train", tr.eval_train);
  t.finish();

  auto& da = cfg.data;
  Section d(j, "data");
  d.read("height", da.height);
  d.read("width", da.width);
  d.read("min_objects", da.min_objects);
  d.read("max_objects", da.max_objects);
  d.read("hard_negative_prob", da.hard_negative_prob);
  d.read_list("shapes", da.shapes, synthdata::parse_shape);
  d.read_list("colors", da.colors, synthdata::parse_color);
  d.read("val_fraction", da.val_fraction);
  d.read("test_fraction", da.test_fraction);
  d.read("max_attempts", da.max_attempts);
  d.read("raster_block", da.raster_block);
  d.finish();

  Section e(j, "eval");
  e.read("thresholds", cfg.eval.thresholds);
  e.read("binarize_threshold", cfg.eval.binarize_threshold);
  e.finish();

  cfg.model.sync();
  cfg.data.max_tokens = bb.max_tokens;
  cfg.validate();
  return cfg;
}

json config_to_json(const RunConfig& cfg) {
  const auto& bb = cfg.model.backbones;
  const auto& ad = cfg.model.adapter;
  const auto& dc = cfg.model.decoder;
  const auto& tr = cfg.training;
  const auto& da = cfg.data;
  json j;
  j["backbones"] = {{"vocab_size", bb.vocab_size},
                    {"max_tokens", bb.max_tokens},
                    {"text_dim", bb.text_dim},
                    {"text_depth", bb.text_depth},
                    {"text_heads", bb.text_heads},
                    {"text_ffn", bb.text_ffn},
                    {"downsample", bb.downsample},
                    {"latent_channels", bb.latent_channels},
                    {"pyramid_channels", bb.pyramid_channels},
                    {"attn_dim", bb.attn_dim},
                    {"frozen", bb.frozen},
                    {"seed", bb.seed}};
  j["cp_adapter"] = {{"depth", ad.depth},
                     {"heads", ad.heads},
                     {"ffn_dim", ad.ffn_dim},
                     {"proj_hidden", ad.proj_hidden},
                     {"rank", ad.rank},
                     {"lora_init_std", ad.lora_init_std},
                     {"enable_context", ad.enable_context},
                     {"enable_object_reasoning", ad.enable_object_reasoning},
                     {"enable_domain_adjust", ad.enable_domain_adjust},
                     {"seed", ad.seed}};
  j["pcmrd"] = {{"num_queries", dc.num_queries},
                {"query_dim", dc.query_dim},
                {"fused_channels", dc.fused_channels},
                {"oaqil_per_stage", dc.oaqil_per_stage},
                {"tau_init", dc.tau_init},
                {"mlp_hidden", dc.mlp_hidden},
                {"query_init_std", dc.query_init_std},
                {"head_bias_init", dc.head_bias_init},
                {"hard_assignment", dc.hard_assignment},
                {"multiscale_fusion", dc.multiscale_fusion},
                {"use_refined_text_in_decoder", dc.use_refined_text},
                {"seed", dc.seed}};
  j["training"] = {{"lr", tr.lr},
                   {"weight_decay", tr.weight_decay},
                   {"beta1", tr.beta1},
                   {"beta2", tr.beta2},
                   {"eps", tr.eps},
                   {"batch_size", tr.batch_size},
                   {"epochs", tr.epochs},
                   {"seed", tr.seed},
                   {"loss_weights", {{"bce", tr.loss_weights.bce}, {"dice", tr.loss_weights.dice}}},
                   {"freeze_backbones", tr.freeze_backbones},
                   {"grad_clip", tr.grad_clip},
                   {"lr_schedule", tr.lr_schedule},
                   {"eval_train", tr.eval_train}};
  std::vector<std::string> shapes;
  for (auto s : da.shapes) shapes.push_back(synthdata::to_string(s));
  std::vector<std::string> colors;
  for (auto c : da.colors) colors.push_back(synthdata::to_string(c));
  j["data"] = {{"height", da.height},
               {"width", da.width},
               {"min_objects", da.min_objects},
               {"max_objects", da.max_objects},
               {"hard_negative_prob", da.hard_negative_prob},
               {"shapes", shapes},
               {"colors", colors},
               {"val_fraction", da.val_fraction},
               {"test_fraction", da.test_fraction},
               {"max_attempts", da.max_attempts},
               {"raster_block", da.raster_block}};
  j["eval"] = {{"thresholds", cfg.eval.thresholds}, {"binarize_threshold", cfg.eval.binarize_threshold}};
  return j;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParameterError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw UsageError("override '" + assignment + "' is not of the form section.key=value");
  }
  const std::string section = assignment.substr(0, dot);
  const std::string key = assignment.substr(dot + 1, eq - dot - 1);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  if (!doc.is_object()) doc = json::object();
  json& sec = doc[section];
  if (sec.is_null()) sec = json::object();
  if (!sec.is_object()) throw UsageError("override: section '" + section + "' is not an object");
  sec[key] = value;
}

}  // namespace diffris
