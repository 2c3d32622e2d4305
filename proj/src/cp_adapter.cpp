#include "diffris/cp_adapter.hpp"

#include <cmath>
#include <string>

#include "diffris/errors.hpp"
#include "diffris/layers.hpp"

namespace diffris::cp_adapter {

namespace {

const std::string kPrefix = "cp_adapter/";

void check_text(const Config& cfg, ad::Var text, const Mask& mask) {
  if (text.cols() != cfg.dim) {
    throw ShapeError("cp_adapter: expected " + std::to_string(cfg.dim) + " feature columns, got " +
                     std::to_string(text.cols()));
  }
  if (static_cast<Eigen::Index>(mask.size()) != text.rows()) {
    throw ShapeError("cp_adapter: mask length differs from token count");
  }
}

}  // namespace

void validate(const Config& cfg) {
  if (cfg.dim < 1 || cfg.depth < 0 || cfg.ffn_dim < 1 || cfg.proj_hidden < 1) {
    throw ParameterError("cp_adapter: dimensions must be positive");
  }
  if (cfg.rank <= 0) throw ParameterError("cp_adapter: rank must be positive");
  if (cfg.heads < 1 || cfg.dim % cfg.heads != 0) {
    throw ParameterError("cp_adapter: dim must be divisible by heads");
  }
}

void init_params(ParamStore& params, const Config& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  for (int l = 0; l < cfg.depth; ++l) {
    layers::add_encoder_layer(params, kPrefix + "context/layer" + std::to_string(l), cfg.dim,
                              cfg.ffn_dim, rng);
  }
  layers::add_linear(params, kPrefix + "object/W_q", cfg.dim, cfg.dim, rng, false);
  layers::add_linear(params, kPrefix + "object/W_k", cfg.dim, cfg.dim, rng, false);
  layers::add_linear(params, kPrefix + "object/W_v", cfg.dim, cfg.dim, rng, false);
  layers::add_linear(params, kPrefix + "proj/fc1", cfg.dim, cfg.proj_hidden, rng);
  layers::add_linear(params, kPrefix + "proj/fc2", cfg.proj_hidden, cfg.dim, rng);
  params.add(kPrefix + "lora/A", rng.normal_matrix(cfg.dim, cfg.rank, cfg.lora_init_std));
  params.add(kPrefix + "lora/B", Matrix::Zero(cfg.rank, cfg.dim));
  params.add(kPrefix + "alpha", Matrix::Zero(1, 1));
}

ad::Var global_context_encode(ad::Tape& tape, ParamStore& params, const Config& cfg, ad::Var text,
                              const Mask& mask, Trace* trace) {
  check_text(cfg, text, mask);
  if (!cfg.enable_context || cfg.depth == 0) return text;
  ad::Var h = text;
  for (int l = 0; l < cfg.depth; ++l) {
    h = layers::encoder_layer(tape, params, kPrefix + "context/layer" + std::to_string(l), h, mask,
                              cfg.heads, trace ? &trace->context_attention : nullptr);
  }
  return ad::mask_rows(h, mask);
}

ad::Var object_aware_attend(ad::Tape& tape, ParamStore& params, const Config& cfg, ad::Var context,
                            ad::Var text, const Mask& mask, Trace* trace) {
  check_text(cfg, text, mask);
  if (context.rows() != text.rows() || context.cols() != text.cols()) {
    throw ShapeError("object_aware_attend: context and text shapes differ");
  }
  ad::Var values = layers::linear(tape, params, kPrefix + "object/W_v", context, false);
  ad::Var keys = layers::linear(tape, params, kPrefix + "object/W_k", text, false);
  ad::Var queries = layers::linear(tape, params, kPrefix + "object/W_q", text, false);
  ad::Var scores = ad::scale(ad::matmul_nt(queries, keys), 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
  ad::Var attn = ad::softmax_rows(scores, &mask);
  if (trace) trace->object_attention = attn.value();
  return ad::add(ad::matmul(attn, values), text);
}

ad::Var project_enhance(ad::Tape& tape, ParamStore& params, ad::Var attended) {
  ad::Var hidden = ad::relu(layers::linear(tape, params, kPrefix + "proj/fc1", attended));
  return ad::add(layers::linear(tape, params, kPrefix + "proj/fc2", hidden), attended);
}

ad::Var domain_adjust(ad::Tape& tape, ParamStore& params, const Config& cfg, ad::Var enhanced) {
  if (cfg.rank <= 0) throw ParameterError("domain_adjust: rank must be positive");
  ad::Var a = params.bind(tape, kPrefix + "lora/A");
  ad::Var b = params.bind(tape, kPrefix + "lora/B");
  if (a.rows() != enhanced.cols() || b.cols() != enhanced.cols()) {
    throw ShapeError("domain_adjust: low-rank factors do not match feature width");
  }
  return ad::matmul(ad::matmul(enhanced, a), b);
}

ad::Var gated_fuse(ad::Var adjusted, ad::Var text, ad::Var alpha) { return ad::gate(adjusted, text, alpha); }

ad::Var forward(ad::Tape& tape, ParamStore& params, const Config& cfg, ad::Var text, const Mask& mask,
                Trace* trace) {
  ad::Var context = global_context_encode(tape, params, cfg, text, mask, trace);
  ad::Var attended =
      cfg.enable_object_reasoning ? object_aware_attend(tape, params, cfg, context, text, mask, trace) : context;
  ad::Var enhanced = project_enhance(tape, params, attended);
  ad::Var adjusted = cfg.enable_domain_adjust ? domain_adjust(tape, params, cfg, enhanced) : enhanced;
  ad::Var fused = gated_fuse(adjusted, text, params.bind(tape, kPrefix + "alpha"));
  return ad::mask_rows(fused, mask);
}

// ---- value-level -----------------------------------------------------------

Matrix global_context_encode(ParamStore& params, const Config& cfg,
                             const backbones::LinguisticFeatures& text, Trace* trace) {
  ad::Tape tape;
  return global_context_encode(tape, params, cfg, tape.constant_ref(text.values), text.pad_mask, trace)
      .value();
}

Matrix object_aware_attend(ParamStore& params, const Config& cfg, const Matrix& context,
                           const backbones::LinguisticFeatures& text, Trace* trace) {
  ad::Tape tape;
  return object_aware_attend(tape, params, cfg, tape.constant_ref(context), tape.constant_ref(text.values),
                             text.pad_mask, trace)
      .value();
}

Matrix project_enhance(ParamStore& params, const Matrix& attended) {
  ad::Tape tape;
  return project_enhance(tape, params, tape.constant_ref(attended)).value();
}

Matrix domain_adjust(ParamStore& params, const Config& cfg, const Matrix& enhanced) {
  ad::Tape tape;
  return domain_adjust(tape, params, cfg, tape.constant_ref(enhanced)).value();
}

backbones::LinguisticFeatures gated_fuse(const Matrix& adjusted, const backbones::LinguisticFeatures& text,
                                         double alpha) {
  ad::Tape tape;
  Matrix a(1, 1);
  a(0, 0) = alpha;
  return {gated_fuse(tape.constant_ref(adjusted), tape.constant_ref(text.values), tape.constant(a)).value(),
          text.pad_mask};
}

backbones::LinguisticFeatures forward(ParamStore& params, const Config& cfg,
                                      const backbones::LinguisticFeatures& text, Trace* trace) {
  ad::Tape tape;
  return {forward(tape, params, cfg, tape.constant_ref(text.values), text.pad_mask, trace).value(),
          text.pad_mask};
}

}  // namespace diffris::cp_adapter
