#include "diffris/pcmrd.hpp"

#include <cmath>

#include "diffris/errors.hpp"
#include "diffris/layers.hpp"

namespace diffris::pcmrd {

namespace {

Matrix one_hot_argmax(const Matrix& s_gumbel) {
  // argmax over tokens (rows) for each pixel (column); ties go to the lowest index
  const Eigen::Index m = s_gumbel.rows();
  const Eigen::Index p = s_gumbel.cols();
  Matrix onehot = Matrix::Zero(p, m);
  for (Eigen::Index j = 0; j < p; ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < m; ++i) {
      if (s_gumbel(i, j) > s_gumbel(best, j)) best = i;
    }
    onehot(j, best) = 1.0;
  }
  return onehot;
}

int deep_channels(const Config& cfg, int stage) {
  return stage == 1 ? cfg.pyramid_channels[3] : cfg.fused_channels[stage - 2];
}

int shallow_channels(const Config& cfg, int stage) { return cfg.pyramid_channels[3 - stage]; }

}  // namespace

void validate(const Config& cfg) {
  if (cfg.num_queries < 1) throw ParameterError("pcmrd: num_queries must be at least 1");
  if (cfg.query_dim < 1 || cfg.mlp_hidden < 1 || cfg.text_dim < 1) {
    throw ParameterError("pcmrd: dimensions must be positive");
  }
  for (int c : cfg.fused_channels) {
    if (c < 1) throw ParameterError("pcmrd: fused channels must be positive");
  }
  if (cfg.oaqil_per_stage < 1) throw ParameterError("pcmrd: each stage needs at least one OAQIL layer");
  if (!(cfg.tau_init > 0.0)) throw ParameterError("pcmrd: tau_init must be positive");
}

std::string stage_prefix(int stage) { return "pcmrd/stage" + std::to_string(stage) + "/"; }

std::string layer_prefix(int stage, int layer) {
  return stage_prefix(stage) + "oaqil" + std::to_string(layer) + "/";
}

void init_params(ParamStore& params, const Config& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  const int cq = cfg.query_dim;
  params.add("pcmrd/queries", rng.normal_matrix(cfg.num_queries, cq, cfg.query_init_std));
  for (int stage = 1; stage <= 3; ++stage) {
    const int cf = cfg.fused_channels[stage - 1];
    layers::add_linear(params, stage_prefix(stage) + "fuse",
                       deep_channels(cfg, stage) + shallow_channels(cfg, stage), cf, rng);
    for (int k = 0; k < cfg.oaqil_per_stage; ++k) {
      const std::string p = layer_prefix(stage, k);
      layers::add_linear(params, p + "W_q", cq, cq, rng, false);
      layers::add_linear(params, p + "W_k", cfg.text_dim, cq, rng, false);
      layers::add_linear(params, p + "W_v", cfg.text_dim, cq, rng, false);
      layers::add_linear(params, p + "W_c", cq, cq, rng, false);
      layers::add_linear(params, p + "W_t", cq, cq, rng, false);
      layers::add_linear(params, p + "W_d", cf, cq, rng, false);
      layers::add_layer_norm(params, p + "mlp/ln", cq);
      layers::add_linear(params, p + "mlp/fc1", cq, cfg.mlp_hidden, rng);
      layers::add_linear(params, p + "mlp/fc2", cfg.mlp_hidden, cq, rng);
      layers::add_layer_norm(params, p + "out_ln", cq);
      params.add(p + "log_tau", Matrix::Constant(1, 1, std::log(cfg.tau_init)));
    }
  }
  layers::add_linear(params, "pcmrd/head", cq, 1, rng);
  // Background prior: most pixels are off, so start the scores there.
  params.at("pcmrd/head/b").value(0, 0) = cfg.head_bias_init;
}

FusedVars fuse_scales(ad::Tape& tape, ParamStore& params, const Config& cfg, int stage, ad::Var deep,
                      int deep_height, int deep_width, ad::Var shallow, int shallow_height,
                      int shallow_width) {
  if (shallow_height != 2 * deep_height || shallow_width != 2 * deep_width) {
    throw ShapeError("fuse_scales: levels are not adjacent (" + std::to_string(deep_height) + "x" +
                     std::to_string(deep_width) + " vs " + std::to_string(shallow_height) + "x" +
                     std::to_string(shallow_width) + ")");
  }
  if (deep.rows() != static_cast<Eigen::Index>(deep_height) * deep_width ||
      shallow.rows() != static_cast<Eigen::Index>(shallow_height) * shallow_width) {
    throw ShapeError("fuse_scales: map sizes disagree with stated geometry");
  }
  if (deep.cols() != deep_channels(cfg, stage) || shallow.cols() != shallow_channels(cfg, stage)) {
    throw ShapeError("fuse_scales: channel counts disagree with config for stage " + std::to_string(stage));
  }
  ad::Var up = cfg.multiscale_fusion
                   ? ad::upsample_nearest2(deep, deep_height, deep_width)
                   : tape.constant(Matrix::Zero(shallow.rows(), deep.cols()));
  const ad::Var parts[] = {up, shallow};
  ad::Var fused = ad::tanh(layers::linear(tape, params, stage_prefix(stage) + "fuse", ad::concat_cols(parts)));
  return {fused, shallow_height, shallow_width};
}

ad::Var inject_text(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var queries,
                    ad::Var text, const Mask& text_mask, Matrix* attention) {
  ad::Var q = layers::linear(tape, params, prefix + "W_q", queries, false);
  ad::Var k = layers::linear(tape, params, prefix + "W_k", text, false);
  ad::Var v = layers::linear(tape, params, prefix + "W_v", text, false);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  ad::Var attn = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt), &text_mask);
  if (attention) *attention = attn.value();
  return layers::linear(tape, params, prefix + "W_c", ad::matmul(attn, v), false);
}

SimilarityVars pixel_similarity(ad::Tape& tape, ParamStore& params, const std::string& prefix,
                                ad::Var tokens, ad::Var fused) {
  ad::Var t = ad::l2_normalize_rows(layers::linear(tape, params, prefix + "W_t", tokens, false));
  ad::Var projected = layers::linear(tape, params, prefix + "W_d", fused, false);
  ad::Var s = ad::matmul_nt(t, ad::l2_normalize_rows(projected));
  return {s, projected};
}

AssignVars gumbel_assign(ad::Tape& tape, ad::Var s_pixel, ad::Var tau, const Matrix& noise, bool hard,
                         const AssignmentBundle* replay) {
  if (!(tau.value()(0, 0) > 0.0)) throw ParameterError("gumbel_assign: tau must be positive");
  if (noise.rows() != s_pixel.rows() || noise.cols() != s_pixel.cols()) {
    throw ShapeError("gumbel_assign: noise shape differs from similarity matrix");
  }
  ad::Var logits = ad::div_by(ad::add(s_pixel, tape.constant(noise)), tau);
  ad::Var s_gumbel = ad::transpose(ad::softmax_rows(ad::transpose(logits)));
  AssignVars out;
  out.s_gumbel = s_gumbel;
  out.s_onehot = replay ? replay->s_onehot : one_hot_argmax(s_gumbel.value());
  if (!hard) {
    out.s_mask = s_gumbel;
  } else if (replay) {
    out.s_mask = ad::add(tape.constant(Matrix(out.s_onehot.transpose() - replay->s_gumbel)), s_gumbel);
  } else {
    out.s_mask = ad::straight_through(out.s_onehot.transpose(), s_gumbel);
  }
  return out;
}

ad::Var update_tokens(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var s_mask,
                      ad::Var projected, ad::Var tokens) {
  ad::Var pooled = ad::matmul(s_mask, projected);
  ad::Var h = layers::layer_norm(tape, params, prefix + "mlp/ln", pooled);
  h = ad::relu(layers::linear(tape, params, prefix + "mlp/fc1", h));
  h = layers::linear(tape, params, prefix + "mlp/fc2", h);
  return ad::add(h, layers::linear(tape, params, prefix + "W_t", tokens, false));
}

OaqilVars oaqil_forward(ad::Tape& tape, ParamStore& params, const Config& cfg, const std::string& prefix,
                        ad::Var queries, ad::Var text, const Mask& text_mask, ad::Var fused,
                        const RunOptions& run, std::size_t layer_index) {
  const AssignmentBundle* replay = nullptr;
  if (run.replay) {
    if (layer_index >= run.replay->size()) throw UsageError("oaqil_forward: replay has too few layers");
    replay = &(*run.replay)[layer_index];
  }
  // Residual around the text cross-attention: without it every layer would
  // rebuild the tokens from the text alone and lose what pooling gave them.
  ad::Var q_l = ad::add(queries, inject_text(tape, params, prefix, queries, text, text_mask));
  SimilarityVars sim = pixel_similarity(tape, params, prefix, q_l, fused);
  const Eigen::Index m = sim.s_pixel.rows();
  const Eigen::Index p = sim.s_pixel.cols();
  Matrix noise;
  if (replay) {
    noise = replay->noise;
  } else if (run.train && run.noise) {
    noise = run.noise->gumbel_matrix(m, p);
  } else {
    noise = Matrix::Zero(m, p);
  }
  ad::Var tau = ad::exp(params.bind(tape, prefix + "log_tau"));
  AssignVars assign = gumbel_assign(tape, sim.s_pixel, tau, noise, cfg.hard_assignment, replay);
  ad::Var q_u = update_tokens(tape, params, prefix, assign.s_mask, sim.projected, q_l);
  ad::Var out = layers::layer_norm(tape, params, prefix + "out_ln", q_u);

  OaqilVars result{out, assign, {}};
  result.bundle.s_pixel = sim.s_pixel.value();
  result.bundle.s_gumbel = assign.s_gumbel.value();
  result.bundle.s_onehot = assign.s_onehot;
  result.bundle.s_mask = assign.s_mask.value();
  result.bundle.noise = std::move(noise);
  result.bundle.tau = tau.value()(0, 0);
  return result;
}

ad::Var run_stage(ad::Tape& tape, ParamStore& params, const Config& cfg, int stage, int layers, ad::Var queries,
                  ad::Var text, const Mask& text_mask, ad::Var fused, const RunOptions& run,
                  std::vector<AssignmentBundle>& bundles, AssignVars* last) {
  for (int k = 0; k < layers; ++k) {
    OaqilVars r = oaqil_forward(tape, params, cfg, layer_prefix(stage, k), queries, text, text_mask, fused,
                                run, bundles.size());
    queries = r.tokens;
    bundles.push_back(std::move(r.bundle));
    if (last) *last = r.assign;
  }
  return queries;
}

ad::Var predict_mask(ad::Tape& tape, ParamStore& params, ad::Var tokens, const AssignVars& assign, bool train,
                     int fused_height, int fused_width, int factor) {
  ad::Var scores = layers::linear(tape, params, "pcmrd/head", tokens);
  ad::Var weights = train ? ad::transpose(assign.s_gumbel) : tape.constant(assign.s_onehot);
  ad::Var coarse = ad::matmul(weights, scores);
  return ad::upsample_bilinear(coarse, fused_height, fused_width, factor);
}

ForwardVars forward(ad::Tape& tape, ParamStore& params, const Config& cfg, const backbones::PyramidVars& pyramid,
                    ad::Var text, const Mask& text_mask, const RunOptions& run) {
  validate(cfg);
  if (text.cols() != cfg.text_dim) throw ShapeError("pcmrd: text width disagrees with config");
  ForwardVars out;
  ad::Var queries = params.bind(tape, "pcmrd/queries");
  FusedVars fused{pyramid.levels[3], pyramid.heights[3], pyramid.widths[3]};
  AssignVars last;
  for (int stage = 1; stage <= 3; ++stage) {
    const int shallow = 3 - stage;
    fused = fuse_scales(tape, params, cfg, stage, fused.values, fused.height, fused.width,
                        pyramid.levels[shallow], pyramid.heights[shallow], pyramid.widths[shallow]);
    queries = run_stage(tape, params, cfg, stage, cfg.oaqil_per_stage, queries, text, text_mask, fused.values,
                        run, out.bundles, &last);
    out.output.stage_tokens[stage - 1] = queries.value();
    out.output.stage_assignments[stage - 1] = out.bundles.back();
    out.output.fused_heights[stage - 1] = fused.height;
    out.output.fused_widths[stage - 1] = fused.width;
  }
  out.mask_logits = predict_mask(tape, params, queries, last, run.train, fused.height, fused.width, 4);
  out.output.mask_logits = out.mask_logits.value();
  out.output.height = fused.height * 4;
  out.output.width = fused.width * 4;
  return out;
}

// ---- value-level -----------------------------------------------------------

AssignmentBundle gumbel_assign(const Matrix& s_pixel, double tau, const Matrix& noise, bool train_mode) {
  if (!(tau > 0.0)) throw ParameterError("gumbel_assign: tau must be positive");
  ad::Tape tape;
  Matrix t(1, 1);
  t(0, 0) = tau;
  const Matrix g = train_mode ? noise : Matrix::Zero(s_pixel.rows(), s_pixel.cols());
  AssignVars a = gumbel_assign(tape, tape.constant_ref(s_pixel), tape.constant(t), g, true);
  return {s_pixel, a.s_gumbel.value(), a.s_onehot, a.s_mask.value(), g, tau};
}

Matrix pixel_similarity(ParamStore& params, const std::string& prefix, const Matrix& tokens,
                        const Matrix& fused) {
  ad::Tape tape;
  return pixel_similarity(tape, params, prefix, tape.constant_ref(tokens), tape.constant_ref(fused))
      .s_pixel.value();
}

Matrix inject_text(ParamStore& params, const std::string& prefix, const Matrix& queries,
                   const backbones::LinguisticFeatures& text) {
  ad::Tape tape;
  return inject_text(tape, params, prefix, tape.constant_ref(queries), tape.constant_ref(text.values),
                     text.pad_mask)
      .value();
}

DecoderOutput forward(ParamStore& params, const Config& cfg, const backbones::MultiScaleFeatures& features,
                      const backbones::LinguisticFeatures& text, const RunOptions& run) {
  ad::Tape tape;
  backbones::PyramidVars pyramid;
  for (int i = 0; i < 4; ++i) {
    pyramid.levels[i] = tape.constant_ref(features.levels[i].values);
    pyramid.heights[i] = features.levels[i].height;
    pyramid.widths[i] = features.levels[i].width;
  }
  return forward(tape, params, cfg, pyramid, tape.constant_ref(text.values), text.pad_mask, run).output;
}

}  // namespace diffris::pcmrd
