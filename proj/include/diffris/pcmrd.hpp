#pragma once

// Progressive cross-modal reasoning decoder.
//
// Three stages walk up the feature pyramid: (V4, V3) -> (stage 1, V2) ->
// (stage 2, V1). Each stage fuses two maps and runs object-aware query
// interaction layers: text is injected into the query tokens by
// cross-attention, pixels are hard-assigned to tokens with a Gumbel-softmax
// over the token axis and a straight-through estimator, and assigned pixels
// are pooled back into the tokens. A relevance score per token weights the
// final assignment map into mask logits.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "diffris/autodiff.hpp"
#include "diffris/backbones.hpp"
#include "diffris/params.hpp"

namespace diffris::pcmrd {

struct Config {
  int num_queries = 8;  // M
  int query_dim = 64;   // C_q
  std::array<int, 3> fused_channels{64, 64, 64};
  int oaqil_per_stage = 1;
  double tau_init = 1.0;
  int mlp_hidden = 128;
  double query_init_std = 0.02;
  double head_bias_init = -3.0;
  bool hard_assignment = true;
  bool multiscale_fusion = true;
  bool use_refined_text = true;
  std::uint64_t seed = 2;
  // Filled from the backbone configuration.
  int text_dim = 64;
  std::array<int, 4> pyramid_channels{32, 64, 128, 256};
};

void validate(const Config& cfg);

// Registers tensors under "pcmrd/".
void init_params(ParamStore& params, const Config& cfg);

std::string stage_prefix(int stage);                 // "pcmrd/stage1/"
std::string layer_prefix(int stage, int layer);      // "pcmrd/stage1/oaqil0/"

struct AssignmentBundle {
  Matrix s_pixel;   // M x P cosine similarities
  Matrix s_gumbel;  // M x P, each column a distribution over tokens
  Matrix s_onehot;  // P x M
  Matrix s_mask;    // M x P, forward value equals s_onehot^T
  Matrix noise;     // M x P Gumbel sample (zero in eval mode)
  double tau = 1.0;
};

struct DecoderOutput {
  std::array<Matrix, 3> stage_tokens;
  std::array<AssignmentBundle, 3> stage_assignments;  // last layer of each stage
  std::array<int, 3> fused_heights{};
  std::array<int, 3> fused_widths{};
  Matrix mask_logits;  // (H*W) x 1
  int height = 0;
  int width = 0;
};

// How the stochastic parts of a forward pass are driven.
struct RunOptions {
  bool train = false;
  // Gumbel source in train mode; null means G = 0.
  Rng* noise = nullptr;
  // Replays assignments (noise, one-hot, stop-gradient values) recorded by an
  // earlier pass, one entry per OAQIL layer in execution order. The
  // straight-through mask is then built as onehot^T - sg + S_gumbel with
  // the recorded sg, so finite differences see the surrogate the analytic
  // gradient differentiates.
  const std::vector<AssignmentBundle>* replay = nullptr;
};

// ---- tape-level ------------------------------------------------------------

struct FusedVars {
  ad::Var values;
  int height = 0;
  int width = 0;
};

FusedVars fuse_scales(ad::Tape& tape, ParamStore& params, const Config& cfg, int stage, ad::Var deep,
                      int deep_height, int deep_width, ad::Var shallow, int shallow_height,
                      int shallow_width);

// Q_l = softmax((Q W_q)(L W_k)^T / sqrt(C_q)) (L W_v) W_c.
ad::Var inject_text(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var queries,
                    ad::Var text, const Mask& text_mask, Matrix* attention = nullptr);

struct SimilarityVars {
  ad::Var s_pixel;    // M x P
  ad::Var projected;  // P x C_q, flatten(V W_d)
};
SimilarityVars pixel_similarity(ad::Tape& tape, ParamStore& params, const std::string& prefix,
                                ad::Var tokens, ad::Var fused);

struct AssignVars {
  ad::Var s_gumbel;
  ad::Var s_mask;
  Matrix s_onehot;
};
AssignVars gumbel_assign(ad::Tape& tape, ad::Var s_pixel, ad::Var tau, const Matrix& noise, bool hard,
                         const AssignmentBundle* replay = nullptr);

// Q_u = MLP(S_mask flatten(V W_d)) + W_t Q_l.
ad::Var update_tokens(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var s_mask,
                      ad::Var projected, ad::Var tokens);

struct OaqilVars {
  ad::Var tokens;
  AssignVars assign;
  AssignmentBundle bundle;
};
OaqilVars oaqil_forward(ad::Tape& tape, ParamStore& params, const Config& cfg, const std::string& prefix,
                        ad::Var queries, ad::Var text, const Mask& text_mask, ad::Var fused,
                        const RunOptions& run, std::size_t layer_index);

// Runs `layers` OAQIL layers of one stage; zero layers return the queries
// unchanged. Bundles are appended to `bundles`, the last layer's assignment
// is written to `last` when any layer ran.
ad::Var run_stage(ad::Tape& tape, ParamStore& params, const Config& cfg, int stage, int layers, ad::Var queries,
                  ad::Var text, const Mask& text_mask, ad::Var fused, const RunOptions& run,
                  std::vector<AssignmentBundle>& bundles, AssignVars* last);

// Relevance-weighted assignment map, bilinearly upsampled by `factor`.
ad::Var predict_mask(ad::Tape& tape, ParamStore& params, ad::Var tokens, const AssignVars& assign, bool train,
                     int fused_height, int fused_width, int factor);

struct ForwardVars {
  ad::Var mask_logits;
  DecoderOutput output;
  std::vector<AssignmentBundle> bundles;  // every OAQIL layer, in order
};
ForwardVars forward(ad::Tape& tape, ParamStore& params, const Config& cfg, const backbones::PyramidVars& pyramid,
                    ad::Var text, const Mask& text_mask, const RunOptions& run);

// ---- value-level -----------------------------------------------------------

AssignmentBundle gumbel_assign(const Matrix& s_pixel, double tau, const Matrix& noise, bool train_mode);
Matrix pixel_similarity(ParamStore& params, const std::string& prefix, const Matrix& tokens,
                        const Matrix& fused);
Matrix inject_text(ParamStore& params, const std::string& prefix, const Matrix& queries,
                   const backbones::LinguisticFeatures& text);
DecoderOutput forward(ParamStore& params, const Config& cfg, const backbones::MultiScaleFeatures& features,
                      const backbones::LinguisticFeatures& text, const RunOptions& run);

}  // namespace diffris::pcmrd
