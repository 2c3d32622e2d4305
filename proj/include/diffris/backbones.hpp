#pragma once

// Frozen encoders feeding the adapter and decoder: a token encoder, a
// strided-convolution latent encoder, and a text-conditioned encoder-decoder
// that turns the latent into a four-level feature pyramid in a single
// noise-free forward pass. The forward-diffusion utility lives here too.

#include <array>
#include <cstdint>
#include <vector>

#include "diffris/autodiff.hpp"
#include "diffris/params.hpp"
#include "diffris/types.hpp"

namespace diffris::backbones {

struct Config {
  int vocab_size = 64;
  int max_tokens = 20;  // l_m
  int text_dim = 64;    // D_l
  int text_depth = 1;
  int text_heads = 4;
  int text_ffn = 128;
  int downsample = 8;        // f
  int latent_channels = 32;  // c
  std::array<int, 4> pyramid_channels{32, 64, 128, 256};
  int attn_dim = 32;
  bool frozen = true;
  std::uint64_t seed = 0;
};

void validate(const Config& cfg);

struct TokenSequence {
  std::vector<int> ids;
  Mask pad_mask;  // max_tokens entries, the first ids.size() set

  static TokenSequence make(std::vector<int> ids, int max_tokens);
};

struct LinguisticFeatures {
  Matrix values;  // max_tokens x text_dim, padded rows zero
  Mask pad_mask;
};

struct LatentRepresentation {
  int height = 0;
  int width = 0;
  Matrix values;  // (height*width) x latent_channels
};

struct FeatureMap {
  int height = 0;
  int width = 0;
  Matrix values;  // (height*width) x channels
};

// Level i (0-based) has spatial size (H / 2^(i+2), W / 2^(i+2)).
struct MultiScaleFeatures {
  std::array<FeatureMap, 4> levels;
};

struct DiffusionSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  [[nodiscard]] int steps() const { return static_cast<int>(betas.size()); }
};

// Registers every backbone tensor under "backbones/", seeded by cfg.seed.
// Tensors are non-trainable when cfg.frozen.
void init_params(ParamStore& params, const Config& cfg);

// ---- tape-level ------------------------------------------------------------

// max_tokens x text_dim; padded rows zero.
ad::Var encode_text(ad::Tape& tape, ParamStore& params, const Config& cfg, const TokenSequence& tokens);
// (H/f * W/f) x latent_channels.
ad::Var encode_image_latent(ad::Tape& tape, ParamStore& params, const Config& cfg, const Image& image);

struct PyramidVars {
  std::array<ad::Var, 4> levels;
  std::array<int, 4> heights{};
  std::array<int, 4> widths{};
};

// Latent z at (latent_height x latent_width); text conditions every level
// through cross-attention so gradients reach `text`.
PyramidVars extract_multiscale(ad::Tape& tape, ParamStore& params, const Config& cfg, ad::Var z,
                               int latent_height, int latent_width, ad::Var text,
                               const Mask& text_mask);

// ---- value-level -----------------------------------------------------------

LinguisticFeatures encode_text(ParamStore& params, const Config& cfg, const TokenSequence& tokens);
LatentRepresentation encode_image_latent(ParamStore& params, const Config& cfg, const Image& image);
MultiScaleFeatures extract_multiscale(ParamStore& params, const Config& cfg,
                                      const LatentRepresentation& z, const LinguisticFeatures& text);

// ---- forward diffusion -----------------------------------------------------

// Linearly increasing variances beta_1..beta_T.
DiffusionSchedule make_schedule(int steps, double beta_start, double beta_end);

// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise, t in [1, T].
Matrix forward_diffuse(const Matrix& x0, int t, const DiffusionSchedule& schedule, const Matrix& noise);

// Fixed sinusoidal position table, max_tokens x dim.
Matrix sinusoidal_positions(int max_tokens, int dim);

}  // namespace diffris::backbones
