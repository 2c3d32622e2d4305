#include "diffris/backbones.hpp"

#include <cmath>
#include <string>

#include "diffris/errors.hpp"
#include "diffris/layers.hpp"

namespace diffris {

std::size_t BinaryMask::count() const {
  std::size_t n = 0;
  for (auto v : values) n += v != 0;
  return n;
}

BinaryMask binarize(const Matrix& logits, int height, int width, double threshold) {
  if (logits.size() != static_cast<Eigen::Index>(height) * width) {
    throw ShapeError("binarize: logits size differs from height * width");
  }
  BinaryMask m(height, width);
  for (Eigen::Index i = 0; i < logits.size(); ++i) m.values[i] = logits.data()[i] > threshold;
  return m;
}

}  // namespace diffris

namespace diffris::backbones {

namespace {

const std::string kPrefix = "backbones/";

std::string level_name(int i) { return std::to_string(i + 1); }

// Single-head cross-attention from a feature map onto the text tokens.
ad::Var text_cross_attention(ad::Tape& tape, ParamStore& params, const std::string& prefix,
                             ad::Var features, ad::Var text, const Mask& text_mask, int attn_dim) {
  ad::Var q = layers::linear(tape, params, prefix + "/q", features, false);
  ad::Var k = layers::linear(tape, params, prefix + "/k", text, false);
  ad::Var v = layers::linear(tape, params, prefix + "/v", text, false);
  ad::Var scores = ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(attn_dim)));
  return ad::matmul(ad::softmax_rows(scores, &text_mask), v);
}

// Removes each channel's spatial mean. The ReLUs and the text residual add an
// offset shared by every pixel that otherwise swamps pixel-to-pixel variation.
ad::Var spatial_center(ad::Tape& tape, ad::Var x) {
  const Eigen::Index pixels = x.rows();
  ad::Var mean = ad::matmul(tape.constant(Matrix::Constant(1, pixels, 1.0 / static_cast<double>(pixels))), x);
  return ad::sub(x, ad::matmul(tape.constant(Matrix::Ones(pixels, 1)), mean));
}

}  // namespace

void validate(const Config& cfg) {
  if (cfg.vocab_size < 1 || cfg.max_tokens < 1 || cfg.text_dim < 1 || cfg.text_depth < 0 ||
      cfg.text_ffn < 1 || cfg.latent_channels < 4 || cfg.attn_dim < 1) {
    throw ParameterError("backbones: dimensions must be positive");
  }
  if (cfg.downsample < 2 || cfg.downsample % 2 != 0) {
    throw ParameterError("backbones: downsample factor must be even and at least 2");
  }
  if (cfg.latent_channels % 4 != 0) throw ParameterError("backbones: latent_channels must be divisible by 4");
  if (cfg.text_heads < 1 || cfg.text_dim % cfg.text_heads != 0) {
    throw ParameterError("backbones: text_dim must be divisible by text_heads");
  }
  for (int c : cfg.pyramid_channels) {
    if (c < 1) throw ParameterError("backbones: pyramid channels must be positive");
  }
}

TokenSequence TokenSequence::make(std::vector<int> ids, int max_tokens) {
  if (static_cast<int>(ids.size()) > max_tokens) {
    throw LengthError("token sequence of length " + std::to_string(ids.size()) +
                      " exceeds maximum " + std::to_string(max_tokens));
  }
  TokenSequence t;
  t.pad_mask.assign(static_cast<std::size_t>(max_tokens), 0);
  for (std::size_t i = 0; i < ids.size(); ++i) t.pad_mask[i] = 1;
  t.ids = std::move(ids);
  return t;
}

Matrix sinusoidal_positions(int max_tokens, int dim) {
  Matrix pos(max_tokens, dim);
  for (int p = 0; p < max_tokens; ++p) {
    for (int i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / dim);
      pos(p, i) = i % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq);
    }
  }
  return pos;
}

void init_params(ParamStore& params, const Config& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  const bool trainable = !cfg.frozen;
  params.add(kPrefix + "text/embedding", rng.normal_matrix(cfg.vocab_size, cfg.text_dim, 1.0), trainable);
  for (int l = 0; l < cfg.text_depth; ++l) {
    layers::add_encoder_layer(params, kPrefix + "text/layer" + std::to_string(l), cfg.text_dim,
                              cfg.text_ffn, rng, trainable);
  }
  layers::add_conv(params, kPrefix + "latent/patch", 3, cfg.latent_channels / 4, cfg.downsample / 2, rng,
                   false, trainable);

  const auto& ch = cfg.pyramid_channels;
  const std::string u = kPrefix + "unet/";
  layers::add_conv(params, u + "enc2", cfg.latent_channels, ch[1], 3, rng, true, trainable);
  layers::add_conv(params, u + "enc3", ch[1], ch[2], 3, rng, true, trainable);
  layers::add_conv(params, u + "enc4", ch[2], ch[3], 3, rng, true, trainable);
  layers::add_conv(params, u + "dec3", ch[3] + ch[2], ch[2], 1, rng, true, trainable);
  layers::add_conv(params, u + "dec2", ch[2] + ch[1], ch[1], 1, rng, true, trainable);
  layers::add_conv(params, u + "dec1", ch[1] + cfg.latent_channels / 4, ch[0], 1, rng, true, trainable);
  for (int i = 0; i < 4; ++i) {
    const std::string x = u + "xattn" + level_name(i);
    layers::add_linear(params, x + "/q", ch[i], cfg.attn_dim, rng, false, trainable);
    layers::add_linear(params, x + "/k", cfg.text_dim, cfg.attn_dim, rng, false, trainable);
    layers::add_linear(params, x + "/v", cfg.text_dim, ch[i], rng, false, trainable);
  }
}

ad::Var encode_text(ad::Tape& tape, ParamStore& params, const Config& cfg, const TokenSequence& tokens) {
  if (static_cast<int>(tokens.ids.size()) > cfg.max_tokens) {
    throw LengthError("token sequence of length " + std::to_string(tokens.ids.size()) +
                      " exceeds maximum " + std::to_string(cfg.max_tokens));
  }
  Matrix one_hot = Matrix::Zero(cfg.max_tokens, cfg.vocab_size);
  Mask mask(static_cast<std::size_t>(cfg.max_tokens), 0);
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    const int id = tokens.ids[i];
    if (id < 0 || id >= cfg.vocab_size) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));
    }
    one_hot(static_cast<Eigen::Index>(i), id) = 1.0;
    mask[i] = 1;
  }
  Matrix positions = sinusoidal_positions(cfg.max_tokens, cfg.text_dim);
  for (int r = 0; r < cfg.max_tokens; ++r) {
    if (!mask[r]) positions.row(r).setZero();
  }
  ad::Var x = ad::add(ad::matmul(tape.constant(std::move(one_hot)), params.bind(tape, kPrefix + "text/embedding")),
                      tape.constant(std::move(positions)));
  for (int l = 0; l < cfg.text_depth; ++l) {
    x = layers::encoder_layer(tape, params, kPrefix + "text/layer" + std::to_string(l), x, mask,
                              cfg.text_heads);
  }
  return ad::mask_rows(x, mask);
}

ad::Var encode_image_latent(ad::Tape& tape, ParamStore& params, const Config& cfg, const Image& image) {
  const int f = cfg.downsample;
  if (image.height <= 0 || image.width <= 0 || image.height % f != 0 || image.width % f != 0) {
    throw ShapeError("image of " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " is not divisible by downsample factor " + std::to_string(f));
  }
  if (image.pixels.rows() != static_cast<Eigen::Index>(image.height) * image.width ||
      image.pixels.cols() != 3) {
    throw ShapeError("image pixel matrix must be (height*width) x 3");
  }
  // Pixels rescaled to [-1, 1]. Each (f/2)-pixel patch is embedded with the
  // same weights and 2 x 2 patches are stacked into one latent cell, so the
  // latent keeps the half-cell layout the top decoder level unpacks.
  ad::Var x = tape.constant(image.pixels.array() * 2.0 - 1.0);
  const int p = f / 2;
  ad::Var patches = layers::conv(tape, params, kPrefix + "latent/patch", x, image.height, image.width, p, p, 0,
                                 false);
  return ad::space_to_depth2(patches, image.height / p, image.width / p);
}

PyramidVars extract_multiscale(ad::Tape& tape, ParamStore& params, const Config& cfg, ad::Var z,
                               int latent_height, int latent_width, ad::Var text,
                               const Mask& text_mask) {
  if (z.rows() != static_cast<Eigen::Index>(latent_height) * latent_width ||
      z.cols() != cfg.latent_channels) {
    throw ShapeError("extract_multiscale: latent shape disagrees with config");
  }
  if (text.rows() != cfg.max_tokens || text.cols() != cfg.text_dim ||
      static_cast<int>(text_mask.size()) != cfg.max_tokens) {
    throw ShapeError("extract_multiscale: text features shape disagrees with config");
  }
  if (latent_height % 4 != 0 || latent_width % 4 != 0) {
    throw ShapeError("extract_multiscale: latent size must be divisible by 4");
  }
  const std::string u = kPrefix + "unet/";
  const int h2 = latent_height, w2 = latent_width;
  const int h3 = h2 / 2, w3 = w2 / 2;
  const int h4 = h3 / 2, w4 = w3 / 2;
  auto xattn = [&](int level, ad::Var feats) {
    return ad::add(feats, text_cross_attention(tape, params, u + "xattn" + level_name(level), feats,
                                               text, text_mask, cfg.attn_dim));
  };

  ad::Var e2 = ad::relu(layers::conv(tape, params, u + "enc2", z, h2, w2, 3, 1, 1));
  ad::Var e3 = ad::relu(layers::conv(tape, params, u + "enc3", e2, h2, w2, 3, 2, 1));
  ad::Var e4 = ad::relu(layers::conv(tape, params, u + "enc4", e3, h3, w3, 3, 2, 1));

  ad::Var d4 = xattn(3, e4);
  const ad::Var cat3[] = {ad::upsample_nearest2(d4, h4, w4), e3};
  ad::Var d3 = xattn(2, ad::relu(layers::conv(tape, params, u + "dec3", ad::concat_cols(cat3), h3, w3, 1, 1, 0)));
  const ad::Var cat2[] = {ad::upsample_nearest2(d3, h3, w3), e2};
  ad::Var d2 = xattn(1, ad::relu(layers::conv(tape, params, u + "dec2", ad::concat_cols(cat2), h2, w2, 1, 1, 0)));
  // Top level: the upsampled decoder path plus the unpacked latent as a skip.
  const ad::Var cat1[] = {ad::upsample_nearest2(d2, h2, w2), ad::depth_to_space2(z, h2, w2)};
  ad::Var d1 = xattn(0, ad::relu(layers::conv(tape, params, u + "dec1", ad::concat_cols(cat1), 2 * h2, 2 * w2,
                                              1, 1, 0)));

  PyramidVars out;
  out.levels = {spatial_center(tape, d1), spatial_center(tape, d2), spatial_center(tape, d3),
                spatial_center(tape, d4)};
  out.heights = {2 * h2, h2, h3, h4};
  out.widths = {2 * w2, w2, w3, w4};
  return out;
}

LinguisticFeatures encode_text(ParamStore& params, const Config& cfg, const TokenSequence& tokens) {
  ad::Tape tape;
  ad::Var x = encode_text(tape, params, cfg, tokens);
  LinguisticFeatures out;
  out.values = x.value();
  out.pad_mask.assign(static_cast<std::size_t>(cfg.max_tokens), 0);
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) out.pad_mask[i] = 1;
  return out;
}

LatentRepresentation encode_image_latent(ParamStore& params, const Config& cfg, const Image& image) {
  ad::Tape tape;
  ad::Var z = encode_image_latent(tape, params, cfg, image);
  return {image.height / cfg.downsample, image.width / cfg.downsample, z.value()};
}

MultiScaleFeatures extract_multiscale(ParamStore& params, const Config& cfg,
                                      const LatentRepresentation& z, const LinguisticFeatures& text) {
  ad::Tape tape;
  PyramidVars p = extract_multiscale(tape, params, cfg, tape.constant_ref(z.values), z.height, z.width,
                                     tape.constant_ref(text.values), text.pad_mask);
  MultiScaleFeatures out;
  for (int i = 0; i < 4; ++i) out.levels[i] = {p.heights[i], p.widths[i], p.levels[i].value()};
  return out;
}

DiffusionSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ParameterError("make_schedule: step count must be at least 1");
  if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end < 1.0 && beta_end > 0.0)) {
    throw ParameterError("make_schedule: betas must lie in (0, 1)");
  }
  if (steps > 1 && !(beta_start < beta_end)) {
    throw ParameterError("make_schedule: beta_start must be below beta_end");
  }
  DiffusionSchedule s;
  double running = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double beta =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / static_cast<double>(steps - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    running *= 1.0 - beta;
    s.alpha_bars.push_back(running);
  }
  return s;
}

Matrix forward_diffuse(const Matrix& x0, int t, const DiffusionSchedule& schedule, const Matrix& noise) {
  if (t < 1 || t > schedule.steps()) {
    throw IndexError("forward_diffuse: step " + std::to_string(t) + " outside [1, " +
                     std::to_string(schedule.steps()) + "]");
  }
  if (noise.rows() != x0.rows() || noise.cols() != x0.cols()) {
    throw ShapeError("forward_diffuse: noise shape differs from x0");
  }
  const double abar = schedule.alpha_bars[static_cast<std::size_t>(t - 1)];
  return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * noise;
}

}  // namespace diffris::backbones
