#include <doctest.h>

#include <cmath>

#include "diffris/backbones.hpp"
#include "diffris/errors.hpp"
#include "support.hpp"

using namespace diffris;
using namespace diffris::backbones;

namespace {

Image random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Image img{h, w, Matrix(h * w, 3)};
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("empty expression encodes to zeros with an all-false mask") {
  Config cfg;
  ParamStore params;
  init_params(params, cfg);
  const auto out = encode_text(params, cfg, TokenSequence::make({}, cfg.max_tokens));
  CHECK(out.values.rows() == cfg.max_tokens);
  CHECK(out.values.cols() == cfg.text_dim);
  CHECK(out.values.isZero(0.0));
  for (auto m : out.pad_mask) CHECK(m == 0);
}

TEST_CASE("text encoding is deterministic and zero on padded rows") {
  Config cfg;
  ParamStore params;
  init_params(params, cfg);
  const auto tokens = TokenSequence::make({3, 9, 27}, cfg.max_tokens);
  const auto a = encode_text(params, cfg, tokens);
  const auto b = encode_text(params, cfg, tokens);
  CHECK(a.values == b.values);
  CHECK(a.values.bottomRows(cfg.max_tokens - 3).isZero(0.0));
  CHECK(a.values.topRows(3).allFinite());
}

TEST_CASE("without encoder layers a one-token input is a table lookup") {
  Config cfg;
  cfg.text_depth = 0;
  ParamStore params;
  init_params(params, cfg);
  const Matrix& table = params.at("backbones/text/embedding").value;
  const Matrix positions = sinusoidal_positions(cfg.max_tokens, cfg.text_dim);
  for (int id = 0; id < cfg.vocab_size; ++id) {
    const auto out = encode_text(params, cfg, TokenSequence::make({id}, cfg.max_tokens));
    CHECK((out.values.row(0) - positions.row(0) - table.row(id)).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("text encoder rejects bad ids and long sequences") {
  Config cfg;
  ParamStore params;
  init_params(params, cfg);
  CHECK_THROWS_AS(encode_text(params, cfg, TokenSequence::make({cfg.vocab_size}, cfg.max_tokens)), VocabularyError);
  CHECK_THROWS_AS(encode_text(params, cfg, TokenSequence::make({-1}, cfg.max_tokens)), VocabularyError);
  TokenSequence too_long;
  too_long.ids.assign(cfg.max_tokens + 1, 1);
  too_long.pad_mask.assign(cfg.max_tokens, 1);
  CHECK_THROWS_AS(encode_text(params, cfg, too_long), LengthError);
}

TEST_CASE("latent has shape (H/f, W/f, c) and is deterministic") {
  Config cfg;
  ParamStore params;
  init_params(params, cfg);
  const Image img = random_image(64, 64, 5);
  const auto z = encode_image_latent(params, cfg, img);
  CHECK(z.height == 8);
  CHECK(z.width == 8);
  CHECK(z.values.rows() == 64);
  CHECK(z.values.cols() == cfg.latent_channels);
  CHECK(z.values.allFinite());
  CHECK(encode_image_latent(params, cfg, img).values == z.values);
}

TEST_CASE("bias-free latent encoder maps a zero-centered image to zero") {
  // Pixels are rescaled to [-1, 1] before the patch embedding, so the zero
  // point of the linear map is the mid-gray image.
  Config cfg;
  ParamStore params;
  init_params(params, cfg);
  Image gray{16, 16, Matrix::Constant(256, 3, 0.5)};
  CHECK(encode_image_latent(params, cfg, gray).values.isZero(0.0));
}

TEST_CASE("latent encoder rejects canvases not divisible by the downsampling factor") {
  Config cfg;
  ParamStore params;
  init_params(params, cfg);
  CHECK_THROWS_AS(encode_image_latent(params, cfg, random_image(60, 64, 1)), ShapeError);
}

TEST_CASE("pyramid levels follow H/2^(i+1) for i = 1..4") {
  for (int size : {64, 128}) {
    Config cfg;
    ParamStore params;
    init_params(params, cfg);
    const auto z = encode_image_latent(params, cfg, random_image(size, size, 3));
    const auto text = encode_text(params, cfg, TokenSequence::make({4, 5}, cfg.max_tokens));
    const auto pyr = extract_multiscale(params, cfg, z, text);
    for (int i = 0; i < 4; ++i) {
      CHECK(pyr.levels[i].height == size >> (i + 2));
      CHECK(pyr.levels[i].width == size >> (i + 2));
      CHECK(pyr.levels[i].values.cols() == cfg.pyramid_channels[i]);
      CHECK(pyr.levels[i].values.allFinite());
    }
  }
}

TEST_CASE("text conditioning reaches the pyramid and outputs are deterministic") {
  Config cfg;
  ParamStore params;
  init_params(params, cfg);
  const auto z = encode_image_latent(params, cfg, random_image(64, 64, 8));
  const auto t1 = encode_text(params, cfg, TokenSequence::make({4, 5}, cfg.max_tokens));
  const auto t2 = encode_text(params, cfg, TokenSequence::make({6, 7, 8}, cfg.max_tokens));
  const auto a = extract_multiscale(params, cfg, z, t1);
  const auto b = extract_multiscale(params, cfg, z, t2);
  const auto again = extract_multiscale(params, cfg, z, t1);
  bool differs = false;
  for (int i = 0; i < 4; ++i) {
    differs = differs || a.levels[i].values != b.levels[i].values;
    CHECK(again.levels[i].values == a.levels[i].values);
  }
  CHECK(differs);
}

TEST_CASE("schedule: single step, hand product, strict decrease") {
  const auto one = make_schedule(1, 0.1, 0.2);
  REQUIRE(one.steps() == 1);
  CHECK(one.betas[0] == 0.1);
  CHECK(one.alpha_bars[0] == 1.0 - 0.1);

  const auto two = make_schedule(2, 0.1, 0.2);
  CHECK(two.alpha_bars[0] == 0.9);
  CHECK(two.alpha_bars[1] == doctest::Approx(0.72).epsilon(1e-15));

  const auto s = make_schedule(1000, 1e-4, 0.02);
  double prod = 1.0;
  for (int t = 0; t < s.steps(); ++t) {
    prod *= 1.0 - s.betas[t];
    CHECK(std::abs(s.alpha_bars[t] - prod) < 1e-12);
    CHECK(s.alpha_bars[t] > 0.0);
    CHECK(s.alpha_bars[t] < 1.0);
    if (t > 0) {
      CHECK(s.betas[t] > s.betas[t - 1]);
      CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    }
  }
}

TEST_CASE("schedule rejects invalid variance ranges") {
  CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), ParameterError);
  CHECK_THROWS_AS(make_schedule(10, 0.2, 0.1), ParameterError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.1), ParameterError);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), ParameterError);
}

TEST_CASE("forward diffusion closed form") {
  const auto s = make_schedule(10, 0.01, 0.2);
  Rng rng(4);
  const Matrix x0 = rng.normal_matrix(3, 4, 1.0);
  const Matrix noise = rng.normal_matrix(3, 4, 1.0);
  const Matrix x0_copy = x0;
  const Matrix xt = forward_diffuse(x0, 5, s, noise);
  const double ab = s.alpha_bars[4];
  CHECK((xt - (std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise)).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(x0 == x0_copy);
  CHECK((forward_diffuse(x0, 5, s, Matrix::Zero(3, 4)) - std::sqrt(ab) * x0).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(forward_diffuse(x0, 0, s, noise), IndexError);
  CHECK_THROWS_AS(forward_diffuse(x0, 11, s, noise), IndexError);
  CHECK_THROWS_AS(forward_diffuse(x0, 1, s, Matrix::Zero(2, 2)), ShapeError);
}

TEST_CASE("frozen backbone tensors are registered as non-trainable") {
  Config cfg;
  ParamStore params;
  init_params(params, cfg);
  REQUIRE(params.count("backbones/") > 0);
  for (const auto& [name, p] : params.tensors()) CHECK_FALSE(p.trainable);
}
