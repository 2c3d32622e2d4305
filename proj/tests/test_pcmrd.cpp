#include <doctest.h>

#include <cmath>

#include "diffris/errors.hpp"
#include "diffris/gradcheck.hpp"
#include "diffris/model.hpp"
#include "diffris/pcmrd.hpp"
#include "support.hpp"

using namespace diffris;
using namespace diffris::pcmrd;

namespace {

const std::string kLayer = layer_prefix(1, 0);

struct Fixture {
  Config cfg;
  ParamStore params;
  Fixture() { init_params(params, cfg); }
};

backbones::LinguisticFeatures make_text(Rng& rng, int tokens, int valid, int dim) {
  backbones::LinguisticFeatures t;
  t.values = rng.normal_matrix(tokens, dim, 1.0);
  t.pad_mask.assign(static_cast<std::size_t>(tokens), 0);
  for (int i = 0; i < valid; ++i) t.pad_mask[i] = 1;
  t.values.bottomRows(tokens - valid).setZero();
  return t;
}

}  // namespace

TEST_CASE("fusion output takes the shallower level's size") {
  Fixture f;
  Rng rng(1);
  ad::Tape tape;
  ad::Var deep = tape.constant(rng.normal_matrix(16 * 16, f.cfg.pyramid_channels[3], 1.0));
  ad::Var shallow = tape.constant(rng.normal_matrix(32 * 32, f.cfg.pyramid_channels[2], 1.0));
  const auto fused = fuse_scales(tape, f.params, f.cfg, 1, deep, 16, 16, shallow, 32, 32);
  CHECK(fused.height == 32);
  CHECK(fused.width == 32);
  CHECK(fused.values.rows() == 32 * 32);
  CHECK(fused.values.cols() == f.cfg.fused_channels[0]);
  CHECK_THROWS_AS(fuse_scales(tape, f.params, f.cfg, 1, deep, 16, 16, tape.constant(Matrix::Zero(64 * 64, 128)),
                              64, 64),
                  ShapeError);
}

TEST_CASE("fusion with a zero deep map depends only on the shallow path") {
  Fixture f;
  Rng rng(2);
  const int cd = f.cfg.pyramid_channels[3];
  const int cs = f.cfg.pyramid_channels[2];
  const Matrix shallow = rng.normal_matrix(16, cs, 1.0);
  ad::Tape tape;
  const auto fused = fuse_scales(tape, f.params, f.cfg, 1, tape.constant(Matrix::Zero(4, cd)), 2, 2,
                                 tape.constant(shallow), 4, 4);
  const Matrix& w = f.params.at("pcmrd/stage1/fuse/W").value;
  const Matrix expected = (shallow * w.bottomRows(cs)).array().tanh().matrix();
  CHECK((fused.values.value() - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("text injection: one valid key and a zero output projection") {
  Fixture f;
  Rng rng(3);
  const Matrix q = rng.normal_matrix(f.cfg.num_queries, f.cfg.query_dim, 1.0);
  const auto text = make_text(rng, 6, 1, f.cfg.text_dim);
  ad::Tape tape;
  Matrix attention;
  ad::Var out = inject_text(tape, f.params, kLayer, tape.constant(q), tape.constant(text.values), text.pad_mask,
                            &attention);
  for (int m = 0; m < f.cfg.num_queries; ++m) CHECK(attention(m, 0) == 1.0);
  const Matrix row = text.values.row(0) * f.params.at(kLayer + "W_v/W").value * f.params.at(kLayer + "W_c/W").value;
  for (int m = 0; m < f.cfg.num_queries; ++m) CHECK((out.value().row(m) - row).cwiseAbs().maxCoeff() < 1e-12);

  ParamStore zeroed = f.params;
  zeroed.at(kLayer + "W_c/W").value.setZero();
  CHECK(inject_text(zeroed, kLayer, q, text).isZero(0.0));
}

TEST_CASE("text injection matches a 2 x 2 hand evaluation") {
  Config cfg;
  cfg.query_dim = 2;
  cfg.text_dim = 2;
  ParamStore params;
  init_params(params, cfg);
  for (const char* n : {"W_q/W", "W_k/W", "W_v/W", "W_c/W"}) params.at(kLayer + n).value = Matrix::Identity(2, 2);
  Matrix q(2, 2);
  q << 1.0, 0.0, 0.0, 1.0;
  backbones::LinguisticFeatures text{Matrix(2, 2), {1, 1}};
  text.values << 2.0, 0.0, 0.0, 1.0;
  const Matrix out = inject_text(params, kLayer, q, text);
  // Query 0 scores (2, 0) / sqrt(2); query 1 scores (0, 1) / sqrt(2).
  const double r = std::sqrt(2.0);
  const double a0 = 1.0 / (1.0 + std::exp(-2.0 / r));
  const double a1 = 1.0 / (1.0 + std::exp(-1.0 / r));
  CHECK(out(0, 0) == doctest::Approx(2.0 * a0).epsilon(1e-14));
  CHECK(out(0, 1) == doctest::Approx(1.0 - a0).epsilon(1e-14));
  CHECK(out(1, 0) == doctest::Approx(2.0 * (1.0 - a1)).epsilon(1e-14));
  CHECK(out(1, 1) == doctest::Approx(a1).epsilon(1e-14));
}

TEST_CASE("pixel similarity is the cosine of the projected vectors") {
  Fixture f;
  Rng rng(4);
  const Matrix tokens = rng.normal_matrix(f.cfg.num_queries, f.cfg.query_dim, 1.0);
  const Matrix fused = rng.normal_matrix(20, f.cfg.fused_channels[0], 1.0);
  const Matrix s = pixel_similarity(f.params, kLayer, tokens, fused);
  const Matrix t = tokens * f.params.at(kLayer + "W_t/W").value;
  const Matrix d = fused * f.params.at(kLayer + "W_d/W").value;
  for (Eigen::Index m = 0; m < t.rows(); ++m) {
    for (Eigen::Index p = 0; p < d.rows(); ++p) {
      double dot = 0.0;
      double nt = 0.0;
      double nd = 0.0;
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        dot += t(m, c) * d(p, c);
        nt += t(m, c) * t(m, c);
        nd += d(p, c) * d(p, c);
      }
      CHECK(std::abs(s(m, p) - dot / (std::sqrt(nt) * std::sqrt(nd))) < 1e-6);
      CHECK(std::abs(s(m, p)) <= 1.0 + 1e-6);
    }
  }
}

TEST_CASE("pixel similarity of identical and orthogonal directions") {
  Config cfg;
  cfg.query_dim = 2;
  cfg.fused_channels = {2, 2, 2};
  ParamStore params;
  init_params(params, cfg);
  params.at(kLayer + "W_t/W").value = Matrix::Identity(2, 2);
  params.at(kLayer + "W_d/W").value = Matrix::Identity(2, 2);
  Matrix tokens(1, 2);
  tokens << 3.0, 0.0;
  Matrix pixels(2, 2);
  pixels << 0.5, 0.0, 0.0, 7.0;
  const Matrix s = pixel_similarity(params, kLayer, tokens, pixels);
  CHECK(s(0, 0) == doctest::Approx(1.0).epsilon(1e-7));  // normalization epsilon
  CHECK(s(0, 1) == 0.0);
}

TEST_CASE("Gumbel assignment: two-token softmax, one-hot law, straight-through value") {
  Matrix s(2, 1);
  s << 1.0, 0.0;
  const auto b = gumbel_assign(s, 1.0, Matrix::Zero(2, 1), false);
  CHECK(b.s_gumbel(0, 0) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(b.s_gumbel(1, 0) == doctest::Approx(0.2689414213699951).epsilon(1e-12));
  CHECK(b.s_onehot(0, 0) == 1.0);
  CHECK(b.s_onehot(0, 1) == 0.0);

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix sp = (rng.normal_matrix(5, 30, 1.0).array().tanh()).matrix();
    const Matrix g = rng.gumbel_matrix(5, 30);
    const double tau = 0.1 + 2.0 * rng.uniform();
    const auto a = gumbel_assign(sp, tau, g, true);
    CHECK(a.s_mask == Matrix(a.s_onehot.transpose()));
    for (int p = 0; p < 30; ++p) {
      CHECK(std::abs(a.s_gumbel.col(p).sum() - 1.0) < 1e-6);
      CHECK(a.s_onehot.row(p).sum() == 1.0);
      Eigen::Index best = 0;
      a.s_gumbel.col(p).maxCoeff(&best);
      CHECK(a.s_onehot(p, best) == 1.0);
    }
  }
}

TEST_CASE("argmax ties break to the lowest token index") {
  const auto b = gumbel_assign(Matrix::Constant(4, 3, 0.25), 1.0, Matrix::Zero(4, 3), false);
  for (int p = 0; p < 3; ++p) CHECK(b.s_onehot(p, 0) == 1.0);
}

TEST_CASE("lower temperature sharpens and the zero limit is one-hot") {
  Rng rng(6);
  const Matrix s = rng.normal_matrix(4, 25, 0.5);
  Matrix previous_max = Matrix::Zero(1, 25);
  for (double tau : {4.0, 2.0, 1.0, 0.5, 0.1, 0.01}) {
    const auto b = gumbel_assign(s, tau, Matrix::Zero(4, 25), false);
    const Matrix col_max = b.s_gumbel.colwise().maxCoeff();
    CHECK((col_max.array() >= previous_max.array() - 1e-15).all());
    previous_max = col_max;
  }
  const auto cold = gumbel_assign(s, 1e-6, Matrix::Zero(4, 25), false);
  CHECK((cold.s_gumbel - Matrix(cold.s_onehot.transpose())).cwiseAbs().maxCoeff() < 1e-9);
  CHECK_THROWS_AS(gumbel_assign(s, 0.0, Matrix::Zero(4, 25), false), ParameterError);
  CHECK_THROWS_AS(gumbel_assign(s, -1.0, Matrix::Zero(4, 25), false), ParameterError);
}

TEST_CASE("eval-mode assignment uses no noise") {
  Rng rng(7);
  const Matrix s = rng.normal_matrix(3, 8, 0.5);
  const auto b = gumbel_assign(s, 1.0, rng.gumbel_matrix(3, 8), false);
  const auto ref = gumbel_assign(s, 1.0, Matrix::Zero(3, 8), false);
  CHECK(b.s_gumbel == ref.s_gumbel);
  CHECK(b.noise.isZero(0.0));
}

TEST_CASE("token update: zero MLP leaves the projected residual") {
  Fixture f;
  Rng rng(8);
  ParamStore& params = f.params;
  params.at(kLayer + "mlp/fc2/W").value.setZero();
  params.at(kLayer + "mlp/fc2/b").value.setZero();
  const Matrix tokens = rng.normal_matrix(f.cfg.num_queries, f.cfg.query_dim, 1.0);
  ad::Tape tape;
  ad::Var s_mask = tape.constant(rng.normal_matrix(f.cfg.num_queries, 10, 1.0));
  ad::Var projected = tape.constant(rng.normal_matrix(10, f.cfg.query_dim, 1.0));
  ad::Var out = update_tokens(tape, params, kLayer, s_mask, projected, tape.constant(tokens));
  CHECK((out.value() - tokens * params.at(kLayer + "W_t/W").value).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("one-hot pooling sums the pixels assigned to each token") {
  Rng rng(9);
  const int m = 4;
  const int p = 30;
  const Matrix projected = rng.normal_matrix(p, 6, 1.0);
  const auto b = gumbel_assign(rng.normal_matrix(m, p, 1.0), 0.7, Matrix::Zero(m, p), false);
  const Matrix pooled = b.s_mask * projected;
  Matrix oracle = Matrix::Zero(m, 6);
  for (int px = 0; px < p; ++px) {
    for (int k = 0; k < m; ++k) {
      if (b.s_onehot(px, k) == 1.0) oracle.row(k) += projected.row(px);
    }
  }
  CHECK((pooled - oracle).cwiseAbs().maxCoeff() < 1e-6);

  Matrix all_zero = Matrix::Zero(m, p);
  all_zero.row(0).setConstant(1.0);
  const auto to_first = gumbel_assign(all_zero, 1.0, Matrix::Zero(m, p), false);
  const Matrix first = to_first.s_mask * projected;
  CHECK((first.row(0) - projected.colwise().sum()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(first.bottomRows(m - 1).isZero(0.0));
}

TEST_CASE("a stage with no OAQIL layers returns its queries") {
  Fixture f;
  Rng rng(10);
  ad::Tape tape;
  ad::Var q = tape.constant(rng.normal_matrix(f.cfg.num_queries, f.cfg.query_dim, 1.0));
  const auto text = make_text(rng, 5, 3, f.cfg.text_dim);
  std::vector<AssignmentBundle> bundles;
  ad::Var out = run_stage(tape, f.params, f.cfg, 1, 0, q, tape.constant(text.values), text.pad_mask,
                          tape.constant(rng.normal_matrix(16, f.cfg.fused_channels[0], 1.0)), RunOptions{},
                          bundles, nullptr);
  CHECK(out.value() == q.value());
  CHECK(bundles.empty());
}

TEST_CASE("decoder structure, determinism and query relabeling symmetry") {
  ModelConfig mc;
  mc.sync();
  Model model(mc);
  Rng rng(11);
  const Image img{64, 64, Matrix(64 * 64, 3)};
  Image image = img;
  for (Eigen::Index i = 0; i < image.pixels.size(); ++i) image.pixels.data()[i] = rng.uniform();
  const auto tokens = backbones::TokenSequence::make({2, 5, 9}, mc.backbones.max_tokens);

  ad::Tape tape;
  const auto pass = model.forward(tape, image, tokens, RunOptions{});
  const DecoderOutput& out = pass.decoder.output;
  CHECK(out.fused_heights == std::array<int, 3>{4, 8, 16});
  CHECK(out.fused_widths == std::array<int, 3>{4, 8, 16});
  CHECK(out.height == 64);
  CHECK(out.width == 64);
  CHECK(out.mask_logits.rows() == 64 * 64);
  CHECK(out.mask_logits.cols() == 1);
  CHECK(out.mask_logits.allFinite());

  const Matrix logits = model.predict_logits(image, tokens);
  CHECK(logits == model.predict_logits(image, tokens));

  Matrix& queries = model.params().at("pcmrd/queries").value;
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(queries.rows());
  perm.indices() << 3, 0, 7, 1, 6, 2, 5, 4;
  queries = perm * queries;
  CHECK((model.predict_logits(image, tokens) - logits).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("mask head: zero scores, single selected token, train-mode sum") {
  Fixture f;
  Rng rng(12);
  const int m = f.cfg.num_queries;
  const int h = 3;
  const int w = 4;
  ad::Tape tape;
  ad::Var s_pixel = tape.constant(rng.normal_matrix(m, h * w, 0.5));
  ad::Var tau = tape.constant(Matrix::Ones(1, 1));
  const AssignVars assign = gumbel_assign(tape, s_pixel, tau, rng.gumbel_matrix(m, h * w), true);

  ParamStore zero = f.params;
  zero.at("pcmrd/head/W").value.setZero();
  zero.at("pcmrd/head/b").value.setZero();
  ad::Var tokens = tape.constant(rng.normal_matrix(m, f.cfg.query_dim, 1.0));
  CHECK(predict_mask(tape, zero, tokens, assign, false, h, w, 4).value().isZero(0.0));

  ParamStore pick = zero;
  pick.at("pcmrd/head/W").value(0, 0) = 1.0;
  Matrix selector = Matrix::Zero(m, f.cfg.query_dim);
  selector(2, 0) = 1.0;
  const Matrix eval = predict_mask(tape, pick, tape.constant(selector), assign, false, h, w, 1).value();
  for (int p = 0; p < h * w; ++p) CHECK(eval(p, 0) == assign.s_onehot(p, 2));

  const Matrix scores = rng.normal_matrix(m, 1, 1.0);
  Matrix score_tokens = Matrix::Zero(m, f.cfg.query_dim);
  score_tokens.col(0) = scores;
  const Matrix train = predict_mask(tape, pick, tape.constant(score_tokens), assign, true, h, w, 1).value();
  for (int p = 0; p < h * w; ++p) {
    double oracle = 0.0;
    for (int k = 0; k < m; ++k) oracle += scores(k, 0) * assign.s_gumbel.value()(k, p);
    CHECK(std::abs(train(p, 0) - oracle) < 1e-6);
  }
}

TEST_CASE("decoder gradients and straight-through identities") {
  for (std::uint64_t seed : {0u, 9u}) {
    gradcheck::Options opts;
    opts.seed = seed;
    opts.straight_through_instances = 100;
    const auto oaqil = gradcheck::check_oaqil(opts);
    INFO("worst tensor " << oaqil.worst_tensor);
    CHECK(oaqil.pass);
    CHECK(gradcheck::check_straight_through(opts).pass);
  }
}

TEST_CASE("invalid decoder settings are rejected") {
  Config cfg;
  cfg.num_queries = 0;
  CHECK_THROWS_AS(validate(cfg), ParameterError);
  cfg = Config{};
  cfg.tau_init = 0.0;
  CHECK_THROWS_AS(validate(cfg), ParameterError);
}
