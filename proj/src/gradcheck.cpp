#include "diffris/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "diffris/errors.hpp"
#include "diffris/training.hpp"

namespace diffris::gradcheck {

namespace {

constexpr double kErrorFloor = 1e-6;

struct Target {
  std::string name;
  Matrix* value;
  Matrix* grad;
};

using Objective = std::function<ad::Var(ad::Tape&)>;

// Scalar objective over `targets`. Each target must be bound onto the tape
// inside `f` with its grad pointer as sink.
ComponentResult finite_difference(const std::string& component, std::vector<Target>& targets, const Objective& f,
                                  const Options& opts, double tolerance, int entries_per_tensor, Rng& rng) {
  for (auto& t : targets) t.grad->setZero(t.value->rows(), t.value->cols());
  {
    ad::Tape tape;
    ad::Var out = f(tape);
    tape.backward(out);
  }
  auto eval = [&] {
    ad::Tape tape;
    return f(tape).value()(0, 0);
  };
  ComponentResult r;
  r.component = component;
  r.tolerance = tolerance;
  for (auto& t : targets) {
    const Matrix analytic = *t.grad;
    const Eigen::Index size = t.value->size();
    std::vector<Eigen::Index> idx;
    if (entries_per_tensor <= 0 || size <= entries_per_tensor) {
      for (Eigen::Index i = 0; i < size; ++i) idx.push_back(i);
    } else {
      for (int k = 0; k < entries_per_tensor; ++k) idx.push_back(static_cast<Eigen::Index>(rng.below(size)));
    }
    Matrix a_sel(1, static_cast<Eigen::Index>(idx.size()));
    Matrix n_sel(1, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      double& x = t.value->data()[idx[k]];
      const double saved = x;
      x = saved + opts.step;
      const double up = eval();
      x = saved - opts.step;
      const double down = eval();
      x = saved;
      n_sel(0, k) = (up - down) / (2.0 * opts.step);
      a_sel(0, k) = analytic.data()[idx[k]];
    }
    const double err = relative_error(a_sel, n_sel);
    r.entries += idx.size();
    if (r.worst_tensor.empty() || err > r.max_error) {
      r.max_error = err;
      r.worst_tensor = t.name;
    }
  }
  r.pass = std::isfinite(r.max_error) && r.max_error < tolerance;
  return r;
}

// Replaces every tensor under `prefix` with values that make all paths
// active: gates open, low-rank factors nonzero, layer-norm gains near one.
void randomize(ParamStore& params, const std::string& prefix, Rng& rng) {
  for (auto& [name, p] : params.tensors()) {
    if (!name.starts_with(prefix)) continue;
    const auto rows = p.value.rows();
    const auto cols = p.value.cols();
    if (name.ends_with("/gamma")) {
      p.value = Matrix::Ones(rows, cols) + rng.normal_matrix(rows, cols, 0.1);
    } else if (name.ends_with("alpha")) {
      p.value = Matrix::Constant(1, 1, 0.35 + 0.3 * rng.uniform());
    } else if (name.ends_with("log_tau")) {
      p.value = Matrix::Constant(1, 1, -0.3 + 0.2 * rng.uniform());
    } else {
      const double fan = name.ends_with("/W") ? static_cast<double>(rows) : 4.0;
      p.value = rng.normal_matrix(rows, cols, 1.0 / std::sqrt(fan));
    }
  }
}

void add_param_targets(ParamStore& params, const std::string& prefix, std::vector<Target>& targets) {
  for (auto& [name, p] : params.tensors()) {
    if (!name.starts_with(prefix)) continue;
    p.trainable = true;
    targets.push_back({name, &p.value, &p.grad});
  }
}

Mask prefix_mask(int length, int valid) {
  Mask m(length, 0);
  for (int i = 0; i < valid; ++i) m[i] = 1;
  return m;
}

BinaryMask random_mask(int h, int w, Rng& rng) {
  BinaryMask m(h, w);
  for (auto& v : m.values) v = rng.uniform() < 0.3 ? 1 : 0;
  return m;
}

Image random_image(int h, int w, Rng& rng) {
  Image img{h, w, Matrix(static_cast<Eigen::Index>(h) * w, 3)};
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = rng.uniform();
  return img;
}

}  // namespace

ModelConfig tiny_config() {
  ModelConfig cfg;
  auto& b = cfg.backbones;
  b.max_tokens = 8;
  b.text_dim = 16;
  b.text_depth = 1;
  b.text_heads = 2;
  b.text_ffn = 32;
  b.downsample = 8;
  b.latent_channels = 8;
  b.pyramid_channels = {8, 8, 16, 16};
  b.attn_dim = 8;
  auto& a = cfg.adapter;
  a.depth = 1;
  a.heads = 2;
  a.ffn_dim = 32;
  a.proj_hidden = 16;
  a.rank = 4;
  auto& d = cfg.decoder;
  d.num_queries = 4;
  d.query_dim = 16;
  d.fused_channels = {16, 16, 16};
  d.mlp_hidden = 32;
  cfg.sync();
  return cfg;
}

double relative_error(const Matrix& analytic, const Matrix& numeric) {
  if (analytic.rows() != numeric.rows() || analytic.cols() != numeric.cols()) {
    throw ShapeError("relative_error: shapes differ");
  }
  if (analytic.size() == 0) return 0.0;
  const double scale =
      std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), kErrorFloor});
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

ComponentResult check_loss(const Options& opts) {
  Rng rng = Rng::derive(opts.seed, 1);
  const int h = 6;
  const int w = 5;
  Matrix logits = rng.normal_matrix(h * w, 1, 2.0);
  Matrix grad;
  const BinaryMask gt = random_mask(h, w, rng);
  const training::LossWeights weights{0.7, 1.3};
  std::vector<Target> targets{{"logits", &logits, &grad}};
  Objective f = [&](ad::Tape& tape) {
    return training::segmentation_loss(tape.parameter(logits, &grad), gt, weights);
  };
  return finite_difference("loss", targets, f, opts, opts.loss_tolerance, 0, rng);
}

ComponentResult check_cp_adapter(const Options& opts) {
  Rng rng = Rng::derive(opts.seed, 2);
  ModelConfig cfg = opts.model;
  cfg.sync();
  ParamStore params;
  cp_adapter::init_params(params, cfg.adapter);
  randomize(params, "cp_adapter/", rng);
  const int lm = cfg.backbones.max_tokens;
  const Mask mask = prefix_mask(lm, 5);
  Matrix text = rng.normal_matrix(lm, cfg.adapter.dim, 1.0);
  for (int r = 5; r < lm; ++r) text.row(r).setZero();
  Matrix text_grad;
  const Matrix weights = rng.normal_matrix(lm, cfg.adapter.dim, 1.0);
  std::vector<Target> targets{{"input/L", &text, &text_grad}};
  add_param_targets(params, "cp_adapter/", targets);
  Objective f = [&](ad::Tape& tape) {
    ad::Var l = tape.parameter(text, &text_grad);
    return ad::weighted_sum(cp_adapter::forward(tape, params, cfg.adapter, l, mask), weights);
  };
  return finite_difference("cp_adapter", targets, f, opts, opts.tolerance, 0, rng);
}

ComponentResult check_oaqil(const Options& opts) {
  Rng rng = Rng::derive(opts.seed, 3);
  ModelConfig cfg = opts.model;
  cfg.sync();
  ParamStore params;
  pcmrd::init_params(params, cfg.decoder);
  const std::string prefix = pcmrd::layer_prefix(1, 0);
  randomize(params, prefix, rng);
  const int m = cfg.decoder.num_queries;
  const int lm = cfg.backbones.max_tokens;
  const int pixels = 16;
  const Mask mask = prefix_mask(lm, 6);
  Matrix queries = rng.normal_matrix(m, cfg.decoder.query_dim, 1.0);
  Matrix text = rng.normal_matrix(lm, cfg.decoder.text_dim, 1.0);
  Matrix fused = rng.normal_matrix(pixels, cfg.decoder.fused_channels[0], 1.0);
  Matrix gq;
  Matrix gt;
  Matrix gf;
  const Matrix w_tokens = rng.normal_matrix(m, cfg.decoder.query_dim, 1.0);
  const Matrix w_mask = rng.normal_matrix(m, pixels, 1.0);

  // Record one noisy train-mode assignment, then replay it so the discrete
  // choice stays fixed under perturbation.
  std::vector<pcmrd::AssignmentBundle> recorded;
  {
    ad::Tape tape;
    Rng noise = Rng::derive(opts.seed, 33);
    pcmrd::RunOptions run{true, &noise, nullptr};
    recorded.push_back(pcmrd::oaqil_forward(tape, params, cfg.decoder, prefix, tape.constant_ref(queries),
                                            tape.constant_ref(text), mask, tape.constant_ref(fused), run, 0)
                           .bundle);
  }
  std::vector<Target> targets{{"input/Q", &queries, &gq}, {"input/L", &text, &gt}, {"input/V", &fused, &gf}};
  add_param_targets(params, prefix, targets);
  Objective f = [&](ad::Tape& tape) {
    pcmrd::RunOptions run{true, nullptr, &recorded};
    pcmrd::OaqilVars out =
        pcmrd::oaqil_forward(tape, params, cfg.decoder, prefix, tape.parameter(queries, &gq),
                             tape.parameter(text, &gt), mask, tape.parameter(fused, &gf), run, 0);
    return ad::add(ad::weighted_sum(out.tokens, w_tokens), ad::weighted_sum(out.assign.s_mask, w_mask));
  };
  return finite_difference("oaqil", targets, f, opts, opts.tolerance, 0, rng);
}

ComponentResult check_model(const Options& opts) {
  Rng rng = Rng::derive(opts.seed, 4);
  Model model(opts.model);
  ParamStore& params = model.params();
  randomize(params, "cp_adapter/", rng);
  randomize(params, "pcmrd/", rng);
  const int side = 4 * model.config().backbones.downsample;
  const Image image = random_image(side, side, rng);
  const int lm = model.config().backbones.max_tokens;
  std::vector<int> ids;
  for (int i = 0; i < std::max(1, lm - 1); ++i) {
    ids.push_back(static_cast<int>(rng.below(model.config().backbones.vocab_size)));
  }
  const auto tokens = backbones::TokenSequence::make(ids, lm);
  const BinaryMask gt = random_mask(side, side, rng);

  std::vector<pcmrd::AssignmentBundle> recorded;
  {
    ad::Tape tape;
    Rng noise = Rng::derive(opts.seed, 44);
    recorded = model.forward(tape, image, tokens, {true, &noise, nullptr}).decoder.bundles;
  }
  std::vector<Target> targets;
  add_param_targets(params, "cp_adapter/", targets);
  add_param_targets(params, "pcmrd/", targets);
  Objective f = [&](ad::Tape& tape) {
    Model::Pass pass = model.forward(tape, image, tokens, {true, nullptr, &recorded});
    return training::segmentation_loss(pass.logits, gt, {});
  };
  return finite_difference("model", targets, f, opts, opts.tolerance, opts.model_entries_per_tensor, rng);
}

ComponentResult check_straight_through(const Options& opts) {
  Rng rng = Rng::derive(opts.seed, 5);
  ComponentResult r;
  r.component = "straight_through";
  r.tolerance = opts.straight_through_tolerance;
  r.worst_tensor = "S_pixel";
  bool forward_ok = true;
  for (int n = 0; n < opts.straight_through_instances; ++n) {
    const auto m = static_cast<Eigen::Index>(2 + rng.below(7));
    const auto p = static_cast<Eigen::Index>(1 + rng.below(64));
    Matrix s_pixel(m, p);
    for (Eigen::Index i = 0; i < s_pixel.size(); ++i) s_pixel.data()[i] = 2.0 * rng.uniform() - 1.0;
    const double tau = std::exp(3.0 * rng.uniform() - 2.0);
    const Matrix noise = rng.gumbel_matrix(m, p);
    const Matrix weights = rng.normal_matrix(m, p, 1.0);

    std::array<Matrix, 2> grads;
    for (int route = 0; route < 2; ++route) {
      ad::Tape tape;
      ad::Var s = tape.variable(s_pixel);
      pcmrd::AssignVars a = pcmrd::gumbel_assign(tape, s, tape.constant(Matrix::Constant(1, 1, tau)), noise, true);
      if (route == 0) {
        const Matrix expected = a.s_onehot.transpose();
        forward_ok = forward_ok && a.s_mask.value() == expected;
      }
      tape.backward(ad::weighted_sum(route == 0 ? a.s_mask : a.s_gumbel, weights));
      grads[route] = s.grad();
    }
    r.max_error = std::max(r.max_error, (grads[0] - grads[1]).cwiseAbs().maxCoeff());
    r.entries += static_cast<std::size_t>(s_pixel.size());
  }
  if (!forward_ok) r.worst_tensor = "S_mask forward";
  r.pass = forward_ok && r.max_error <= opts.straight_through_tolerance;
  return r;
}

std::vector<ComponentResult> run_all(const Options& opts) {
  return {check_loss(opts), check_cp_adapter(opts), check_oaqil(opts), check_model(opts),
          check_straight_through(opts)};
}

std::string format_table(const std::vector<ComponentResult>& results) {
  std::ostringstream out;
  out << "component          max_error     tolerance     entries  status  worst\n";
  for (const auto& r : results) {
    char line[256];
    std::snprintf(line, sizeof(line), "%-18s %-13.3e %-13.1e %-8zu %-7s %s\n", r.component.c_str(), r.max_error,
                  r.tolerance, r.entries, r.pass ? "ok" : "FAIL", r.worst_tensor.c_str());
    out << line;
  }
  return out.str();
}

}  // namespace diffris::gradcheck
