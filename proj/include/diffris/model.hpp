#pragma once

// Full forward path: text encoder -> CP-adapter -> text-conditioned pyramid
// extractor -> progressive decoder -> mask logits.

#include "diffris/autodiff.hpp"
#include "diffris/backbones.hpp"
#include "diffris/cp_adapter.hpp"
#include "diffris/params.hpp"
#include "diffris/pcmrd.hpp"
#include "diffris/types.hpp"

namespace diffris {

struct ModelConfig {
  backbones::Config backbones;
  cp_adapter::Config adapter;
  pcmrd::Config decoder;

  // Copies widths shared between modules (text width, pyramid channels)
  // from the backbone section into the others.
  void sync();
  void validate() const;
};

class Model {
 public:
  explicit Model(ModelConfig cfg);

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] ParamStore& params() { return params_; }
  [[nodiscard]] const ParamStore& params() const { return params_; }

  struct Pass {
    ad::Var logits;  // (H*W) x 1
    ad::Var text;
    ad::Var refined;
    pcmrd::ForwardVars decoder;
  };
  Pass forward(ad::Tape& tape, const Image& image, const backbones::TokenSequence& tokens,
               const pcmrd::RunOptions& run);

  // Eval-mode logits (no Gumbel noise, hard assignment).
  Matrix predict_logits(const Image& image, const backbones::TokenSequence& tokens);
  BinaryMask predict(const Image& image, const backbones::TokenSequence& tokens, double threshold = 0.0);

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace diffris
