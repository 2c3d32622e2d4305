#pragma once

// Context perception adapter: refines token features through a transformer
// encoder (global context), text-to-context attention with a residual
// (object-aware reasoning), a residual two-layer projection, a zero-initialized
// low-rank adjustment, and a learnable scalar gate back onto the input.
//
// With B = 0 and alpha = 0 at initialization the adapter returns its input
// bit for bit.

#include <cstdint>
#include <vector>

#include "diffris/autodiff.hpp"
#include "diffris/backbones.hpp"
#include "diffris/params.hpp"

namespace diffris::cp_adapter {

struct Config {
  int dim = 64;  // D_l, taken from the text encoder
  int depth = 2;
  int heads = 4;
  int ffn_dim = 128;
  int proj_hidden = 64;
  int rank = 8;
  double lora_init_std = 0.02;
  bool enable_context = true;
  bool enable_object_reasoning = true;
  bool enable_domain_adjust = true;
  std::uint64_t seed = 1;
};

void validate(const Config& cfg);

// Registers tensors under "cp_adapter/".
void init_params(ParamStore& params, const Config& cfg);

// Attention matrices captured during a forward pass, for inspection.
struct Trace {
  std::vector<Matrix> context_attention;  // depth * heads entries
  Matrix object_attention;
};

// ---- tape-level ------------------------------------------------------------

ad::Var global_context_encode(ad::Tape& tape, ParamStore& params, const Config& cfg, ad::Var text,
                              const Mask& mask, Trace* trace = nullptr);
// softmax((L W_q)(L W_k)^T / sqrt(D)) (H W_v) + L, padded keys excluded.
ad::Var object_aware_attend(ad::Tape& tape, ParamStore& params, const Config& cfg, ad::Var context,
                            ad::Var text, const Mask& mask, Trace* trace = nullptr);
// Projection(H') + H' with Projection = fc2(relu(fc1(.))).
ad::Var project_enhance(ad::Tape& tape, ParamStore& params, ad::Var attended);
// H_enh (A B).
ad::Var domain_adjust(ad::Tape& tape, ParamStore& params, const Config& cfg, ad::Var enhanced);
ad::Var gated_fuse(ad::Var adjusted, ad::Var text, ad::Var alpha);

ad::Var forward(ad::Tape& tape, ParamStore& params, const Config& cfg, ad::Var text, const Mask& mask,
                Trace* trace = nullptr);

// ---- value-level -----------------------------------------------------------

Matrix global_context_encode(ParamStore& params, const Config& cfg,
                             const backbones::LinguisticFeatures& text, Trace* trace = nullptr);
Matrix object_aware_attend(ParamStore& params, const Config& cfg, const Matrix& context,
                           const backbones::LinguisticFeatures& text, Trace* trace = nullptr);
Matrix project_enhance(ParamStore& params, const Matrix& attended);
Matrix domain_adjust(ParamStore& params, const Config& cfg, const Matrix& enhanced);
backbones::LinguisticFeatures gated_fuse(const Matrix& adjusted, const backbones::LinguisticFeatures& text,
                                         double alpha);
backbones::LinguisticFeatures forward(ParamStore& params, const Config& cfg,
                                      const backbones::LinguisticFeatures& text, Trace* trace = nullptr);

}  // namespace diffris::cp_adapter
