#pragma once

// Small building blocks shared by the encoders, the adapter and the decoder.
// Each block owns the parameters registered under a name prefix.

#include <string>

#include "diffris/autodiff.hpp"
#include "diffris/params.hpp"

namespace diffris::layers {

// Weights ~ N(0, 1/fan_in), bias zero.
void add_linear(ParamStore& params, const std::string& prefix, int in, int out, Rng& rng,
                bool bias = true, bool trainable = true);
ad::Var linear(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var x,
               bool bias = true);

void add_layer_norm(ParamStore& params, const std::string& prefix, int dim, bool trainable = true);
ad::Var layer_norm(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var x);

// Masked multi-head self-attention with an output projection.
void add_self_attention(ParamStore& params, const std::string& prefix, int dim, Rng& rng,
                        bool trainable = true);
// `weights`, when given, receives the per-head attention matrices.
ad::Var self_attention(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var x,
                       const Mask& key_mask, int heads, std::vector<Matrix>* weights = nullptr);

// Post-norm transformer encoder layer: x = LN(x + MHSA(x)); x = LN(x + FFN(x)).
void add_encoder_layer(ParamStore& params, const std::string& prefix, int dim, int ffn_dim,
                       Rng& rng, bool trainable = true);
ad::Var encoder_layer(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var x,
                      const Mask& key_mask, int heads, std::vector<Matrix>* weights = nullptr);

// 2-D convolution over a flattened (height*width) x channels map.
void add_conv(ParamStore& params, const std::string& prefix, int in, int out, int kernel, Rng& rng,
              bool bias = true, bool trainable = true);
ad::Var conv(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var x, int height,
             int width, int kernel, int stride, int pad, bool bias = true);

}  // namespace diffris::layers
