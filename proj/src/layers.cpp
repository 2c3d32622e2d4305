#include "diffris/layers.hpp"

#include <cmath>

#include "diffris/errors.hpp"

namespace diffris::layers {

void add_linear(ParamStore& params, const std::string& prefix, int in, int out, Rng& rng,
                bool bias, bool trainable) {
  params.add(prefix + "/W", rng.normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in))),
             trainable);
  if (bias) params.add(prefix + "/b", Matrix::Zero(1, out), trainable);
}

ad::Var linear(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var x, bool bias) {
  ad::Var y = ad::matmul(x, params.bind(tape, prefix + "/W"));
  if (bias) y = ad::add_bias(y, params.bind(tape, prefix + "/b"));
  return y;
}

void add_layer_norm(ParamStore& params, const std::string& prefix, int dim, bool trainable) {
  params.add(prefix + "/gamma", Matrix::Ones(1, dim), trainable);
  params.add(prefix + "/beta", Matrix::Zero(1, dim), trainable);
}

ad::Var layer_norm(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var x) {
  return ad::layer_norm_rows(x, params.bind(tape, prefix + "/gamma"),
                             params.bind(tape, prefix + "/beta"));
}

void add_self_attention(ParamStore& params, const std::string& prefix, int dim, Rng& rng,
                        bool trainable) {
  add_linear(params, prefix + "/q", dim, dim, rng, false, trainable);
  add_linear(params, prefix + "/k", dim, dim, rng, false, trainable);
  add_linear(params, prefix + "/v", dim, dim, rng, false, trainable);
  add_linear(params, prefix + "/o", dim, dim, rng, true, trainable);
}

ad::Var self_attention(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var x,
                       const Mask& key_mask, int heads, std::vector<Matrix>* weights) {
  const auto dim = x.cols();
  if (heads < 1 || dim % heads != 0) {
    throw ParameterError("self_attention: " + std::to_string(dim) + " channels not divisible into " +
                         std::to_string(heads) + " heads");
  }
  const auto head_dim = dim / heads;
  ad::Var q = linear(tape, params, prefix + "/q", x, false);
  ad::Var k = linear(tape, params, prefix + "/k", x, false);
  ad::Var v = linear(tape, params, prefix + "/v", x, false);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<ad::Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    ad::Var qh = ad::slice_cols(q, h * head_dim, head_dim);
    ad::Var kh = ad::slice_cols(k, h * head_dim, head_dim);
    ad::Var vh = ad::slice_cols(v, h * head_dim, head_dim);
    ad::Var attn = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt), &key_mask);
    if (weights) weights->push_back(attn.value());
    outs.push_back(ad::matmul(attn, vh));
  }
  return linear(tape, params, prefix + "/o", ad::concat_cols(outs));
}

void add_encoder_layer(ParamStore& params, const std::string& prefix, int dim, int ffn_dim,
                       Rng& rng, bool trainable) {
  add_self_attention(params, prefix + "/attn", dim, rng, trainable);
  add_layer_norm(params, prefix + "/ln1", dim, trainable);
  add_linear(params, prefix + "/ffn1", dim, ffn_dim, rng, true, trainable);
  add_linear(params, prefix + "/ffn2", ffn_dim, dim, rng, true, trainable);
  add_layer_norm(params, prefix + "/ln2", dim, trainable);
}

ad::Var encoder_layer(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var x,
                      const Mask& key_mask, int heads, std::vector<Matrix>* weights) {
  ad::Var a = self_attention(tape, params, prefix + "/attn", x, key_mask, heads, weights);
  x = layer_norm(tape, params, prefix + "/ln1", ad::add(x, a));
  ad::Var f = ad::relu(linear(tape, params, prefix + "/ffn1", x));
  f = linear(tape, params, prefix + "/ffn2", f);
  return layer_norm(tape, params, prefix + "/ln2", ad::add(x, f));
}

void add_conv(ParamStore& params, const std::string& prefix, int in, int out, int kernel, Rng& rng,
              bool bias, bool trainable) {
  add_linear(params, prefix, kernel * kernel * in, out, rng, bias, trainable);
}

ad::Var conv(ad::Tape& tape, ParamStore& params, const std::string& prefix, ad::Var x, int height,
             int width, int kernel, int stride, int pad, bool bias) {
  ad::Var cols = kernel == 1 && stride == 1 && pad == 0 ? x
                                                        : ad::im2col(x, height, width, kernel, stride, pad);
  return linear(tape, params, prefix, cols, bias);
}

}  // namespace diffris::layers
