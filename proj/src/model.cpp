#include "diffris/model.hpp"

#include "diffris/errors.hpp"

namespace diffris {

void ModelConfig::sync() {
  adapter.dim = backbones.text_dim;
  decoder.text_dim = backbones.text_dim;
  decoder.pyramid_channels = backbones.pyramid_channels;
}

void ModelConfig::validate() const {
  backbones::validate(backbones);
  cp_adapter::validate(adapter);
  pcmrd::validate(decoder);
  if (adapter.dim != backbones.text_dim || decoder.text_dim != backbones.text_dim ||
      decoder.pyramid_channels != backbones.pyramid_channels) {
    throw ParameterError("model: module widths disagree; call sync()");
  }
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.sync();
  cfg_.validate();
  backbones::init_params(params_, cfg_.backbones);
  cp_adapter::init_params(params_, cfg_.adapter);
  pcmrd::init_params(params_, cfg_.decoder);
}

Model::Pass Model::forward(ad::Tape& tape, const Image& image, const backbones::TokenSequence& tokens,
                           const pcmrd::RunOptions& run) {
  Pass pass;
  pass.text = backbones::encode_text(tape, params_, cfg_.backbones, tokens);
  pass.refined = cp_adapter::forward(tape, params_, cfg_.adapter, pass.text, tokens.pad_mask);
  ad::Var z = backbones::encode_image_latent(tape, params_, cfg_.backbones, image);
  const int f = cfg_.backbones.downsample;
  backbones::PyramidVars pyramid = backbones::extract_multiscale(
      tape, params_, cfg_.backbones, z, image.height / f, image.width / f, pass.refined, tokens.pad_mask);
  ad::Var decoder_text = cfg_.decoder.use_refined_text ? pass.refined : pass.text;
  pass.decoder = pcmrd::forward(tape, params_, cfg_.decoder, pyramid, decoder_text, tokens.pad_mask, run);
  pass.logits = pass.decoder.mask_logits;
  if (pass.decoder.output.height != image.height || pass.decoder.output.width != image.width) {
    throw ShapeError("model: decoder output does not match the input resolution");
  }
  return pass;
}

Matrix Model::predict_logits(const Image& image, const backbones::TokenSequence& tokens) {
  ad::Tape tape;
  return forward(tape, image, tokens, pcmrd::RunOptions{}).logits.value();
}

BinaryMask Model::predict(const Image& image, const backbones::TokenSequence& tokens, double threshold) {
  return binarize(predict_logits(image, tokens), image.height, image.width, threshold);
}

}  // namespace diffris
