#pragma once

#include <memory>

#include "mwt/gradcheck.h"
#include "mwt/model.h"

namespace mwt::testing {

/// Small-but-real geometry for unit tests.
inline MultiwayConfig tiny_config() {
  MultiwayConfig cfg;
  cfg.layers = 3;
  cfg.hidden = 32;
  cfg.ffn_inner = 64;
  cfg.heads = 4;
  cfg.vl_layers = 1;
  cfg.patch_rows = 2;
  cfg.patch_cols = 2;
  cfg.patch_px = 2;
  cfg.channels = 3;
  cfg.patch_dim = 12;
  cfg.text_vocab = 320;
  cfg.visual_vocab = 64;
  cfg.max_seq = 48;
  cfg.max_text_len = 16;
  cfg.drop_path_rate = 0.1;
  return cfg;
}

/// Published configuration; used for symbolic accounting only.
inline MultiwayConfig paper_giant_config() {
  MultiwayConfig cfg;
  cfg.layers = 40;
  cfg.hidden = 1408;
  cfg.ffn_inner = 6144;
  cfg.heads = 16;
  cfg.vl_layers = 3;
  cfg.patch_rows = 16;
  cfg.patch_cols = 16;
  cfg.patch_px = 14;
  cfg.channels = 3;
  cfg.patch_dim = 588;
  cfg.text_vocab = 64000;
  cfg.visual_vocab = 8192;
  cfg.max_seq = 1024;
  cfg.max_text_len = 512;
  cfg.drop_path_rate = 0.1;
  return cfg;
}

inline ImageTokens random_image_tokens(const MultiwayConfig& cfg, Rng& rng) {
  ImageTokens img;
  img.n_patches = cfg.grid_cells();
  img.dim = cfg.patch_dim;
  img.values.resize(static_cast<size_t>(img.n_patches * img.dim));
  for (float& v : img.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return img;
}

/// Central-difference check of one full multiway block (all parameters plus
/// the hidden input), run twice: once with per-modality routing and once with
/// everything on the VL expert. Returns the max relative error.
inline double block_grad_check(MultiwayConfig cfg, std::uint64_t seed) {
  cfg.layers = 1;
  cfg.validate();
  const Index seq = 5;

  Rng rng(mix_seed(0xb10c, seed));
  std::vector<ModalityTag> tags = {ModalityTag::Vision, ModalityTag::Vision,
                                   ModalityTag::Language, ModalityTag::Language,
                                   ModalityTag::Language};

  // Partially masked attention exercises the additive bias path.
  AttentionMask mask(seq, true);
  mask.set(3, 4, false);
  mask.set(0, 2, false);

  double worst = 0.0;
  for (int vl_pass = 0; vl_pass < 2; ++vl_pass) {
    MultiwayConfig c = cfg;
    c.vl_layers = vl_pass;  // 0: V|L runs; 1: single-layer model is top, all VL
    auto tmpl = std::make_shared<MultiwayModel<double>>(MultiwayModel<double>::create(c));
    // O(1)-scale weights keep gradient magnitudes well above the
    // finite-difference noise floor; the rules being checked are the same.
    for (ParamRef<double>& p : tmpl->named_params()) {
      for (Index i = 0; i < p.tensor->numel(); ++i) {
        switch (p.init) {
          case ParamInit::UniformSmall: p.tensor->data(i) = rng.uniform(-0.4, 0.4); break;
          case ParamInit::Zero: p.tensor->data(i) = rng.uniform(-0.2, 0.2); break;
          case ParamInit::One: p.tensor->data(i) = rng.uniform(0.7, 1.3); break;
        }
      }
    }

    std::vector<std::string> block_names;
    std::vector<Tensor<double>> inputs;
    Tensor<double> hidden{Shape{seq, c.hidden}};
    for (Index i = 0; i < hidden.numel(); ++i) hidden.data(i) = rng.normal();
    inputs.push_back(hidden);
    for (const ParamRef<double>& p : tmpl->named_params()) {
      if (p.name.rfind("block1.", 0) == 0) {
        block_names.push_back(p.name);
        inputs.push_back(p.tensor->detached());
      }
    }

    std::vector<Expert> routing = route(tags, 1, Layout::Fusion, c);
    Tensor<double> bias = detail::mask_to_bias<double>(mask);

    auto fn = [tmpl, block_names, routing, bias](Tape<double>* tape,
                                                 std::vector<Tensor<double>>& in) {
      size_t slot = 1;
      for (ParamRef<double>& p : tmpl->named_params()) {
        if (p.name.rfind("block1.", 0) == 0) *p.tensor = in[slot++];
      }
      return block_forward_biased(*tmpl, 1, in[0], bias, routing, tape);
    };

    // The key bias shifts every logit in a softmax row by the same amount,
    // so its true gradient is exactly zero; finite differences only see
    // rounding noise there. Check it analytically, perturb everything else.
    std::vector<size_t> slots;
    for (size_t i = 0; i < inputs.size(); ++i) {
      if (i >= 1 && block_names[i - 1].find(".attn.bk") != std::string::npos) continue;
      slots.push_back(i);
    }
    worst = std::max(worst, grad_check_fn(fn, inputs, slots, 1e-5, mix_seed(11, seed)));

    {
      Tape<double> tape;
      std::vector<Tensor<double>> tracked = inputs;
      size_t bk_slot = 0;
      for (size_t i = 1; i < inputs.size(); ++i)
        if (block_names[i - 1].find(".attn.bk") != std::string::npos) bk_slot = i;
      tracked[bk_slot].requires_grad = true;
      tape.watch(tracked[bk_slot]);
      Tensor<double> y = fn(&tape, tracked);
      GradMap<double> grads = tape.backward(mean(&tape, y));
      double bk_grad = grads.at(tracked[bk_slot]).data.abs().maxCoeff();
      worst = std::max(worst, bk_grad > 1e-12 ? 1.0 : 0.0);
    }
  }
  return worst;
}

}  // namespace mwt::testing
