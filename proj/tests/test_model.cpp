#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mwt/gradcheck.h"
#include "mwt/model.h"
#include "support/gradcheck_cases.h"
#include "support/toy.h"

using namespace mwt;

TEST_CASE("parameter accounting reproduces the published breakdown") {
  MultiwayConfig cfg = testing::paper_giant_config();
  ParamBreakdown b = count_params(cfg);
  CHECK(b.v_ffn == 692'362'240);
  CHECK(b.l_ffn == 692'362'240);
  CHECK(b.vl_ffn == 51'927'168);
  CHECK(b.attention == 317'419'520);
  // Nearest-million rounding: 692M / 692M / 52M / 317M.
  CHECK(std::llround(b.v_ffn / 1e6) == 692);
  CHECK(std::llround(b.vl_ffn / 1e6) == 52);
  CHECK(std::llround(b.attention / 1e6) == 317);
  CHECK(std::abs(b.total - 1.9e9) / 1.9e9 < 0.05);
}

TEST_CASE("parameter accounting: hand-counted toy and K=0") {
  MultiwayConfig cfg;
  cfg.layers = 4;
  cfg.hidden = 8;
  cfg.ffn_inner = 16;
  cfg.heads = 2;
  cfg.vl_layers = 1;
  cfg.patch_rows = 2;
  cfg.patch_cols = 2;
  cfg.patch_px = 1;
  cfg.channels = 4;
  cfg.patch_dim = 4;
  cfg.text_vocab = 260;
  cfg.visual_vocab = 8;
  cfg.max_seq = 16;
  cfg.max_text_len = 8;
  ParamBreakdown b = count_params(cfg);
  CHECK(b.v_ffn == 1120);   // 4 * (2*8*16 + 16 + 8)
  CHECK(b.l_ffn == 1120);
  CHECK(b.attention == 1152);  // 4 * 4 * (64 + 8)
  cfg.vl_layers = 0;
  CHECK(count_params(cfg).vl_ffn == 0);
}

TEST_CASE("breakdown total matches allocated parameters exactly") {
  MultiwayConfig cfg = testing::tiny_config();
  auto model = MultiwayModel<float>::create(cfg);
  CHECK(model.param_count() == count_params(cfg).total);
}

TEST_CASE("init is deterministic and rescales output projections by 1/sqrt(2l)") {
  MultiwayConfig cfg = testing::tiny_config();
  cfg.layers = 8;
  auto a = init_model<float>(cfg, 99);
  auto b = init_model<float>(cfg, 99);
  for (size_t i = 0; i < a.blocks.size(); ++i)
    CHECK((a.blocks[i].wo.data == b.blocks[i].wo.data).all());
  auto c = init_model<float>(cfg, 100);
  CHECK_FALSE((a.blocks[0].wo.data == c.blocks[0].wo.data).all());

  // Replay the draw stream without rescaling; layer 8 factor 1/sqrt(16) is
  // exactly 0.25, so the comparison is bitwise.
  auto raw = MultiwayModel<float>::create(cfg);
  Rng rng(99);
  for (ParamRef<float>& p : raw.named_params()) {
    if (p.init == ParamInit::UniformSmall)
      for (Index i = 0; i < p.tensor->numel(); ++i)
        p.tensor->data(i) = static_cast<float>(rng.uniform(-0.02, 0.02));
  }
  const VecX<float>& scaled = a.blocks[7].wo.data;
  const VecX<float>& unscaled = raw.blocks[7].wo.data;
  for (Index i = 0; i < scaled.size(); ++i) CHECK(scaled(i) == unscaled(i) * 0.25f);
}

TEST_CASE("init: layer-l output projection std follows sqrt(1/l)") {
  MultiwayConfig cfg = testing::tiny_config();
  cfg.layers = 6;
  cfg.hidden = 128;
  cfg.ffn_inner = 256;
  cfg.heads = 8;
  cfg.max_seq = 256;
  auto model = init_model<float>(cfg, 2024);
  auto sample_std = [](const Tensor<float>& t) {
    double mu = t.data.cast<double>().mean();
    return std::sqrt((t.data.cast<double>() - mu).square().mean());
  };
  const double s1 = sample_std(model.blocks[0].wo);
  // base std of U(-0.02, 0.02) scaled by 1/sqrt(2).
  CHECK(s1 == doctest::Approx(0.02 / std::sqrt(3.0) / std::sqrt(2.0)).epsilon(0.03));
  for (int l = 2; l <= cfg.layers; ++l) {
    double ratio = sample_std(model.blocks[static_cast<size_t>(l - 1)].wo) / s1;
    CHECK(ratio == doctest::Approx(std::sqrt(1.0 / l)).epsilon(0.02));
  }
}

TEST_CASE("seq2seq attention mask matches the published shape") {
  AttentionMask m = build_attention_mask(Layout::Seq2Seq, 2, 2);
  const int expect[4][4] = {{1, 1, 0, 0}, {1, 1, 0, 0}, {1, 1, 1, 0}, {1, 1, 1, 1}};
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) CHECK(m.at(i, j) == (expect[i][j] == 1));

  AttentionMask img_only = build_attention_mask(Layout::Seq2Seq, 3, 0);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) CHECK(img_only.at(i, j));

  AttentionMask causal = build_attention_mask(Layout::Seq2Seq, 0, 4);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) CHECK(causal.at(i, j) == (j <= i));

  AttentionMask full = build_attention_mask(Layout::Fusion, 2, 2);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) CHECK(full.at(i, j));
  // Diagonal always allowed.
  for (Index i = 0; i < 4; ++i) CHECK(m.at(i, i));
}

TEST_CASE("routing follows modality below the top layers and VL at the top") {
  MultiwayConfig cfg = testing::tiny_config();
  cfg.layers = 4;
  cfg.vl_layers = 1;
  std::vector<ModalityTag> tags = {ModalityTag::Vision, ModalityTag::Vision,
                                   ModalityTag::Language, ModalityTag::Language};
  auto r1 = route(tags, 1, Layout::Fusion, cfg);
  CHECK(r1 == std::vector<Expert>{Expert::V, Expert::V, Expert::L, Expert::L});
  auto r4 = route(tags, 4, Layout::Fusion, cfg);
  CHECK(r4 == std::vector<Expert>{Expert::VL, Expert::VL, Expert::VL, Expert::VL});
  auto s4 = route(tags, 4, Layout::Seq2Seq, cfg);
  CHECK(s4 == std::vector<Expert>{Expert::VL, Expert::VL, Expert::VL, Expert::VL});

  std::vector<ModalityTag> lang(5, ModalityTag::Language);
  for (int l = 1; l <= 4; ++l) {
    auto r = route(lang, l, Layout::LanguageEncoder, cfg);
    for (Expert e : r) CHECK(e == Expert::L);
  }
  CHECK_THROWS_AS(route(tags, 5, Layout::Fusion, cfg), TensorError);
}

TEST_CASE("VL routing at a layer without a VL expert errors") {
  MultiwayConfig cfg = testing::tiny_config();
  auto model = init_model<float>(cfg, 5);
  Tensor<float> h{Shape{2, cfg.hidden}};
  AttentionMask mask(2, true);
  std::vector<Expert> bad(2, Expert::VL);
  CHECK_THROWS_AS(block_forward(model, 1, h, mask, bad, nullptr), TensorError);
}

TEST_CASE("routing parity: pure text through fusion equals language encoder below top-K") {
  MultiwayConfig cfg = testing::tiny_config();
  auto model = init_model<float>(cfg, 31);
  std::vector<Index> ids = {kClsId, 260, 261, 262, kSepId};
  std::vector<ModalityTag> tags(ids.size(), ModalityTag::Language);
  Tensor<float> h0 = embed_text(model, nullptr, ids);
  Tensor<float> bias = Tensor<float>::zeros({static_cast<Index>(ids.size()),
                                             static_cast<Index>(ids.size())});

  Tensor<float> via_fusion = h0.detached();
  Tensor<float> via_lang = h0.detached();
  for (int l = 1; l <= cfg.layers - cfg.vl_layers; ++l) {
    via_fusion = block_forward_biased(model, l, via_fusion,
                                      bias, route(tags, l, Layout::Fusion, cfg), nullptr);
    via_lang = block_forward_biased(model, l, via_lang,
                                    bias, route(tags, l, Layout::LanguageEncoder, cfg), nullptr);
    CHECK((via_fusion.data == via_lang.data).all());
  }
  // Above the boundary the fusion layout switches to VL experts and diverges.
  int top = cfg.layers;
  auto f_top = block_forward_biased(model, top, via_fusion, bias,
                                    route(tags, top, Layout::Fusion, cfg), nullptr);
  auto l_top = block_forward_biased(model, top, via_lang, bias,
                                    route(tags, top, Layout::LanguageEncoder, cfg), nullptr);
  CHECK_FALSE((f_top.data == l_top.data).all());
}

TEST_CASE("single-token block: one-hot attention") {
  MultiwayConfig cfg = testing::tiny_config();
  auto model = init_model<float>(cfg, 77);
  // A row with exactly one allowed column gets weight 1 there: with a single
  // token the context is the token's own value row, exactly.
  Tensor<float> h{Shape{1, cfg.hidden}};
  for (Index i = 0; i < h.numel(); ++i) h.data(i) = 0.1f * static_cast<float>(i % 7);
  AttentionMask mask(1, true);
  std::vector<Expert> routing = {Expert::L};
  auto out = block_forward(model, 1, h, mask, routing, nullptr);
  CHECK(out.shape == Shape{1, cfg.hidden});
  CHECK(out.all_finite());
}

TEST_CASE("masked attention rows are exactly one-hot when one column is allowed") {
  // softmax over [finite, -1e9-ish] underflows to exactly {1, 0}.
  Tensor<float> logits{Shape{1, 3}};
  logits.data(0) = 0.7f;
  logits.data(1) = static_cast<float>(kMaskedLogitBias);
  logits.data(2) = static_cast<float>(kMaskedLogitBias);
  auto w = softmax<float>(nullptr, logits, 1);
  CHECK(w.data(0) == 1.0f);
  CHECK(w.data(1) == 0.0f);
  CHECK(w.data(2) == 0.0f);
}

TEST_CASE("encode: empty text, fusion arithmetic, determinism, length guard") {
  MultiwayConfig cfg = testing::tiny_config();
  auto model = init_model<float>(cfg, 13);
  Rng rng(4);

  EncodeInput empty_text;
  empty_text.text_ids = std::vector<Index>{kClsId, kSepId};
  auto enc = encode(model, nullptr, empty_text, Layout::LanguageEncoder);
  CHECK(enc.pooled.all_finite());
  CHECK(enc.hidden.shape == Shape{2, cfg.hidden});

  EncodeInput fusion;
  fusion.image = testing::random_image_tokens(cfg, rng);
  fusion.text_ids = std::vector<Index>{kClsId, 263, 264, kSepId};
  auto fe = encode(model, nullptr, fusion, Layout::Fusion);
  CHECK(fe.hidden.shape[0] == 1 + cfg.grid_cells() + 4);
  CHECK(fe.n_image == 1 + cfg.grid_cells());

  auto fe2 = encode(model, nullptr, fusion, Layout::Fusion);
  CHECK((fe.pooled.data == fe2.pooled.data).all());
  CHECK((fe.hidden.data == fe2.hidden.data).all());

  EncodeInput too_long;
  std::vector<Index> long_ids(cfg.max_text_len + 1, 260);
  long_ids.front() = kClsId;
  long_ids.back() = kSepId;
  too_long.text_ids = long_ids;
  CHECK_THROWS_AS(encode(model, nullptr, too_long, Layout::LanguageEncoder), TensorError);
}

TEST_CASE("stochastic depth: eval identity, full-drop passthrough, seeded determinism") {
  MultiwayConfig cfg = testing::tiny_config();
  auto model = init_model<float>(cfg, 21);
  Rng data_rng(9);
  Tensor<float> h{Shape{3, cfg.hidden}};
  for (Index i = 0; i < h.numel(); ++i) h.data(i) = static_cast<float>(data_rng.normal() * 0.1);
  AttentionMask mask(3, true);
  std::vector<Expert> routing(3, Expert::L);

  ForwardOpts eval_with_rate;
  eval_with_rate.training = false;
  eval_with_rate.drop_path_rate = 0.5;
  auto out_eval = block_forward(model, 1, h, mask, routing, nullptr, eval_with_rate);
  auto out_plain = block_forward(model, 1, h, mask, routing, nullptr, {});
  CHECK((out_eval.data == out_plain.data).all());

  ForwardOpts drop_all;
  drop_all.training = true;
  drop_all.drop_path_rate = 0.999999;
  Rng r1(5);
  drop_all.rng = &r1;
  auto dropped = block_forward(model, cfg.layers, h, mask, routing, nullptr, drop_all);
  CHECK((dropped.data == h.data).all());

  ForwardOpts some;
  some.training = true;
  some.drop_path_rate = 0.5;
  Rng ra(6), rb(6);
  some.rng = &ra;
  auto o1 = block_forward(model, cfg.layers, h, mask, routing, nullptr, some);
  some.rng = &rb;
  auto o2 = block_forward(model, cfg.layers, h, mask, routing, nullptr, some);
  CHECK((o1.data == o2.data).all());
}

TEST_CASE("seq2seq perturbation: future caption edits cannot reach earlier positions") {
  MultiwayConfig cfg = testing::tiny_config();
  auto model = init_model<float>(cfg, 55);
  Rng rng(8);
  ImageTokens img = testing::random_image_tokens(cfg, rng);

  std::vector<Index> cap = {kClsId, 270, 271, 272, kSepId};
  std::vector<Index> cap_edit = cap;
  cap_edit[3] = 299;  // position after the probe index

  EncodeInput a, b;
  a.image = img;
  a.text_ids = cap;
  b.image = img;
  b.text_ids = cap_edit;
  auto ea = encode(model, nullptr, a, Layout::Seq2Seq);
  auto eb = encode(model, nullptr, b, Layout::Seq2Seq);

  const Index n_img = ea.n_image;
  // Image rows and caption rows strictly before the edited position agree
  // bit-exactly; the edited position itself diverges.
  for (Index r = 0; r < n_img + 3; ++r) {
    for (Index c = 0; c < cfg.hidden; ++c) CHECK(ea.hidden.at(r, c) == eb.hidden.at(r, c));
  }
  bool differs = false;
  for (Index c = 0; c < cfg.hidden; ++c)
    differs = differs || (ea.hidden.at(n_img + 3, c) != eb.hidden.at(n_img + 3, c));
  CHECK(differs);
}

TEST_CASE("full block gradients pass the finite-difference oracle") {
  // Micro geometry keeps central differences over every parameter cheap.
  MultiwayConfig cfg;
  cfg.layers = 1;
  cfg.hidden = 8;
  cfg.ffn_inner = 16;
  cfg.heads = 2;
  cfg.vl_layers = 1;
  cfg.patch_rows = 2;
  cfg.patch_cols = 2;
  cfg.patch_px = 1;
  cfg.channels = 6;
  cfg.patch_dim = 6;
  cfg.text_vocab = 261;
  cfg.visual_vocab = 8;
  cfg.max_seq = 16;
  cfg.max_text_len = 8;

  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    double err = testing::block_grad_check(cfg, seed);
    INFO("seed " << seed);
    CHECK(err < 1e-4);
  }
}
