#pragma once

#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "mwt/ops.h"
#include "mwt/rng.h"
#include "mwt/text.h"

namespace mwt {

enum class ModalityTag : std::uint8_t { Vision, Language };
enum class Layout { VisionEncoder, LanguageEncoder, Fusion, Dual, Seq2Seq };
enum class Expert : std::uint8_t { V, L, VL };

inline const char* layout_name(Layout l) {
  switch (l) {
    case Layout::VisionEncoder: return "vision-encoder";
    case Layout::LanguageEncoder: return "language-encoder";
    case Layout::Fusion: return "fusion";
    case Layout::Dual: return "dual";
    case Layout::Seq2Seq: return "seq2seq";
  }
  return "?";
}

/// Backbone geometry. The published configuration is L=40, H=1408, M=6144,
/// A=16, K=3 with a 16x16 patch grid at 224x224 / patch 14.
struct MultiwayConfig {
  int layers = 4;         // L
  int hidden = 64;        // H
  int ffn_inner = 128;    // M
  int heads = 4;          // A
  int vl_layers = 1;      // K: top layers carrying a VL expert
  int patch_rows = 6;
  int patch_cols = 6;
  int patch_px = 4;       // square patch edge in pixels
  int channels = 3;
  int patch_dim = 48;     // flattened pixels per patch = patch_px^2 * channels
  int text_vocab = 384;
  int visual_vocab = 512;
  int max_seq = 128;
  int max_text_len = 64;  // text positions incl. CLS/SEP
  double drop_path_rate = 0.1;

  int grid_cells() const { return patch_rows * patch_cols; }
  void validate() const;
};

/// Boolean attention mask; allowed(i, j) == true lets position i attend to j.
struct AttentionMask {
  Index n = 0;
  std::vector<std::uint8_t> allowed;

  AttentionMask() = default;
  explicit AttentionMask(Index size, bool value = true)
      : n(size), allowed(static_cast<size_t>(size * size), value ? 1 : 0) {}

  bool at(Index i, Index j) const { return allowed[static_cast<size_t>(i * n + j)] != 0; }
  void set(Index i, Index j, bool v) { allowed[static_cast<size_t>(i * n + j)] = v ? 1 : 0; }
};

/// Additive logit bias for disallowed positions. Finite by contract; exp()
/// of (this - row max) underflows to exactly 0, so masked positions carry
/// bit-exact zero attention.
inline constexpr double kMaskedLogitBias = -1e9;

/// Seq2seq layout: image span bidirectional, caption position i sees the
/// whole image span plus caption positions <= i. Other layouts: all-true.
AttentionMask build_attention_mask(Layout layout, Index n_image, Index n_caption);

/// Per-token expert selection. Fusion/seq2seq layouts route every token to
/// the VL expert in the top K layers; everywhere else tokens follow their
/// modality.
std::vector<Expert> route(const std::vector<ModalityTag>& tags, int layer_index, Layout layout,
                          const MultiwayConfig& cfg);

struct ParamBreakdown {
  std::int64_t v_ffn = 0;
  std::int64_t l_ffn = 0;
  std::int64_t vl_ffn = 0;
  std::int64_t attention = 0;
  std::int64_t other = 0;
  std::int64_t total = 0;
};

/// Symbolic parameter accounting. A linear map a x b with bias contributes
/// a*b + b; expert layer norms, embeddings, pooler and positional tables are
/// counted under `other`.
ParamBreakdown count_params(const MultiwayConfig& cfg);

enum class ParamInit : std::uint8_t { UniformSmall, Zero, One };

template <typename S>
struct ParamRef {
  std::string name;
  Tensor<S>* tensor;
  int layer;  // 0 = embedding level, 1..L = blocks, L = heads/pooler
  ParamInit init;
};

template <typename S>
struct ExpertFfn {
  Tensor<S> ln1_g, ln1_b;  // pre-attention norm (per expert)
  Tensor<S> ln2_g, ln2_b;  // pre-FFN norm
  Tensor<S> w1, b1;        // (H, M), (M)
  Tensor<S> w2, b2;        // (M, H), (H)
};

template <typename S>
struct Block {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  ExpertFfn<S> v_ffn, l_ffn;
  std::optional<ExpertFfn<S>> vl_ffn;  // top K layers only
};

/// Runtime toggles for a forward pass. Stochastic depth draws one decision
/// per residual branch; eval mode keeps every branch with no rescale.
struct ForwardOpts {
  bool training = false;
  double drop_path_rate = 0.0;  // max rate; per-layer ramp rate*l/L
  Rng* rng = nullptr;
};

/// Patch sequence extracted from one image, plus mask-plan positions (grid
/// cell indices) whose embeddings are replaced by the learned mask token.
struct ImageTokens {
  Index n_patches = 0;
  Index dim = 0;
  std::vector<float> values;         // row-major (n_patches, dim)
  std::vector<Index> masked_cells;
};

template <typename S>
struct Encoded {
  Tensor<S> hidden;  // (seq, H), post final norm
  Tensor<S> pooled;  // (1, H)
  std::vector<ModalityTag> tags;
  Index n_image = 0;  // leading positions occupied by the image (incl. CLS)
};

template <typename S>
struct MultiwayModel {
  MultiwayConfig cfg;

  Tensor<S> text_emb;                 // (V_t, H)
  Tensor<S> vis_emb;                  // (V_v, H); tied MIM head matrix
  Tensor<S> patch_proj_w, patch_proj_b;
  Tensor<S> img_cls, img_mask_emb;    // (1, H) each
  Tensor<S> pos_text, pos_img;        // learned absolute positions
  std::vector<Block<S>> blocks;
  Tensor<S> final_ln_g, final_ln_b;
  Tensor<S> pooler_w, pooler_b;
  Tensor<S> mlm_bias, mim_bias;       // head biases (weights tied to tables)

  static MultiwayModel create(const MultiwayConfig& cfg);
  std::vector<ParamRef<S>> named_params();
  void watch_params(Tape<S>& tape);
  std::int64_t param_count();
};

template <typename S>
MultiwayModel<S> init_model(const MultiwayConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Implementation
// ---------------------------------------------------------------------------

template <typename S>
MultiwayModel<S> MultiwayModel<S>::create(const MultiwayConfig& cfg) {
  cfg.validate();
  const Index h = cfg.hidden, m = cfg.ffn_inner;
  MultiwayModel<S> md;
  md.cfg = cfg;
  md.text_emb = Tensor<S>{Shape{cfg.text_vocab, h}};
  md.vis_emb = Tensor<S>{Shape{cfg.visual_vocab, h}};
  md.patch_proj_w = Tensor<S>{Shape{cfg.patch_dim, h}};
  md.patch_proj_b = Tensor<S>{Shape{h}};
  md.img_cls = Tensor<S>{Shape{1, h}};
  md.img_mask_emb = Tensor<S>{Shape{1, h}};
  md.pos_text = Tensor<S>{Shape{cfg.max_text_len, h}};
  md.pos_img = Tensor<S>{Shape{1 + cfg.grid_cells(), h}};

  auto make_ffn = [&] {
    ExpertFfn<S> f;
    f.ln1_g = Tensor<S>{Shape{h}};
    f.ln1_b = Tensor<S>{Shape{h}};
    f.ln2_g = Tensor<S>{Shape{h}};
    f.ln2_b = Tensor<S>{Shape{h}};
    f.w1 = Tensor<S>{Shape{h, m}};
    f.b1 = Tensor<S>{Shape{m}};
    f.w2 = Tensor<S>{Shape{m, h}};
    f.b2 = Tensor<S>{Shape{h}};
    return f;
  };
  md.blocks.resize(static_cast<size_t>(cfg.layers));
  for (int l = 1; l <= cfg.layers; ++l) {
    Block<S>& b = md.blocks[static_cast<size_t>(l - 1)];
    b.wq = Tensor<S>{Shape{h, h}};
    b.bq = Tensor<S>{Shape{h}};
    b.wk = Tensor<S>{Shape{h, h}};
    b.bk = Tensor<S>{Shape{h}};
    b.wv = Tensor<S>{Shape{h, h}};
    b.bv = Tensor<S>{Shape{h}};
    b.wo = Tensor<S>{Shape{h, h}};
    b.bo = Tensor<S>{Shape{h}};
    b.v_ffn = make_ffn();
    b.l_ffn = make_ffn();
    if (l > cfg.layers - cfg.vl_layers) b.vl_ffn = make_ffn();
  }
  md.final_ln_g = Tensor<S>{Shape{h}};
  md.final_ln_b = Tensor<S>{Shape{h}};
  md.pooler_w = Tensor<S>{Shape{h, h}};
  md.pooler_b = Tensor<S>{Shape{h}};
  md.mlm_bias = Tensor<S>{Shape{cfg.text_vocab}};
  md.mim_bias = Tensor<S>{Shape{cfg.visual_vocab}};

  for (ParamRef<S>& p : md.named_params()) p.tensor->requires_grad = true;
  return md;
}

template <typename S>
std::vector<ParamRef<S>> MultiwayModel<S>::named_params() {
  std::vector<ParamRef<S>> out;
  auto add = [&](const std::string& name, Tensor<S>& t, int layer, ParamInit init) {
    out.push_back({name, &t, layer, init});
  };
  add("text_emb", text_emb, 0, ParamInit::UniformSmall);
  add("vis_emb", vis_emb, 0, ParamInit::UniformSmall);
  add("patch_proj.w", patch_proj_w, 0, ParamInit::UniformSmall);
  add("patch_proj.b", patch_proj_b, 0, ParamInit::Zero);
  add("img_cls", img_cls, 0, ParamInit::UniformSmall);
  add("img_mask_emb", img_mask_emb, 0, ParamInit::UniformSmall);
  add("pos_text", pos_text, 0, ParamInit::UniformSmall);
  add("pos_img", pos_img, 0, ParamInit::UniformSmall);

  auto add_ffn = [&](const std::string& prefix, ExpertFfn<S>& f, int layer) {
    add(prefix + ".ln1.g", f.ln1_g, layer, ParamInit::One);
    add(prefix + ".ln1.b", f.ln1_b, layer, ParamInit::Zero);
    add(prefix + ".ln2.g", f.ln2_g, layer, ParamInit::One);
    add(prefix + ".ln2.b", f.ln2_b, layer, ParamInit::Zero);
    add(prefix + ".w1", f.w1, layer, ParamInit::UniformSmall);
    add(prefix + ".b1", f.b1, layer, ParamInit::Zero);
    add(prefix + ".w2", f.w2, layer, ParamInit::UniformSmall);
    add(prefix + ".b2", f.b2, layer, ParamInit::Zero);
  };
  for (int l = 1; l <= cfg.layers; ++l) {
    Block<S>& b = blocks[static_cast<size_t>(l - 1)];
    std::string p = "block" + std::to_string(l);
    add(p + ".attn.wq", b.wq, l, ParamInit::UniformSmall);
    add(p + ".attn.bq", b.bq, l, ParamInit::Zero);
    add(p + ".attn.wk", b.wk, l, ParamInit::UniformSmall);
    add(p + ".attn.bk", b.bk, l, ParamInit::Zero);
    add(p + ".attn.wv", b.wv, l, ParamInit::UniformSmall);
    add(p + ".attn.bv", b.bv, l, ParamInit::Zero);
    add(p + ".attn.wo", b.wo, l, ParamInit::UniformSmall);
    add(p + ".attn.bo", b.bo, l, ParamInit::Zero);
    add_ffn(p + ".v", b.v_ffn, l);
    add_ffn(p + ".l", b.l_ffn, l);
    if (b.vl_ffn) add_ffn(p + ".vl", *b.vl_ffn, l);
  }
  add("final_ln.g", final_ln_g, cfg.layers, ParamInit::One);
  add("final_ln.b", final_ln_b, cfg.layers, ParamInit::Zero);
  add("pooler.w", pooler_w, cfg.layers, ParamInit::UniformSmall);
  add("pooler.b", pooler_b, cfg.layers, ParamInit::Zero);
  add("mlm_bias", mlm_bias, cfg.layers, ParamInit::Zero);
  add("mim_bias", mim_bias, cfg.layers, ParamInit::Zero);
  return out;
}

template <typename S>
void MultiwayModel<S>::watch_params(Tape<S>& tape) {
  for (ParamRef<S>& p : named_params()) tape.watch(*p.tensor);
}

template <typename S>
std::int64_t MultiwayModel<S>::param_count() {
  std::int64_t n = 0;
  for (const ParamRef<S>& p : named_params()) n += p.tensor->numel();
  return n;
}

/// Uniform [-0.02, 0.02] weights, zero biases, unit norm gains; then the
/// output projections (attention wo and every expert w2) of layer l are
/// rescaled by 1/sqrt(2l).
template <typename S>
MultiwayModel<S> init_model(const MultiwayConfig& cfg, std::uint64_t seed) {
  MultiwayModel<S> md = MultiwayModel<S>::create(cfg);
  Rng rng(seed);
  for (ParamRef<S>& p : md.named_params()) {
    switch (p.init) {
      case ParamInit::UniformSmall:
        for (Index i = 0; i < p.tensor->numel(); ++i)
          p.tensor->data(i) = static_cast<S>(rng.uniform(-0.02, 0.02));
        break;
      case ParamInit::Zero:
        p.tensor->data.setZero();
        break;
      case ParamInit::One:
        p.tensor->data.setOnes();
        break;
    }
  }
  for (int l = 1; l <= cfg.layers; ++l) {
    Block<S>& b = md.blocks[static_cast<size_t>(l - 1)];
    const S f = static_cast<S>(1.0 / std::sqrt(2.0 * l));
    b.wo.data *= f;
    b.v_ffn.w2.data *= f;
    b.l_ffn.w2.data *= f;
    if (b.vl_ffn) b.vl_ffn->w2.data *= f;
  }
  return md;
}

namespace detail {

struct RoutingRun {
  Index start;
  Index len;
  Expert expert;
};

inline std::vector<RoutingRun> routing_runs(const std::vector<Expert>& routing) {
  std::vector<RoutingRun> runs;
  Index n = static_cast<Index>(routing.size());
  Index start = 0;
  for (Index i = 1; i <= n; ++i) {
    if (i == n || routing[static_cast<size_t>(i)] != routing[static_cast<size_t>(start)]) {
      runs.push_back({start, i - start, routing[static_cast<size_t>(start)]});
      start = i;
    }
  }
  return runs;
}

template <typename S>
Tensor<S> mask_to_bias(const AttentionMask& mask) {
  Tensor<S> bias{Shape{mask.n, mask.n}};
  for (Index i = 0; i < mask.n; ++i)
    for (Index j = 0; j < mask.n; ++j)
      bias.at(i, j) = mask.at(i, j) ? S(0) : static_cast<S>(kMaskedLogitBias);
  return bias;
}

}  // namespace detail

/// One pre-norm transformer block with shared attention and routed expert
/// FFNs. `mask_bias` is the additive (seq, seq) logit bias.
template <typename S>
Tensor<S> block_forward_biased(const MultiwayModel<S>& md, int layer_index, const Tensor<S>& hidden,
                               const Tensor<S>& mask_bias, const std::vector<Expert>& routing,
                               Tape<std::type_identity_t<S>>* tape, const ForwardOpts& opts = {}) {
  const MultiwayConfig& cfg = md.cfg;
  tcheck(layer_index >= 1 && layer_index <= cfg.layers, "block_forward: layer out of range");
  const Block<S>& blk = md.blocks[static_cast<size_t>(layer_index - 1)];
  const Index seq = hidden.rows();
  tcheck(hidden.rank() == 2 && hidden.shape[1] == cfg.hidden,
         "block_forward: hidden must be (seq," + std::to_string(cfg.hidden) + "), got " +
             shape_str(hidden.shape));
  tcheck(mask_bias.shape == Shape{seq, seq}, "block_forward: mask shape " +
                                                 shape_str(mask_bias.shape) +
                                                 " does not match sequence length " +
                                                 std::to_string(seq));
  tcheck(static_cast<Index>(routing.size()) == seq, "block_forward: routing length mismatch");

  auto ffn_of = [&](Expert e) -> const ExpertFfn<S>& {
    switch (e) {
      case Expert::V: return blk.v_ffn;
      case Expert::L: return blk.l_ffn;
      case Expert::VL:
        tcheck(blk.vl_ffn.has_value(), "block_forward: no VL expert at layer " +
                                           std::to_string(layer_index));
        return *blk.vl_ffn;
    }
    throw TensorError("block_forward: bad expert");
  };

  const std::vector<detail::RoutingRun> runs = detail::routing_runs(routing);

  auto routed_norm = [&](const Tensor<S>& x, bool pre_attn) {
    std::vector<Tensor<S>> pieces;
    pieces.reserve(runs.size());
    for (const auto& run : runs) {
      const ExpertFfn<S>& f = ffn_of(run.expert);
      Tensor<S> part = (runs.size() == 1) ? x : slice(tape, x, 0, run.start, run.len);
      pieces.push_back(pre_attn ? layer_norm(tape, part, f.ln1_g, f.ln1_b)
                                : layer_norm(tape, part, f.ln2_g, f.ln2_b));
    }
    if (pieces.size() == 1) return pieces[0];
    std::vector<const Tensor<S>*> ptrs;
    for (const Tensor<S>& p : pieces) ptrs.push_back(&p);
    return concat(tape, ptrs, 0);
  };

  const double p_l =
      opts.drop_path_rate * static_cast<double>(layer_index) / static_cast<double>(cfg.layers);
  auto residual = [&](const Tensor<S>& base, const Tensor<S>& branch) {
    if (opts.training && p_l > 0.0) {
      tcheck(opts.rng != nullptr, "block_forward: drop path in training mode needs an rng");
      if (opts.rng->bernoulli(p_l)) return base;
      return add(tape, base, scale(tape, branch, 1.0 / (1.0 - p_l)));
    }
    return add(tape, base, branch);
  };

  // Attention sublayer.
  Tensor<S> normed = routed_norm(hidden, /*pre_attn=*/true);
  Tensor<S> q = linear(tape, normed, blk.wq, blk.bq);
  Tensor<S> k = linear(tape, normed, blk.wk, blk.bk);
  Tensor<S> v = linear(tape, normed, blk.wv, blk.bv);

  const Index head_dim = cfg.hidden / cfg.heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor<S>> head_ctx;
  head_ctx.reserve(static_cast<size_t>(cfg.heads));
  for (int a = 0; a < cfg.heads; ++a) {
    Tensor<S> qa = slice(tape, q, 1, a * head_dim, head_dim);
    Tensor<S> ka = slice(tape, k, 1, a * head_dim, head_dim);
    Tensor<S> va = slice(tape, v, 1, a * head_dim, head_dim);
    Tensor<S> logits = scale(tape, matmul(tape, qa, transpose(tape, ka)), inv_sqrt_d);
    logits = add(tape, logits, mask_bias);
    Tensor<S> weights = softmax(tape, logits, 1);
    head_ctx.push_back(matmul(tape, weights, va));
  }
  std::vector<const Tensor<S>*> ctx_ptrs;
  for (const Tensor<S>& c : head_ctx) ctx_ptrs.push_back(&c);
  Tensor<S> ctx = (head_ctx.size() == 1) ? head_ctx[0] : concat(tape, ctx_ptrs, 1);
  Tensor<S> attn_out = linear(tape, ctx, blk.wo, blk.bo);
  Tensor<S> h = residual(hidden, attn_out);

  // Expert FFN sublayer.
  std::vector<Tensor<S>> ffn_parts;
  ffn_parts.reserve(runs.size());
  for (const auto& run : runs) {
    const ExpertFfn<S>& f = ffn_of(run.expert);
    Tensor<S> xr = (runs.size() == 1) ? h : slice(tape, h, 0, run.start, run.len);
    Tensor<S> zr = layer_norm(tape, xr, f.ln2_g, f.ln2_b);
    zr = gelu(tape, linear(tape, zr, f.w1, f.b1));
    zr = linear(tape, zr, f.w2, f.b2);
    ffn_parts.push_back(std::move(zr));
  }
  Tensor<S> ffn_out;
  if (ffn_parts.size() == 1) {
    ffn_out = ffn_parts[0];
  } else {
    std::vector<const Tensor<S>*> ptrs;
    for (const Tensor<S>& p : ffn_parts) ptrs.push_back(&p);
    ffn_out = concat(tape, ptrs, 0);
  }
  return residual(h, ffn_out);
}

/// Spec-shaped entry taking the boolean mask.
template <typename S>
Tensor<S> block_forward(const MultiwayModel<S>& md, int layer_index, const Tensor<S>& hidden,
                        const AttentionMask& mask, const std::vector<Expert>& routing,
                        Tape<std::type_identity_t<S>>* tape, const ForwardOpts& opts = {}) {
  tcheck(mask.n == hidden.rows(), "block_forward: mask size does not match sequence");
  Tensor<S> bias = detail::mask_to_bias<S>(mask);
  return block_forward_biased(md, layer_index, hidden, bias, routing, tape, opts);
}

/// Token-level inputs for one encode call. Text ids must already carry any
/// mask corruption; image masking is applied here via `masked_cells`.
struct EncodeInput {
  std::optional<ImageTokens> image;
  std::optional<std::vector<Index>> text_ids;
  const AttentionMask* mask_override = nullptr;
};

template <typename S>
Tensor<S> embed_text(const MultiwayModel<S>& md, Tape<std::type_identity_t<S>>* tape, const std::vector<Index>& ids) {
  tcheck(!ids.empty(), "encode: empty text sequence");
  tcheck(static_cast<Index>(ids.size()) <= md.cfg.max_text_len,
         "encode: text length " + std::to_string(ids.size()) + " exceeds max_text_len " +
             std::to_string(md.cfg.max_text_len));
  tcheck(ids.front() == kClsId, "encode: text must begin with the CLS token");
  tcheck(ids.back() == kSepId, "encode: text must end with the SEP token");
  Tensor<S> rows = lookup_rows(tape, md.text_emb, ids);
  Tensor<S> pos = slice(tape, md.pos_text, 0, 0, static_cast<Index>(ids.size()));
  return add(tape, rows, pos);
}

template <typename S>
Tensor<S> embed_image(const MultiwayModel<S>& md, Tape<std::type_identity_t<S>>* tape, const ImageTokens& img) {
  const MultiwayConfig& cfg = md.cfg;
  tcheck(img.n_patches == cfg.grid_cells(),
         "encode: expected " + std::to_string(cfg.grid_cells()) + " patches, got " +
             std::to_string(img.n_patches));
  tcheck(img.dim == cfg.patch_dim, "encode: patch dim " + std::to_string(img.dim) +
                                       " does not match config " + std::to_string(cfg.patch_dim));

  Tensor<S> patches{Shape{img.n_patches, img.dim}};
  for (Index i = 0; i < patches.numel(); ++i)
    patches.data(i) = static_cast<S>(img.values[static_cast<size_t>(i)]);

  Tensor<S> proj = linear(tape, patches, md.patch_proj_w, md.patch_proj_b);
  if (!img.masked_cells.empty()) {
    Tensor<S> keep = Tensor<S>::full({img.n_patches, 1}, S(1));
    Tensor<S> indicator = Tensor<S>::zeros({img.n_patches, 1});
    for (Index cell : img.masked_cells) {
      tcheck(cell >= 0 && cell < img.n_patches, "encode: masked cell out of range");
      keep.at(cell, 0) = S(0);
      indicator.at(cell, 0) = S(1);
    }
    proj = add(tape, mul(tape, proj, keep), matmul(tape, indicator, md.img_mask_emb));
  }
  std::vector<const Tensor<S>*> parts = {&md.img_cls, &proj};
  Tensor<S> rows = concat(tape, parts, 0);
  Tensor<S> pos = slice(tape, md.pos_img, 0, 0, 1 + img.n_patches);
  return add(tape, rows, pos);
}

/// Full encoder pass: embeddings -> L multiway blocks -> final norm; pooled
/// output is tanh(linear) of the leading CLS state.
template <typename S>
Encoded<S> encode(const MultiwayModel<S>& md, Tape<std::type_identity_t<S>>* tape, const EncodeInput& input, Layout layout,
                  const ForwardOpts& opts = {}) {
  const MultiwayConfig& cfg = md.cfg;
  const bool has_img = input.image.has_value();
  const bool has_txt = input.text_ids.has_value();
  switch (layout) {
    case Layout::VisionEncoder:
      tcheck(has_img && !has_txt, "encode: vision-encoder layout takes an image only");
      break;
    case Layout::LanguageEncoder:
      tcheck(has_txt && !has_img, "encode: language-encoder layout takes text only");
      break;
    case Layout::Fusion:
    case Layout::Seq2Seq:
      tcheck(has_img && has_txt,
             std::string("encode: ") + layout_name(layout) + " layout takes image and text");
      break;
    case Layout::Dual:
      tcheck(has_img != has_txt, "encode: dual layout takes exactly one modality");
      break;
  }

  Encoded<S> out;
  Tensor<S> h;
  if (has_img) {
    h = embed_image(md, tape, *input.image);
    out.n_image = 1 + input.image->n_patches;
    out.tags.assign(static_cast<size_t>(out.n_image), ModalityTag::Vision);
  }
  if (has_txt) {
    Tensor<S> t = embed_text(md, tape, *input.text_ids);
    for (size_t i = 0; i < input.text_ids->size(); ++i) out.tags.push_back(ModalityTag::Language);
    if (has_img) {
      std::vector<const Tensor<S>*> parts = {&h, &t};
      h = concat(tape, parts, 0);
    } else {
      h = std::move(t);
    }
  }
  const Index seq = h.rows();
  tcheck(seq <= cfg.max_seq, "encode: sequence length " + std::to_string(seq) +
                                 " exceeds max_seq " + std::to_string(cfg.max_seq));

  Tensor<S> bias;
  if (input.mask_override) {
    tcheck(input.mask_override->n == seq, "encode: mask override size mismatch");
    bias = detail::mask_to_bias<S>(*input.mask_override);
  } else {
    bias = detail::mask_to_bias<S>(
        build_attention_mask(layout, out.n_image, seq - out.n_image));
  }

  for (int l = 1; l <= cfg.layers; ++l) {
    std::vector<Expert> routing = route(out.tags, l, layout, cfg);
    h = block_forward_biased(md, l, h, bias, routing, tape, opts);
  }
  out.hidden = layer_norm(tape, h, md.final_ln_g, md.final_ln_b);
  Tensor<S> cls = slice(tape, out.hidden, 0, 0, 1);
  out.pooled = tanh(tape, linear(tape, cls, md.pooler_w, md.pooler_b));
  return out;
}

}  // namespace mwt
