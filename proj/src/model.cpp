#include "mwt/model.h"

namespace mwt {

void MultiwayConfig::validate() const {
  tcheck(layers >= 1, "config: layers must be >= 1");
  tcheck(hidden >= 1 && ffn_inner >= 1 && heads >= 1, "config: dims must be >= 1");
  tcheck(hidden % heads == 0, "config: hidden (" + std::to_string(hidden) +
                                  ") must be divisible by heads (" + std::to_string(heads) + ")");
  tcheck(vl_layers >= 0 && vl_layers <= layers, "config: vl_layers must be in [0, layers]");
  tcheck(patch_rows >= 1 && patch_cols >= 1 && patch_dim >= 1, "config: patch geometry must be >= 1");
  tcheck(patch_px >= 1 && channels >= 1 && patch_dim == patch_px * patch_px * channels,
         "config: patch_dim must equal patch_px^2 * channels");
  tcheck(text_vocab > static_cast<int>(kWordBase), "config: text_vocab must exceed the reserved id range");
  tcheck(visual_vocab >= 2, "config: visual_vocab must be >= 2");
  tcheck(max_text_len >= 2, "config: max_text_len must hold at least CLS+SEP");
  tcheck(max_seq >= max_text_len && max_seq >= 1 + grid_cells(),
         "config: max_seq too small for either modality");
  tcheck(drop_path_rate >= 0.0 && drop_path_rate < 1.0, "config: drop_path_rate must be in [0,1)");
}

AttentionMask build_attention_mask(Layout layout, Index n_image, Index n_caption) {
  tcheck(n_image >= 0 && n_caption >= 0, "build_attention_mask: negative span");
  const Index n = n_image + n_caption;
  AttentionMask mask(n, /*value=*/true);
  if (layout != Layout::Seq2Seq) return mask;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      bool ok;
      if (i < n_image)
        ok = j < n_image;                  // image tokens: bidirectional within the image
      else
        ok = j < n_image || j <= i;        // caption: image span + leftward + self
      mask.set(i, j, ok);
    }
  }
  return mask;
}

std::vector<Expert> route(const std::vector<ModalityTag>& tags, int layer_index, Layout layout,
                          const MultiwayConfig& cfg) {
  tcheck(layer_index >= 1 && layer_index <= cfg.layers,
         "route: layer " + std::to_string(layer_index) + " out of range 1.." +
             std::to_string(cfg.layers));
  const bool top = layer_index > cfg.layers - cfg.vl_layers;
  const bool fused = (layout == Layout::Fusion || layout == Layout::Seq2Seq);
  std::vector<Expert> out(tags.size());
  if (fused && top) {
    tcheck(cfg.vl_layers >= 1, "route: VL expert requested but none configured");
    std::fill(out.begin(), out.end(), Expert::VL);
    return out;
  }
  for (size_t i = 0; i < tags.size(); ++i)
    out[i] = (tags[i] == ModalityTag::Vision) ? Expert::V : Expert::L;
  return out;
}

ParamBreakdown count_params(const MultiwayConfig& cfg) {
  cfg.validate();
  const std::int64_t L = cfg.layers, H = cfg.hidden, M = cfg.ffn_inner, K = cfg.vl_layers;
  const std::int64_t Vt = cfg.text_vocab, Vv = cfg.visual_vocab;

  ParamBreakdown b;
  const std::int64_t ffn_pool = 2 * H * M + M + H;  // two biased linear maps
  b.v_ffn = L * ffn_pool;
  b.l_ffn = L * ffn_pool;
  b.vl_ffn = K * ffn_pool;
  b.attention = L * 4 * (H * H + H);  // q,k,v,o with bias, one copy per layer

  std::int64_t other = 0;
  other += Vt * H + Vv * H;                                   // token tables
  other += static_cast<std::int64_t>(cfg.patch_dim) * H + H;  // patch projection
  other += 2 * H;                                             // image CLS + mask embedding
  other += static_cast<std::int64_t>(cfg.max_text_len) * H;   // text positions
  other += (1 + static_cast<std::int64_t>(cfg.grid_cells())) * H;  // image positions
  other += (2 * L + K) * 4 * H;                               // per-expert norms (two each)
  other += 2 * H;                                             // final norm
  other += H * H + H;                                         // pooler
  other += Vt + Vv;                                           // head biases
  b.other = other;
  b.total = b.v_ffn + b.l_ffn + b.vl_ffn + b.attention + b.other;
  return b;
}

}  // namespace mwt
