#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vclip/config.hpp"
#include "vclip/graph.hpp"
#include "vclip/layers.hpp"
#include "vclip/params.hpp"
#include "vclip/tensor.hpp"

namespace vclip {

// Raw model input: T×H×W×Ch, values in [0, 1].
struct VideoClip {
  Tensor frames;

  std::size_t frame_count() const { return frames.dim(0); }
};

inline void check_clip(const VideoClip& clip, const ModelConfig& c) {
  const Shape expected{c.frames, c.height, c.width, c.channels};
  if (clip.frames.shape() != expected) {
    throw DimensionError("clip shape " + shape_str(clip.frames.shape()) + " does not match " +
                         shape_str(expected));
  }
  clip.frames.ensure_finite();
}

enum class TokenRole { Cls, Patch, Summary, Global, Local, Context, Label, Readout, Pad };

inline const char* to_string(TokenRole r) {
  switch (r) {
    case TokenRole::Cls: return "cls";
    case TokenRole::Patch: return "patch";
    case TokenRole::Summary: return "summary";
    case TokenRole::Global: return "global";
    case TokenRole::Local: return "local";
    case TokenRole::Context: return "context";
    case TokenRole::Label: return "label";
    case TokenRole::Readout: return "readout";
    case TokenRole::Pad: return "pad";
  }
  return "?";
}

// Splits every frame into non-overlapping P×P patches in raster order; each
// patch is flattened as (row, column, channel). Result: T×N×(Ch·P²).
inline Tensor patchify(const Tensor& frames, std::size_t patch) {
  if (frames.rank() != 4) throw DimensionError("patchify expects T×H×W×Ch frames");
  const std::size_t T = frames.dim(0), H = frames.dim(1), W = frames.dim(2), C = frames.dim(3);
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw DimensionError("frame " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = H / patch, gw = W / patch, pd = C * patch * patch;
  Tensor out({T, gh * gw, pd});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        const std::size_t n = py * gw + px;
        double* dst = out.data().data() + (t * gh * gw + n) * pd;
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            for (std::size_t ch = 0; ch < C; ++ch) {
              const std::size_t src = ((t * H + py * patch + y) * W + px * patch + x) * C + ch;
              dst[(y * patch + x) * C + ch] = frames[src];
            }
      }
  return out;
}

// z⁰_t = [x_cls, patches·P_emb] + e_sp + e_tm[t]  →  (1+N)×D
inline Var embed_frame(Var patches, Var patch_embed, Var cls, Var pos_spatial, Var pos_temporal_t) {
  if (patches.value().rank() != 2 || patches.value().cols() != patch_embed.value().dim(0)) {
    throw DimensionError("embed_frame: patches do not match the patch embedding");
  }
  if (pos_spatial.value().rows() != patches.value().rows() + 1) {
    throw DimensionError("embed_frame: spatial positions must cover CLS plus every patch");
  }
  Var tokens = concat_rows({reshape(cls, {1, cls.value().numel()}), matmul(patches, patch_embed)});
  return add_row(add(tokens, pos_spatial), pos_temporal_t);
}

struct SummaryWeights {
  Var proj_w, proj_b;
  LayerNormWeights ln_q, ln_kv;
  AttentionWeights attn;
};

inline SummaryWeights bind_summary(Graph& g, const ParameterStore& s, std::size_t layer) {
  const std::string p = names::prompt_layer(layer) + ".summary";
  return {s.bind(g, p + ".proj.w"), s.bind(g, p + ".proj.b"), bind_layer_norm(g, s, p + ".ln_q"),
          bind_layer_norm(g, s, p + ".ln_kv"), bind_attention(g, s, p + ".attn")};
}

// S = MHSA(LN(Z·P_sum)) + Z·P_sum over the T frame CLS tokens, with no
// positional encoding across frames.
inline MhsaResult summary_tokens(Var cls_tokens, const SummaryWeights& w, std::size_t heads) {
  Var projected = linear(cls_tokens, w.proj_w, w.proj_b);
  Var q = linear(apply(w.ln_q, projected), w.attn.wq, w.attn.bq);
  Var kv_in = apply(w.ln_kv, projected);
  Var k = linear(kv_in, w.attn.wk, w.attn.bk);
  Var v = linear(kv_in, w.attn.wv, w.attn.bv);
  Var a = attention(q, k, v, heads);
  return {add(linear(a, w.attn.wo, w.attn.bo), projected), attention_probs(a)};
}

// l̂_t = l_t + z_{t,0}
inline Var condition_local_prompts(Var local, Var cls_tokens) { return add(local, cls_tokens); }

// Prompt tokens appended in one layer. summary: T×D, global: M_v×D,
// local_hat: T×D; absent families are disabled.
struct LayerPrompts {
  std::optional<Var> summary;
  std::optional<Var> global;
  std::optional<Var> local_hat;
};

struct LayerOutput {
  Var tokens;                      // (T·(1+N))×D, frames stacked
  std::vector<Tensor> attention;   // per frame: heads × (1+N) × augmented length
};

// Column roles of one frame's augmented sequence [z_t, s_t, G, L̂].
inline std::vector<TokenRole> augmented_roles(const ModelConfig& c) {
  std::vector<TokenRole> roles{TokenRole::Cls};
  roles.insert(roles.end(), c.patches_per_frame(), TokenRole::Patch);
  roles.insert(roles.end(), c.summary_count(), TokenRole::Summary);
  roles.insert(roles.end(), c.global_count(), TokenRole::Global);
  roles.insert(roles.end(), c.local_count(), TokenRole::Local);
  return roles;
}

// One frozen layer applied to every frame of a clip. Each frame attends over
// its own tokens plus the appended prompts; appended positions are dropped
// after attention and the FFN runs on the retained 1+N tokens only. Queries
// are therefore only formed for retained rows.
inline LayerOutput encoder_layer(Var tokens, const LayerPrompts& prompts, const BlockWeights& w,
                                 const ModelConfig& c) {
  const std::size_t R = 1 + c.patches_per_frame();
  const std::size_t T = c.frames;
  if (tokens.value().rows() != T * R || tokens.value().cols() != c.vision_width) {
    throw DimensionError("encoder_layer: expected " + std::to_string(T * R) + "x" +
                         std::to_string(c.vision_width) + " tokens, got " +
                         shape_str(tokens.shape()));
  }
  auto check = [&](const std::optional<Var>& p, bool enabled, std::size_t rows, const char* what) {
    if (p.has_value() != enabled) {
      throw ConfigError(std::string("encoder_layer: ") + what + " prompts " +
                        (enabled ? "missing" : "given but disabled"));
    }
    if (p && (p->value().rows() != rows || p->value().cols() != c.vision_width)) {
      throw ConfigError(std::string("encoder_layer: ") + what + " prompts have wrong shape");
    }
  };
  check(prompts.summary, c.enable_summary, T, "summary");
  check(prompts.global, c.enable_global, c.global_prompts, "global");
  check(prompts.local_hat, c.enable_local, T, "local");

  Var normed = apply(w.ln1, tokens);
  Var q = linear(normed, w.attn.wq, w.attn.bq);
  Var k = linear(normed, w.attn.wk, w.attn.bk);
  Var v = linear(normed, w.attn.wv, w.attn.bv);

  // Keys/values of the frame-shared prompts [G, L̂] and of the summary tokens.
  std::optional<Var> k_shared, v_shared, k_sum, v_sum;
  {
    std::vector<Var> shared;
    if (prompts.global) shared.push_back(*prompts.global);
    if (prompts.local_hat) shared.push_back(*prompts.local_hat);
    if (!shared.empty()) {
      Var n = apply(w.ln1, shared.size() == 1 ? shared[0] : concat_rows(shared));
      k_shared = linear(n, w.attn.wk, w.attn.bk);
      v_shared = linear(n, w.attn.wv, w.attn.bv);
    }
    if (prompts.summary) {
      Var n = apply(w.ln1, *prompts.summary);
      k_sum = linear(n, w.attn.wk, w.attn.bk);
      v_sum = linear(n, w.attn.wv, w.attn.bv);
    }
  }

  std::vector<Var> outs;
  std::vector<Tensor> maps;
  outs.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<Var> ks{slice_rows(k, t * R, (t + 1) * R)};
    std::vector<Var> vs{slice_rows(v, t * R, (t + 1) * R)};
    if (k_sum) {
      if (c.summary_all_frames) {
        ks.push_back(*k_sum);
        vs.push_back(*v_sum);
      } else {
        ks.push_back(slice_rows(*k_sum, t, t + 1));
        vs.push_back(slice_rows(*v_sum, t, t + 1));
      }
    }
    if (k_shared) {
      ks.push_back(*k_shared);
      vs.push_back(*v_shared);
    }
    Var kk = ks.size() == 1 ? ks[0] : concat_rows(ks);
    Var vv = vs.size() == 1 ? vs[0] : concat_rows(vs);
    Var a = attention(slice_rows(q, t * R, (t + 1) * R), kk, vv, c.vision_heads);
    maps.push_back(attention_probs(a));
    outs.push_back(a);
  }
  Var attended = linear(T == 1 ? outs[0] : concat_rows(outs), w.attn.wo, w.attn.bo);
  Var hat = add(tokens, attended);
  Var out = add(hat, feed_forward(w.ffn, apply(w.ln2, hat)));
  return {out, std::move(maps)};
}

// Per layer, per frame attention of the retained rows over the augmented
// sequence.
struct AttentionTrace {
  std::size_t retained = 0;            // 1 + N
  std::vector<TokenRole> roles;        // column roles
  std::vector<std::vector<Tensor>> layers;  // [layer][frame] heads × retained × columns
};

struct VideoForward {
  Var embedding;  // 1×D'
  AttentionTrace trace;
};

inline std::vector<std::size_t> cls_rows(const ModelConfig& c) {
  std::vector<std::size_t> idx;
  const std::size_t R = 1 + c.patches_per_frame();
  for (std::size_t t = 0; t < c.frames; ++t) idx.push_back(t * R);
  return idx;
}

// Builds the prompts of layer `layer` from the previous layer's CLS tokens.
inline LayerPrompts make_layer_prompts(Graph& g, const ParameterStore& s, const ModelConfig& c,
                                       std::size_t layer, Var cls_tokens) {
  LayerPrompts p;
  const std::string base = names::prompt_layer(layer);
  if (c.enable_summary) {
    p.summary = summary_tokens(cls_tokens, bind_summary(g, s, layer), c.vision_heads).out;
  }
  if (c.enable_global) p.global = s.bind(g, base + ".global");
  if (c.enable_local) p.local_hat = condition_local_prompts(s.bind(g, base + ".local"), cls_tokens);
  return p;
}

// Stacked (T·(1+N))×D layer-0 tokens of a clip.
inline Var embed_clip(Graph& g, const ParameterStore& s, const ModelConfig& c,
                      const VideoClip& clip) {
  check_clip(clip, c);
  const std::size_t T = c.frames, N = c.patches_per_frame();
  Var patches = g.constant(patchify(clip.frames, c.patch).reshaped({T * N, c.patch_dim()}));
  Var projected = matmul(patches, s.bind(g, "vision.patch_embed"));
  Var cls = reshape(s.bind(g, "vision.cls"), {1, c.vision_width});
  std::vector<Var> parts;
  std::vector<std::size_t> spatial_idx, temporal_idx;
  for (std::size_t t = 0; t < T; ++t) {
    parts.push_back(cls);
    parts.push_back(slice_rows(projected, t * N, (t + 1) * N));
    for (std::size_t i = 0; i <= N; ++i) {
      spatial_idx.push_back(i);
      temporal_idx.push_back(t);
    }
  }
  Var tokens = concat_rows(parts);
  tokens = add(tokens, gather_rows(s.bind(g, "vision.pos_spatial"), spatial_idx));
  return add(tokens, gather_rows(s.bind(g, "vision.pos_temporal"), temporal_idx));
}

// Full video pipeline: embed → L_v prompted layers → per-frame CLS·P_out →
// mean over frames.
inline VideoForward encode_video(Graph& g, const ParameterStore& s, const ModelConfig& c,
                                 const VideoClip& clip, bool record_trace = false) {
  VideoForward fwd;
  Var tokens = embed_clip(g, s, c, clip);
  const auto cls_idx = cls_rows(c);
  if (record_trace) {
    fwd.trace.retained = 1 + c.patches_per_frame();
    fwd.trace.roles = augmented_roles(c);
  }
  for (std::size_t l = 0; l < c.vision_layers; ++l) {
    LayerPrompts prompts = make_layer_prompts(g, s, c, l, gather_rows(tokens, cls_idx));
    LayerOutput out = encoder_layer(tokens, prompts, bind_block(g, s, names::vision_layer(l)), c);
    tokens = out.tokens;
    if (record_trace) fwd.trace.layers.push_back(std::move(out.attention));
  }
  Var frame_embeddings = matmul(gather_rows(tokens, cls_idx), s.bind(g, "vision.proj"));
  fwd.embedding = mean_rows(frame_embeddings);
  return fwd;
}

// Value-only convenience wrapper.
inline std::pair<Tensor, AttentionTrace> encode_video(const ParameterStore& s,
                                                      const ModelConfig& c,
                                                      const VideoClip& clip) {
  Graph g;
  VideoForward fwd = encode_video(g, s, c, clip, true);
  return {fwd.embedding.value().reshaped({c.embed_dim}), std::move(fwd.trace)};
}

}  // namespace vclip
