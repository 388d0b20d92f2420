#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "vclip/config.hpp"
#include "vclip/graph.hpp"
#include "vclip/layers.hpp"
#include "vclip/rng.hpp"
#include "vclip/tensor.hpp"

namespace vclip {

// Named tensors with a freeze flag. Ordered by name so iteration (and the
// checkpoint layout) is deterministic.
class ParameterStore {
 public:
  struct Entry {
    Tensor value;
    bool frozen = true;
  };

  void add(const std::string& name, Tensor value, bool frozen) {
    auto [it, inserted] = entries_.emplace(name, Entry{std::move(value), frozen});
    if (!inserted) throw ContractError("duplicate parameter '" + name + "'");
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("no parameter named '" + name + "'");
    return it->second;
  }

  const Tensor& value(const std::string& name) const { return entry(name).value; }
  bool frozen(const std::string& name) const { return entry(name).frozen; }

  // Only trainable tensors may be written after initialization.
  Tensor& mutable_trainable(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("no parameter named '" + name + "'");
    if (it->second.frozen) throw ContractError("parameter '" + name + "' is frozen");
    return it->second.value;
  }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  // Binds a parameter into a graph; frozen tensors never require a gradient.
  Var bind(Graph& g, const std::string& name) const {
    const Entry& e = entry(name);
    return g.param(name, e.value, !e.frozen);
  }

  bool operator==(const ParameterStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (const auto& [name, e] : entries_) {
      auto it = other.entries_.find(name);
      if (it == other.entries_.end() || it->second.frozen != e.frozen ||
          !(it->second.value == e.value)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::map<std::string, Entry> entries_;
};

enum class InitKind { Normal, FanIn, Ones, Zeros, Constant };

struct ParamSpec {
  std::string name;
  Shape shape;
  bool frozen;
  InitKind init;
  double value = 0.0;  // std for Normal, constant for Constant
};

inline constexpr double kEmbeddingStd = 0.02;
inline constexpr double kPromptStd = 0.02;

namespace names {
inline std::string vision_layer(std::size_t l) { return "vision.layer" + std::to_string(l); }
inline std::string text_layer(std::size_t l) { return "text.layer" + std::to_string(l); }
inline std::string prompt_layer(std::size_t l) { return "prompt.layer" + std::to_string(l); }
inline const std::string kTextContext = "prompt.text.context";
inline const std::string kLogitScale = "logit_scale";
}  // namespace names

namespace detail {

inline void block_specs(std::vector<ParamSpec>& out, const std::string& p, std::size_t d) {
  out.push_back({p + ".ln1.gamma", {d}, true, InitKind::Ones});
  out.push_back({p + ".ln1.beta", {d}, true, InitKind::Zeros});
  for (const char* m : {"q", "k", "v", "o"}) {
    out.push_back({p + ".attn.w" + m, {d, d}, true, InitKind::FanIn});
    out.push_back({p + ".attn.b" + m, {d}, true, InitKind::Zeros});
  }
  out.push_back({p + ".ln2.gamma", {d}, true, InitKind::Ones});
  out.push_back({p + ".ln2.beta", {d}, true, InitKind::Zeros});
  out.push_back({p + ".ffn.w1", {d, 4 * d}, true, InitKind::FanIn});
  out.push_back({p + ".ffn.b1", {4 * d}, true, InitKind::Zeros});
  out.push_back({p + ".ffn.w2", {4 * d, d}, true, InitKind::FanIn});
  out.push_back({p + ".ffn.b2", {d}, true, InitKind::Zeros});
}

}  // namespace detail

// Every tensor of the model with its shape, freeze flag and initializer.
inline std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t D = c.vision_width, Dt = c.text_width;
  std::vector<ParamSpec> s;

  // Frozen vision backbone.
  s.push_back({"vision.patch_embed", {c.patch_dim(), D}, true, InitKind::FanIn});
  s.push_back({"vision.cls", {D}, true, InitKind::Normal, kEmbeddingStd});
  s.push_back({"vision.pos_spatial", {1 + c.patches_per_frame(), D}, true, InitKind::Normal,
               kEmbeddingStd});
  s.push_back({"vision.pos_temporal", {c.frames, D}, true, InitKind::Normal, kEmbeddingStd});
  for (std::size_t l = 0; l < c.vision_layers; ++l) detail::block_specs(s, names::vision_layer(l), D);
  s.push_back({"vision.proj", {D, c.embed_dim}, true, InitKind::FanIn});

  // Frozen text backbone.
  s.push_back({"text.token_embed", {c.vocab_size, Dt}, true, InitKind::Normal, kEmbeddingStd});
  s.push_back({"text.pos", {c.context_length, Dt}, true, InitKind::Normal, kEmbeddingStd});
  for (std::size_t l = 0; l < c.text_layers; ++l) detail::block_specs(s, names::text_layer(l), Dt);
  s.push_back({"text.ln_final.gamma", {Dt}, true, InitKind::Ones});
  s.push_back({"text.ln_final.beta", {Dt}, true, InitKind::Zeros});
  s.push_back({"text.proj", {Dt, c.embed_dim}, true, InitKind::FanIn});

  // Trainable vision prompts, one independent set per layer.
  for (std::size_t l = 0; l < c.vision_layers; ++l) {
    const std::string p = names::prompt_layer(l);
    if (c.enable_summary) {
      s.push_back({p + ".summary.proj.w", {D, D}, false, InitKind::FanIn});
      s.push_back({p + ".summary.proj.b", {D}, false, InitKind::Zeros});
      // Separate normalization for the query side and the key/value side.
      s.push_back({p + ".summary.ln_q.gamma", {D}, false, InitKind::Ones});
      s.push_back({p + ".summary.ln_q.beta", {D}, false, InitKind::Zeros});
      s.push_back({p + ".summary.ln_kv.gamma", {D}, false, InitKind::Ones});
      s.push_back({p + ".summary.ln_kv.beta", {D}, false, InitKind::Zeros});
      for (const char* m : {"q", "k", "v", "o"}) {
        s.push_back({p + ".summary.attn.w" + m, {D, D}, false, InitKind::FanIn});
        s.push_back({p + ".summary.attn.b" + m, {D}, false, InitKind::Zeros});
      }
    }
    if (c.enable_global) {
      s.push_back({p + ".global", {c.global_prompts, D}, false, InitKind::Normal, kPromptStd});
    }
    if (c.enable_local) {
      s.push_back({p + ".local", {c.frames, D}, false, InitKind::Normal, kPromptStd});
    }
  }

  if (c.text_contexts > 0) {
    Shape shape = c.text_mode == TextMode::ClassSpecific
                      ? Shape{c.num_classes, c.text_contexts, Dt}
                      : Shape{c.text_contexts, Dt};
    s.push_back({names::kTextContext, shape, false, InitKind::Normal, kPromptStd});
  }
  s.push_back({names::kLogitScale, {1}, false, InitKind::Constant, c.logit_scale_init});
  return s;
}

// Backbone from a seeded Gaussian (standing in for pretrained weights), then
// frozen; prompts Gaussian and trainable. Each tensor draws from its own
// named stream, so toggling a prompt family leaves every other tensor intact.
inline ParameterStore init_model(const ModelConfig& config, std::uint64_t seed) {
  ParameterStore store;
  for (const auto& spec : parameter_layout(config)) {
    Tensor t(spec.shape, 0.0);
    switch (spec.init) {
      case InitKind::Zeros:
        break;
      case InitKind::Ones:
        for (auto& v : t.data()) v = 1.0;
        break;
      case InitKind::Constant:
        for (auto& v : t.data()) v = spec.value;
        break;
      case InitKind::Normal:
      case InitKind::FanIn: {
        const double std = spec.init == InitKind::FanIn
                               ? 1.0 / std::sqrt(static_cast<double>(spec.shape[0]))
                               : spec.value;
        Rng rng = named_stream(seed, "init/" + spec.name);
        std::normal_distribution<double> dist(0.0, std);
        for (auto& v : t.data()) v = dist(rng);
        break;
      }
    }
    store.add(spec.name, std::move(t), spec.frozen);
  }
  return store;
}

inline std::size_t count_trainable(const ParameterStore& store) {
  std::size_t n = 0;
  for (const auto& [_, e] : store.entries())
    if (!e.frozen) n += e.value.numel();
  return n;
}

// Closed form of count_trainable for a configuration.
inline std::size_t expected_trainable(const ModelConfig& c) {
  const std::size_t D = c.vision_width;
  std::size_t per_layer = 0;
  if (c.enable_summary) per_layer += (D * D + D) + 4 * (D * D + D) + 2 * 2 * D;
  if (c.enable_global) per_layer += c.global_prompts * D;
  if (c.enable_local) per_layer += c.frames * D;
  return c.vision_layers * per_layer + c.text_contexts * c.text_width * c.context_sets() + 1;
}

// Convenience accessors for the weight groups of one block.
inline AttentionWeights bind_attention(Graph& g, const ParameterStore& s, const std::string& p) {
  return {s.bind(g, p + ".wq"), s.bind(g, p + ".bq"), s.bind(g, p + ".wk"), s.bind(g, p + ".bk"),
          s.bind(g, p + ".wv"), s.bind(g, p + ".bv"), s.bind(g, p + ".wo"), s.bind(g, p + ".bo")};
}

inline LayerNormWeights bind_layer_norm(Graph& g, const ParameterStore& s, const std::string& p) {
  return {s.bind(g, p + ".gamma"), s.bind(g, p + ".beta")};
}

inline FeedForwardWeights bind_feed_forward(Graph& g, const ParameterStore& s,
                                            const std::string& p) {
  return {s.bind(g, p + ".w1"), s.bind(g, p + ".b1"), s.bind(g, p + ".w2"), s.bind(g, p + ".b2")};
}

struct BlockWeights {
  LayerNormWeights ln1;
  AttentionWeights attn;
  LayerNormWeights ln2;
  FeedForwardWeights ffn;
};

inline BlockWeights bind_block(Graph& g, const ParameterStore& s, const std::string& p) {
  return {bind_layer_norm(g, s, p + ".ln1"), bind_attention(g, s, p + ".attn"),
          bind_layer_norm(g, s, p + ".ln2"), bind_feed_forward(g, s, p + ".ffn")};
}

}  // namespace vclip
