#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vclip/config.hpp"
#include "vclip/graph.hpp"
#include "vclip/layers.hpp"
#include "vclip/params.hpp"
#include "vclip/vision.hpp"

namespace vclip {

inline const std::string kManualTemplate = "a video of the action of";

// Word-level vocabulary. Ids 0..2 are reserved.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kClsText = 2;

  Vocabulary() : tokens_{"<pad>", "<unk>", "<cls>"} { reindex(); }

  // Full ordered token list, reserved entries included (checkpoint form).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 3 || tokens[0] != "<pad>" || tokens[1] != "<unk>" || tokens[2] != "<cls>") {
      throw ManifestError("vocabulary must start with <pad>, <unk>, <cls>");
    }
    Vocabulary v;
    v.tokens_ = tokens;
    v.reindex();
    if (v.index_.size() != v.tokens_.size()) throw ManifestError("vocabulary has duplicate tokens");
    return v;
  }

  // Sorted unique words of the labels plus the manual template.
  static Vocabulary from_labels(const std::vector<std::string>& labels) {
    std::set<std::string> words;
    auto add = [&](const std::string& text) {
      for (const auto& w : split_words(text)) words.insert(w);
    };
    add(kManualTemplate);
    for (const auto& l : labels) add(l);
    Vocabulary v;
    v.tokens_.insert(v.tokens_.end(), words.begin(), words.end());
    v.reindex();
    return v;
  }

  static std::vector<std::string> split_words(const std::string& text) {
    std::istringstream is(text);
    std::vector<std::string> out;
    for (std::string w; is >> w;) {
      std::transform(w.begin(), w.end(), w.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      out.push_back(w);
    }
    return out;
  }

  std::size_t id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> index_;
};

inline std::vector<std::size_t> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<std::size_t> ids;
  for (const auto& w : Vocabulary::split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

// Embedded text prompt with positions already added.
struct TokenSequence {
  Var embeddings;                 // length × D_text
  std::vector<TokenRole> roles;
  std::vector<char> key_mask;     // 0 on PAD positions
  std::size_t readout = 0;
};

namespace detail {

inline void check_ids(const std::vector<std::size_t>& ids, const ModelConfig& c) {
  for (auto id : ids)
    if (id >= c.vocab_size) {
      throw ConfigError("token id " + std::to_string(id) + " exceeds vocab_size " +
                        std::to_string(c.vocab_size));
    }
}

// [prefix rows, label tokens, readout, PAD...] + positions. `prefix` may be
// empty; `length` is the padded length (0 → context_length).
inline TokenSequence assemble_text(Graph& g, const ParameterStore& s, const ModelConfig& c,
                                   std::optional<Var> prefix, TokenRole prefix_role,
                                   const std::vector<std::size_t>& label_tokens,
                                   std::size_t length) {
  const std::size_t np = prefix ? prefix->value().rows() : 0;
  const std::size_t content = np + label_tokens.size() + 1;
  if (length == 0) length = c.context_length;
  if (content > c.context_length || content > length) {
    throw InputTooLongError("text prompt needs " + std::to_string(content) +
                            " positions but only " +
                            std::to_string(std::min(length, c.context_length)) + " are available");
  }
  if (length > c.context_length) throw InputTooLongError("padded length exceeds context_length");
  check_ids(label_tokens, c);

  TokenSequence seq;
  std::vector<std::size_t> ids = label_tokens;
  ids.push_back(Vocabulary::kClsText);
  ids.insert(ids.end(), length - content, Vocabulary::kPad);
  Var embed = s.bind(g, "text.token_embed");
  std::vector<Var> parts;
  if (prefix) parts.push_back(*prefix);
  parts.push_back(gather_rows(embed, ids));
  Var tokens = parts.size() == 1 ? parts[0] : concat_rows(parts);
  std::vector<std::size_t> pos(length);
  for (std::size_t i = 0; i < length; ++i) pos[i] = i;
  seq.embeddings = add(tokens, gather_rows(s.bind(g, "text.pos"), pos));

  seq.roles.assign(np, prefix_role);
  seq.roles.insert(seq.roles.end(), label_tokens.size(), TokenRole::Label);
  seq.roles.push_back(TokenRole::Readout);
  seq.roles.insert(seq.roles.end(), length - content, TokenRole::Pad);
  seq.key_mask.assign(length, 1);
  for (std::size_t i = content; i < length; ++i) seq.key_mask[i] = 0;
  seq.readout = content - 1;
  return seq;
}

}  // namespace detail

// Learned context vectors of one class, M_c × D_text. In UC mode every class
// reads the same tensor.
inline Var context_vectors(Graph& g, const ParameterStore& s, const ModelConfig& c,
                           std::size_t class_id) {
  if (class_id >= c.num_classes) {
    throw ContractError("class id " + std::to_string(class_id) + " out of range");
  }
  Var ctx = s.bind(g, names::kTextContext);
  if (c.text_mode == TextMode::Unified) return ctx;
  const std::size_t m = c.text_contexts;
  Var flat = reshape(ctx, {c.num_classes * m, c.text_width});
  return slice_rows(flat, class_id * m, (class_id + 1) * m);
}

// C = [u_1..u_{M_c}, label tokens, readout] padded to `length`.
inline TokenSequence build_context(Graph& g, const ParameterStore& s, const ModelConfig& c,
                                   std::size_t class_id,
                                   const std::vector<std::size_t>& label_tokens,
                                   std::size_t length = 0) {
  std::optional<Var> prefix;
  if (c.text_contexts > 0) prefix = context_vectors(g, s, c, class_id);
  return detail::assemble_text(g, s, c, prefix, TokenRole::Context, label_tokens, length);
}

// Fixed template "a video of the action of {label}"; reads no trainable tensor.
inline TokenSequence manual_context(Graph& g, const ParameterStore& s, const ModelConfig& c,
                                    const std::string& label, const Vocabulary& vocab,
                                    std::size_t length = 0) {
  return detail::assemble_text(g, s, c, std::nullopt, TokenRole::Context,
                               tokenize(kManualTemplate + " " + label, vocab), length);
}

// Frozen pre-LN text transformer with PAD keys masked; the readout row goes
// through the final LN and the projection. Returns 1×D'.
inline Var encode_text(Graph& g, const ParameterStore& s, const ModelConfig& c,
                       const TokenSequence& seq) {
  Var x = seq.embeddings;
  if (x.value().cols() != c.text_width) throw DimensionError("text width mismatch");
  for (std::size_t l = 0; l < c.text_layers; ++l) {
    BlockWeights w = bind_block(g, s, names::text_layer(l));
    x = add(x, mhsa(apply(w.ln1, x), w.attn, c.text_heads, seq.key_mask).out);
    x = add(x, feed_forward(w.ffn, apply(w.ln2, x)));
  }
  Var r = layer_norm(slice_rows(x, seq.readout, seq.readout + 1), s.bind(g, "text.ln_final.gamma"),
                     s.bind(g, "text.ln_final.beta"));
  return matmul(r, s.bind(g, "text.proj"));
}

}  // namespace vclip
