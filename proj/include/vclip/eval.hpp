#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vclip/data.hpp"
#include "vclip/objective.hpp"
#include "vclip/params.hpp"
#include "vclip/text.hpp"
#include "vclip/vision.hpp"

namespace vclip {

enum class BankMode { Learned, Manual };

inline std::string to_string(BankMode m) { return m == BankMode::Learned ? "learned" : "manual"; }

inline BankMode parse_bank_mode(const std::string& s) {
  if (s == "learned") return BankMode::Learned;
  if (s == "manual") return BankMode::Manual;
  throw ConfigError("mode must be learned or manual, got '" + s + "'");
}

struct ClassEmbeddingBank {
  std::vector<std::string> labels;
  Tensor embeddings;  // N × D', unit rows
  BankMode mode = BankMode::Learned;
};

// Video embedding without keeping the graph around.
inline Tensor embed_video(const ParameterStore& s, const ModelConfig& c, const VideoClip& clip) {
  Graph g;
  return encode_video(g, s, c, clip).embedding.value().reshaped({c.embed_dim});
}

// Text embedding (1×D') of one class prompt inside `g`.
inline Var class_text_embedding(Graph& g, const ParameterStore& s, const ModelConfig& c,
                                const Vocabulary& vocab, const std::string& label,
                                std::size_t class_id, BankMode mode) {
  TokenSequence seq = mode == BankMode::Learned
                          ? build_context(g, s, c, class_id, tokenize(label, vocab))
                          : manual_context(g, s, c, label, vocab);
  return encode_text(g, s, c, seq);
}

// learned: labels must be training classes (class id = position in
// `train_labels`). manual: any labels, template prompt only.
inline ClassEmbeddingBank build_class_bank(const std::vector<std::string>& labels,
                                           const ParameterStore& s, const ModelConfig& c,
                                           const Vocabulary& vocab, BankMode mode,
                                           const std::vector<std::string>& train_labels = {}) {
  if (labels.empty()) throw ContractError("class bank needs at least one label");
  std::set<std::string> seen;
  for (const auto& l : labels)
    if (!seen.insert(l).second) throw DuplicateLabelError("duplicate label '" + l + "'");
  ClassEmbeddingBank bank{labels, Tensor({labels.size(), c.embed_dim}), mode};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t class_id = 0;
    if (mode == BankMode::Learned) {
      auto it = std::find(train_labels.begin(), train_labels.end(), labels[i]);
      if (it == train_labels.end()) {
        throw ContractError("'" + labels[i] + "' is not a training class");
      }
      class_id = static_cast<std::size_t>(it - train_labels.begin());
    }
    Graph g;
    Var e = normalize_rows(class_text_embedding(g, s, c, vocab, labels[i], class_id, mode));
    std::copy(e.value().data().begin(), e.value().data().end(),
              bank.embeddings.data().begin() + static_cast<std::ptrdiff_t>(i * c.embed_dim));
  }
  return bank;
}

struct Classification {
  std::size_t index = 0;
  std::vector<double> scores;  // cosine similarity per bank row
};

// Bank indices ordered by score, ties by lower index.
inline std::vector<std::size_t> ranking(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

inline Classification classify_embedding(const Tensor& video, const ClassEmbeddingBank& bank) {
  Classification out;
  const auto sim = similarity_matrix(video.reshaped({1, video.numel()}), bank.embeddings);
  out.scores.assign(sim.values.data().begin(), sim.values.data().end());
  out.index = ranking(out.scores).front();
  return out;
}

inline Classification classify(const VideoClip& clip, const ClassEmbeddingBank& bank,
                               const ParameterStore& s, const ModelConfig& c) {
  return classify_embedding(embed_video(s, c, clip), bank);
}

struct EvalReport {
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t n_samples = 0;
  BankMode mode = BankMode::Learned;
};

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"top1", r.top1}, {"top5", r.top5}, {"n_samples", r.n_samples}, {"mode", to_string(r.mode)}};
}

// `sample_labels[i]` names the class of samples[i]; every name must be in the bank.
inline EvalReport evaluate(const std::vector<VideoClip>& clips,
                           const std::vector<std::string>& sample_labels,
                           const ClassEmbeddingBank& bank, const ParameterStore& s,
                           const ModelConfig& c) {
  if (clips.size() != sample_labels.size()) throw ContractError("one label per clip is required");
  if (clips.empty()) throw ContractError("nothing to evaluate");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < bank.labels.size(); ++i) index.emplace(bank.labels[i], i);
  std::vector<std::size_t> targets;
  for (const auto& l : sample_labels) {
    auto it = index.find(l);
    if (it == index.end()) throw ContractError("label '" + l + "' is not in the class bank");
    targets.push_back(it->second);
  }
  EvalReport r;
  r.mode = bank.mode;
  r.n_samples = clips.size();
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto order = ranking(classify(clips[i], bank, s, c).scores);
    if (order[0] == targets[i]) ++hit1;
    const std::size_t k = std::min<std::size_t>(5, order.size());
    if (std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), targets[i]) !=
        order.begin() + static_cast<std::ptrdiff_t>(k)) {
      ++hit5;
    }
  }
  r.top1 = static_cast<double>(hit1) / static_cast<double>(clips.size());
  r.top5 = static_cast<double>(hit5) / static_cast<double>(clips.size());
  return r;
}

inline EvalReport evaluate(const std::vector<Sample>& samples, const std::vector<std::string>& labels,
                           const ClassEmbeddingBank& bank, const ParameterStore& s,
                           const ModelConfig& c) {
  std::vector<VideoClip> clips;
  std::vector<std::string> names;
  for (const auto& smp : samples) {
    clips.push_back(smp.clip);
    names.push_back(labels.at(smp.label));
  }
  return evaluate(clips, names, bank, s, c);
}

}  // namespace vclip
