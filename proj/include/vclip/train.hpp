#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vclip/checkpoint.hpp"
#include "vclip/data.hpp"
#include "vclip/eval.hpp"
#include "vclip/objective.hpp"
#include "vclip/params.hpp"
#include "vclip/text.hpp"
#include "vclip/vision.hpp"

namespace vclip {

enum class OptimizerKind { Sgd, AdamW };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adamw"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adamw") return OptimizerKind::AdamW;
  throw ConfigError("optimizer must be sgd or adamw, got '" + s + "'");
}

struct TrainSchedule {
  std::size_t epochs = 30;
  double initial_lr = 8e-4;
  std::size_t batch_size = 8;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double weight_decay = 0.0;
  // Upper clamp on the log logit scale (exp = 100).
  double max_logit_scale = std::log(100.0);

  void validate() const {
    if (!(initial_lr > 0.0) || !std::isfinite(initial_lr)) throw ConfigError("initial_lr must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = nlohmann::json{{"epochs", s.epochs},
                     {"initial_lr", s.initial_lr},
                     {"batch_size", s.batch_size},
                     {"optimizer", to_string(s.optimizer)},
                     {"momentum", s.momentum},
                     {"weight_decay", s.weight_decay}};
}

inline void from_json(const nlohmann::json& j, TrainSchedule& s) {
  static const std::set<std::string> known = {"epochs", "initial_lr", "batch_size",
                                              "optimizer", "momentum", "weight_decay"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown train config key '" + key + "'");
  try {
    if (j.contains("epochs")) s.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("initial_lr")) s.initial_lr = j.at("initial_lr").get<double>();
    if (j.contains("batch_size")) s.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("optimizer")) s.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    if (j.contains("momentum")) s.momentum = j.at("momentum").get<double>();
    if (j.contains("weight_decay")) s.weight_decay = j.at("weight_decay").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config value: ") + e.what());
  }
}

// Cosine decay from initial_lr at step 0 towards 0 at step `total`.
inline double cosine_lr(double initial_lr, std::size_t step, std::size_t total) {
  if (total == 0) return initial_lr;
  const double p = static_cast<double>(step) / static_cast<double>(total);
  return 0.5 * initial_lr * (1.0 + std::cos(std::numbers::pi * p));
}

// Per-tensor optimizer state, keyed by parameter name.
struct OptimizerState {
  std::map<std::string, Tensor> first, second;
  std::size_t steps = 0;
};

inline void apply_update(ParameterStore& store, const std::map<std::string, Tensor>& grads,
                         const TrainSchedule& sched, double lr, OptimizerState& state) {
  ++state.steps;
  for (const auto& [name, g] : grads) {
    Tensor& w = store.mutable_trainable(name);
    auto [m_it, m_new] = state.first.try_emplace(name, Tensor(w.shape(), 0.0));
    Tensor& m = m_it->second;
    if (sched.optimizer == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const double gi = g[i] + sched.weight_decay * w[i];
        m[i] = sched.momentum * m[i] + gi;
        w[i] -= lr * m[i];
      }
    } else {
      Tensor& v = state.second.try_emplace(name, Tensor(w.shape(), 0.0)).first->second;
      const double t = static_cast<double>(state.steps);
      const double c1 = 1.0 - std::pow(sched.beta1, t), c2 = 1.0 - std::pow(sched.beta2, t);
      for (std::size_t i = 0; i < w.numel(); ++i) {
        m[i] = sched.beta1 * m[i] + (1.0 - sched.beta1) * g[i];
        v[i] = sched.beta2 * v[i] + (1.0 - sched.beta2) * g[i] * g[i];
        w[i] -= lr * (m[i] / c1 / (std::sqrt(v[i] / c2) + sched.adam_eps) + sched.weight_decay * w[i]);
      }
    }
  }
  if (store.contains(names::kLogitScale) && !store.frozen(names::kLogitScale)) {
    double& ls = store.mutable_trainable(names::kLogitScale)[0];
    ls = std::clamp(ls, 0.0, sched.max_logit_scale);
  }
}

struct StepMetrics {
  double loss = 0.0;
  double lr = 0.0;
  std::size_t correct = 0;  // in-batch argmax hits over the batch's classes
  std::size_t count = 0;
};

// Everything a training step needs besides the parameters.
struct TrainContext {
  ModelConfig config;
  Vocabulary vocab;
  std::vector<std::vector<std::size_t>> class_tokens;  // per training class
};

inline TrainContext make_train_context(const ModelConfig& c, const Vocabulary& vocab,
                                       const std::vector<std::string>& labels) {
  if (labels.size() != c.num_classes) {
    throw ConfigError("model num_classes " + std::to_string(c.num_classes) + " but dataset has " +
                      std::to_string(labels.size()) + " training classes");
  }
  if (vocab.size() > c.vocab_size) {
    throw ConfigError("vocabulary of " + std::to_string(vocab.size()) +
                      " words exceeds vocab_size " + std::to_string(c.vocab_size));
  }
  TrainContext ctx{c, vocab, {}};
  for (const auto& l : labels) ctx.class_tokens.push_back(tokenize(l, vocab));
  return ctx;
}

// Forward of one batch inside `g`: returns the loss terms and the logits.
struct BatchForward {
  LossTerms loss;
  Var logits;
  std::vector<std::size_t> targets;  // column per video
};

inline BatchForward batch_forward(Graph& g, const ParameterStore& s, const TrainContext& ctx,
                                  const std::vector<const Sample*>& batch) {
  const ModelConfig& c = ctx.config;
  std::vector<Var> videos;
  std::vector<std::size_t> classes;
  for (const Sample* smp : batch) {
    videos.push_back(encode_video(g, s, c, smp->clip).embedding);
    classes.push_back(smp->label);
  }
  std::vector<std::size_t> distinct = classes;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<Var> texts;
  for (std::size_t k : distinct) {
    if (k >= ctx.class_tokens.size()) throw ContractError("sample label outside training classes");
    texts.push_back(encode_text(g, s, c, build_context(g, s, c, k, ctx.class_tokens[k])));
  }
  BatchForward out;
  for (std::size_t k : classes) {
    out.targets.push_back(static_cast<std::size_t>(
        std::lower_bound(distinct.begin(), distinct.end(), k) - distinct.begin()));
  }
  out.logits = similarity_matrix(concat_rows(videos), concat_rows(texts),
                                 s.bind(g, names::kLogitScale));
  out.loss = contrastive_loss(out.logits, out.targets);
  return out;
}

inline StepMetrics train_step(const std::vector<const Sample*>& batch, ParameterStore& store,
                              const TrainContext& ctx, const TrainSchedule& sched,
                              std::size_t step, std::size_t total_steps, OptimizerState& state) {
  Graph g;
  BatchForward fwd = batch_forward(g, store, ctx, batch);
  StepMetrics m;
  m.loss = fwd.loss.total.value().item();
  m.lr = cosine_lr(sched.initial_lr, step, total_steps);
  m.count = batch.size();
  if (!std::isfinite(m.loss)) {
    throw TrainingDiverged("non-finite loss at step " + std::to_string(step) + " (lr " +
                           std::to_string(m.lr) + ")");
  }
  const Tensor& L = fwd.logits.value();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double* row = L.data().data() + i * L.cols();
    if (std::max_element(row, row + L.cols()) - row == static_cast<std::ptrdiff_t>(fwd.targets[i])) {
      ++m.correct;
    }
  }
  auto grads = g.backward(fwd.loss.total);
  for (const auto& [name, gt] : grads) {
    if (!gt.all_finite()) {
      throw TrainingDiverged("non-finite gradient for '" + name + "' at step " + std::to_string(step));
    }
  }
  apply_update(store, grads, sched, m.lr, state);
  return m;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global steps completed
  double lr = 0.0;       // lr of the epoch's last step
  double loss = 0.0;     // mean batch loss
  double top1_train = 0.0;
};

inline const char* kMetricsHeader = "epoch,step,lr,loss,top1_train";

inline std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%zu,%zu,%.10e,%.12f,%.6f\n", r.epoch, r.step, r.lr, r.loss,
                  r.top1_train);
    out += line;
  }
  return out;
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetrics> metrics;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Fresh initialization from `seed`, then `epochs` passes over the training
// split in a per-epoch shuffled order drawn from the "shuffle" stream.
inline TrainResult train_loop(const Dataset& ds, const ModelConfig& config,
                              const TrainSchedule& sched, std::uint64_t seed,
                              const EpochCallback& on_epoch = {}) {
  sched.validate();
  if (ds.train.empty()) throw ContractError("training split is empty");
  const auto labels = ds.train_labels();
  const Vocabulary vocab = Vocabulary::from_labels(ds.labels());
  const TrainContext ctx = make_train_context(config, vocab, labels);

  TrainResult result{{config, init_model(config, seed), vocab, labels}, {}};
  ParameterStore& store = result.checkpoint.store;
  OptimizerState state;
  Rng shuffle = named_stream(seed, "shuffle");
  const std::size_t per_epoch = (ds.train.size() + sched.batch_size - 1) / sched.batch_size;
  const std::size_t total = per_epoch * sched.epochs;
  std::vector<std::size_t> order(ds.train.size());
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= sched.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle);
    EpochMetrics em{epoch, 0, 0.0, 0.0, 0.0};
    std::size_t correct = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<const Sample*> batch;
      for (std::size_t i = b * sched.batch_size;
           i < std::min(order.size(), (b + 1) * sched.batch_size); ++i) {
        batch.push_back(&ds.train[order[i]]);
      }
      StepMetrics m = train_step(batch, store, ctx, sched, step, total, state);
      ++step;
      em.loss += m.loss;
      em.lr = m.lr;
      correct += m.correct;
    }
    em.step = step;
    em.loss /= static_cast<double>(per_epoch);
    em.top1_train = static_cast<double>(correct) / static_cast<double>(ds.train.size());
    result.metrics.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  return result;
}

}  // namespace vclip
