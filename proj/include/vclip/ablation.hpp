#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "vclip/eval.hpp"
#include "vclip/train.hpp"

namespace vclip {

struct AblationConfig {
  std::string name;
  ModelConfig model;
};

// Vision-prompt families added one at a time on top of the learned text
// contexts, then optional global-count and context-count sweeps of the full
// configuration.
inline std::vector<AblationConfig> ablation_configs(const ModelConfig& base,
                                                    const std::vector<std::size_t>& mv = {},
                                                    const std::vector<std::size_t>& mc = {}) {
  std::vector<AblationConfig> out;
  auto make = [&](const std::string& name, bool g, bool l, bool s) {
    ModelConfig c = base;
    c.enable_global = g;
    c.enable_local = l;
    c.enable_summary = s;
    out.push_back({name, c});
  };
  const std::string text = to_string(base.text_mode);
  make(text, false, false, false);
  make("+G", true, false, false);
  make("+G+L", true, true, false);
  make("+G+L+S", true, true, true);
  for (auto m : mv) {
    ModelConfig c = base;
    c.global_prompts = m;
    out.push_back({"mv=" + std::to_string(m), c});
  }
  for (auto m : mc) {
    ModelConfig c = base;
    c.text_contexts = m;
    out.push_back({"mc=" + std::to_string(m), c});
  }
  return out;
}

struct AblationRow {
  std::string config;
  std::uint64_t seed = 0;
  double top1 = 0.0;           // val split, learned contexts
  double zeroshot_top1 = 0.0;  // zero-shot split, manual prompts
};

inline AblationRow run_ablation_cell(const Dataset& ds, const AblationConfig& cfg,
                                     const TrainSchedule& sched, std::uint64_t seed) {
  TrainResult r = train_loop(ds, cfg.model, sched, seed);
  const Checkpoint& ck = r.checkpoint;
  AblationRow row{cfg.name, seed, 0.0, 0.0};
  auto learned = build_class_bank(ck.labels, ck.store, ck.config, ck.vocab, BankMode::Learned, ck.labels);
  row.top1 = evaluate(ds.val, ds.labels(), learned, ck.store, ck.config).top1;
  if (!ds.zeroshot.empty()) {
    auto manual = build_class_bank(ds.zeroshot_labels(), ck.store, ck.config, ck.vocab, BankMode::Manual);
    row.zeroshot_top1 = evaluate(ds.zeroshot, ds.labels(), manual, ck.store, ck.config).top1;
  }
  return row;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "config,seed,top1\n";
  char line[128];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%llu,%.6f\n", r.config.c_str(),
                  static_cast<unsigned long long>(r.seed), r.top1);
    out += line;
  }
  return out;
}

}  // namespace vclip
