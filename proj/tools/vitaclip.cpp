// vitaclip: gen | train | eval | ablate | rollout
//
// Exit codes: 0 ok, 2 config/spec, 3 divergence, 4 missing artifact,
// 5 corrupt input, 1 anything else.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vclip/ablation.hpp"
#include "vclip/checkpoint.hpp"
#include "vclip/data.hpp"
#include "vclip/eval.hpp"
#include "vclip/rollout.hpp"
#include "vclip/train.hpp"

namespace fs = std::filesystem;
using namespace vclip;

namespace {

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetSpec data;
  ModelConfig model;
  TrainSchedule train;
};

RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  if (!fs::exists(path)) throw MissingArtifact("config file " + path + " not found");
  nlohmann::json j;
  try {
    std::ifstream in(path);
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known = {"seed", "data", "model", "train"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  try {
    if (j.contains("seed")) rc.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("seed: ") + e.what());
  }
  if (j.contains("data")) rc.data = j.at("data").get<DatasetSpec>();
  if (j.contains("model")) rc.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) rc.train = j.at("train").get<TrainSchedule>();
  return rc;
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad list entry '" + item + "'");
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

// The model must see clips of the dataset's shape and one context set per
// training class.
void check_compatible(const ModelConfig& m, const Dataset& ds) {
  const auto& s = ds.spec;
  if (m.frames != s.frames || m.height != s.height || m.width != s.width ||
      m.channels != s.channels) {
    throw ConfigError("model clip shape does not match the dataset");
  }
  if (m.num_classes != s.train_classes) {
    throw ConfigError("model num_classes " + std::to_string(m.num_classes) +
                      " does not match the dataset's " + std::to_string(s.train_classes) +
                      " training classes");
  }
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const SpecError*>(&e) ||
      dynamic_cast<const InputTooLongError*>(&e) || dynamic_cast<const DuplicateLabelError*>(&e)) {
    return 2;
  }
  if (dynamic_cast<const TrainingDiverged*>(&e)) return 3;
  if (dynamic_cast<const MissingArtifact*>(&e)) return 4;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
      dynamic_cast<const TruncationError*>(&e) || dynamic_cast<const ManifestError*>(&e) ||
      dynamic_cast<const ShapeMismatchError*>(&e)) {
    return 5;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompted video-text model on synthetic motion clips"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "run config JSON (seed, data, model, train)");
  app.add_option("--seed", seed, "overrides the config seed");

  std::string out, data_dir, ckpt, split = "val", mode = "learned", clip_path, report_path;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr;
  std::string seeds = "1,2,3", mv, mc;

  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  gen->add_option("--out", out, "dataset directory")->required();

  auto add_train_flags = [&](CLI::App* cmd) {
    cmd->add_option("--data", data_dir, "dataset directory")->required();
    cmd->add_option("--out", out, "output directory")->required();
    cmd->add_option("--epochs", epochs);
    cmd->add_option("--lr", lr, "initial learning rate");
    cmd->add_option("--batch-size", batch_size);
  };
  auto* train = app.add_subcommand("train", "train prompts, write checkpoint + metrics.csv");
  add_train_flags(train);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "val", "zeroshot"}));
  eval->add_option("--mode", mode)->check(CLI::IsMember({"learned", "manual"}));
  eval->add_option("--out", report_path, "report JSON path");

  auto* ablate = app.add_subcommand("ablate", "prompt-family ablation, writes ablation.csv");
  add_train_flags(ablate);
  ablate->add_option("--seeds", seeds, "comma-separated training seeds");
  ablate->add_option("--mv", mv, "extra global-prompt counts, e.g. 2,4,8");
  ablate->add_option("--mc", mc, "extra text-context counts");

  auto* roll = app.add_subcommand("rollout", "attention rollout heatmaps for one clip");
  roll->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  roll->add_option("--clip", clip_path, "clip file")->required();
  roll->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    RunConfig rc = load_run_config(config_path);
    if (seed) rc.seed = *seed;
    if (epochs) rc.train.epochs = *epochs;
    if (lr) rc.train.initial_lr = *lr;
    if (batch_size) rc.train.batch_size = *batch_size;

    if (*gen) {
      Dataset ds = generate_dataset(rc.data, rc.seed);
      write_dataset(ds, out);
      std::cout << "wrote " << ds.train.size() << " train, " << ds.val.size() << " val, "
                << ds.zeroshot.size() << " zero-shot clips to " << out << "\n";
    } else if (*train) {
      rc.model.validate();
      Dataset ds = load_dataset(data_dir);
      check_compatible(rc.model, ds);
      TrainResult r = train_loop(ds, rc.model, rc.train, rc.seed, [](const EpochMetrics& m) {
        std::cerr << "epoch " << m.epoch << " loss " << m.loss << " top1_train " << m.top1_train
                  << "\n";
      });
      save_checkpoint(r.checkpoint, fs::path(out) / "checkpoint");
      write_text(fs::path(out) / "metrics.csv", metrics_csv(r.metrics));
      const double top1 = r.metrics.empty() ? 0.0 : r.metrics.back().top1_train;
      std::cout << "final top1_train " << top1 << "\n";
    } else if (*eval) {
      Checkpoint ck = load_checkpoint(ckpt);
      Dataset ds = load_dataset(data_dir);
      const BankMode bm = parse_bank_mode(mode);
      const auto& samples = ds.split(split);
      if (samples.empty()) throw ConfigError("split '" + split + "' is empty");
      std::set<std::string> names;
      for (const auto& s : samples) names.insert(ds.labels().at(s.label));
      // Bank over every class of the split, in dataset label order.
      std::vector<std::string> bank_labels;
      for (const auto& l : ds.labels())
        if (names.count(l)) bank_labels.push_back(l);
      auto bank = build_class_bank(bank_labels, ck.store, ck.config, ck.vocab, bm, ck.labels);
      EvalReport rep = evaluate(samples, ds.labels(), bank, ck.store, ck.config);
      const std::string text = to_json(rep).dump(2) + "\n";
      if (!report_path.empty()) write_text(report_path, text);
      std::cout << text;
    } else if (*ablate) {
      rc.model.validate();
      Dataset ds = load_dataset(data_dir);
      check_compatible(rc.model, ds);
      std::vector<AblationRow> rows;
      for (const auto& cfg : ablation_configs(rc.model, parse_list(mv), parse_list(mc))) {
        for (auto s : parse_list(seeds)) {
          rows.push_back(run_ablation_cell(ds, cfg, rc.train, s));
          std::cerr << cfg.name << " seed " << s << " top1 " << rows.back().top1
                    << " zeroshot " << rows.back().zeroshot_top1 << "\n";
        }
      }
      write_text(fs::path(out) / "ablation.csv", ablation_csv(rows));
      std::cout << ablation_csv(rows);
    } else if (*roll) {
      Checkpoint ck = load_checkpoint(ckpt);
      VideoClip clip = read_clip(clip_path);
      try {
        check_clip(clip, ck.config);
      } catch (const DimensionError& e) {
        throw FormatError(e.what());
      }
      auto [embedding, trace] = encode_video(ck.store, ck.config, clip);
      Heatmap hm = rollout(trace, ck.config);
      emit_heatmap(hm, clip, out);
      std::cout << "wrote " << ck.config.frames << " heat + raw frames to " << out
                << (hm.degenerate ? " (degenerate)" : "") << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  }
  return 0;
}
