// Acceptance run: one PASS/FAIL line per criterion. Optional arguments pick a
// subset of criteria by number, e.g. `acceptance 1 8`.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include "grad_cases.hpp"
#include "oracles.hpp"
#include "vision_support.hpp"
#include "vclip/ablation.hpp"
#include "vclip/rollout.hpp"
#include "vclip/train.hpp"

using namespace vclip;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::uint64_t kDataSeed = 7;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool bytes_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

const Dataset& default_dataset() {
  static const Dataset ds = generate_dataset(DatasetSpec{}, kDataSeed);
  return ds;
}

Outcome gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  for (const auto& op : gradcases::ops())
    for (int i = 0; i < 20; ++i) {
      auto c = op.make(rng);
      const double e = check_gradients(c.fn, c.inputs, 1e-5).max_rel_error;
      ++checks;
      if (e > worst) worst = e, worst_name = op.name;
    }
  bool frozen_grad = false;
  for (int i = 0; i < 20; ++i) {
    const auto r = gradcases::end_to_end(gradcases::random_config(rng), rng);
    ++checks;
    frozen_grad = frozen_grad || r.frozen_gradients;
    if (r.max_rel_error > worst) worst = r.max_rel_error, worst_name = "end-to-end loss (" + r.worst + ")";
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0 && !frozen_grad,
          fmt("%zu ops + end-to-end loss, %zu checks, max rel err %.2e (%s), %.1fs", gradcases::ops().size(),
              checks, worst, worst_name.c_str(), secs)};
}

Outcome freeze_contract() {
  const Dataset& ds = default_dataset();
  const ModelConfig c;
  const auto labels = ds.train_labels();
  const TrainContext ctx = make_train_context(c, Vocabulary::from_labels(ds.labels()), labels);
  const ParameterStore init = init_model(c, 1);
  ParameterStore s = init;
  TrainSchedule sched;
  OptimizerState st;
  Rng shuffle = named_stream(1, "shuffle");
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), shuffle);
  for (std::size_t step = 0; step < 50; ++step) {
    std::vector<const Sample*> batch;
    for (std::size_t i = 0; i < sched.batch_size; ++i)
      batch.push_back(&ds.train[order[(step * sched.batch_size + i) % order.size()]]);
    train_step(batch, s, ctx, sched, step, 50, st);
  }
  std::size_t frozen = 0, frozen_same = 0, prompts = 0, prompts_changed = 0;
  std::string offender;
  for (const auto& [name, e] : init.entries()) {
    const bool same = bytes_equal(e.value, s.value(name));
    if (e.frozen) {
      ++frozen;
      frozen_same += same;
      if (!same) offender = name;
    } else if (name.rfind("prompt.", 0) == 0) {
      ++prompts;
      prompts_changed += !same;
      if (same) offender = name;
    }
  }
  return {frozen == frozen_same && prompts == prompts_changed,
          fmt("50 steps: %zu/%zu frozen tensors byte-identical, %zu/%zu prompt tensors changed%s%s", frozen_same,
              frozen, prompts_changed, prompts, offender.empty() ? "" : ", offender ", offender.c_str())};
}

Outcome baseline_reduction() {
  std::mt19937_64 rng(3);
  double worst = 0.0;
  ModelConfig def;
  def.enable_global = def.enable_local = def.enable_summary = false;
  for (const ModelConfig& c : {def, support::small_vision(false)}) {
    for (int i = 0; i < 10; ++i) {
      const auto s = init_model(c, 100 + i);
      const auto clip = support::random_clip(c, rng);
      const auto emb = encode_video(s, c, clip).first;
      const auto ref = oracle::vanilla_vit(s, c, clip.frames);
      for (std::size_t k = 0; k < c.embed_dim; ++k) worst = std::max(worst, std::abs(emb[k] - ref[k]));
    }
  }
  return {worst < 1e-10, fmt("default and 4-patch configs, 10 clips each, max |diff| %.2e", worst)};
}

Outcome permutation_invariance() {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  ModelConfig multi = support::small_vision(true);
  multi.frames = 4;
  for (const ModelConfig& c : {ModelConfig{}, multi}) {
    for (int i = 0; i < 10; ++i) {
      const auto s = support::permutation_setup(c, 200 + i, rng);
      const auto clip = support::random_clip(c, rng);
      const auto base = encode_video(s, c, clip).first;
      std::vector<std::size_t> perm(c.frames);
      std::iota(perm.begin(), perm.end(), 0);
      for (int p = 0; p < 5; ++p) {
        std::shuffle(perm.begin(), perm.end(), rng);
        worst = std::max(worst, max_abs_diff(base, encode_video(s, c, support::permute_frames(clip, perm)).first));
      }
    }
  }
  return {worst < 1e-8, fmt("e_tm = 0, shared local vectors, 10 clips x 5 permutations per config, max |diff| %.2e",
                            worst)};
}

struct AblationResult {
  std::map<std::string, double> mean_top1;
  std::vector<double> zeroshot;
  double seconds = 0.0;
};

const AblationResult& ablation() {
  static const AblationResult result = [] {
    AblationResult r;
    const auto t0 = Clock::now();
    const Dataset& ds = default_dataset();
    const TrainSchedule sched;
    for (const auto& cfg : ablation_configs(ModelConfig{})) {
      double sum = 0.0;
      for (std::uint64_t seed : {1, 2, 3}) {
        const AblationRow row = run_ablation_cell(ds, cfg, sched, seed);
        std::printf("  ablation %-7s seed %llu: val top1 %.4f, zero-shot top1 %.4f (%.0fs)\n", cfg.name.c_str(),
                    static_cast<unsigned long long>(seed), row.top1, row.zeroshot_top1, seconds_since(t0));
        std::fflush(stdout);
        sum += row.top1;
        if (cfg.name == "+G+L+S") r.zeroshot.push_back(row.zeroshot_top1);
      }
      r.mean_top1[cfg.name] = sum / 3.0;
    }
    r.seconds = seconds_since(t0);
    return r;
  }();
  return result;
}

Outcome ablation_ordering() {
  const auto& r = ablation();
  const double csc = r.mean_top1.at("CSC"), g = r.mean_top1.at("+G"), gl = r.mean_top1.at("+G+L"),
               full = r.mean_top1.at("+G+L+S");
  const bool order = csc < g && g < gl && gl <= full;
  return {order && full >= 0.70 && csc <= 0.35 && r.seconds < 900.0,
          fmt("mean val top1 CSC %.4f, +G %.4f, +G+L %.4f, +G+L+S %.4f; ordering %s, full>=0.70 %s, "
              "CSC<=0.35 %s, %.0fs for 12 runs",
              csc, g, gl, full, order ? "holds" : "violated", full >= 0.70 ? "yes" : "no",
              csc <= 0.35 ? "yes" : "no", r.seconds)};
}

Outcome zero_shot() {
  const auto& z = ablation().zeroshot;
  const double mean = std::accumulate(z.begin(), z.end(), 0.0) / static_cast<double>(z.size());
  return {mean > 0.375, fmt("manual-prompt top1 on 4 held-out classes per seed %.4f %.4f %.4f, mean %.4f (need > 0.375)",
                            z[0], z[1], z[2], mean)};
}

Outcome parameter_accounting() {
  std::mt19937_64 rng(7);
  std::size_t ok = 0;
  for (int i = 0; i < 50; ++i) {
    const auto c = gradcases::random_config(rng);
    ok += count_trainable(init_model(c, i)) == expected_trainable(c);
  }
  ModelConfig b;
  b.vision_layers = 12;
  b.vision_width = 768;
  b.vision_heads = 12;
  b.frames = 8;
  b.height = b.width = 224;
  b.patch = 16;
  b.channels = 3;
  b.embed_dim = 512;
  b.global_prompts = 8;
  b.text_contexts = 8;
  b.text_width = 512;
  b.text_heads = 8;
  b.text_layers = 12;
  b.context_length = 77;
  b.vocab_size = 49408;
  b.num_classes = 400;
  b.text_mode = TextMode::ClassSpecific;
  // Summed from the layout rather than allocated: the frozen B/16 backbone
  // would need over a gigabyte of doubles.
  std::size_t from_layout = 0;
  for (const auto& spec : parameter_layout(b))
    if (!spec.frozen) from_layout += shape_numel(spec.shape);
  const double rel = (static_cast<double>(from_layout) - 38.88e6) / 38.88e6;
  return {ok == 50 && from_layout == expected_trainable(b) && std::abs(rel) <= 0.10,
          fmt("%zu/50 random configs exact; B/16-shaped count %zu (%+.1f%% vs 38.88M)", ok, from_layout, 100 * rel)};
}

Outcome loss_sanity() {
  std::mt19937_64 rng(8);
  double ln_err = 0.0, min_loss = 1e300, cos_min = 1.0, cos_max = -1.0, scale_err = 0.0;
  for (std::size_t b = 1; b <= 32; ++b) {
    std::vector<std::size_t> targets(b);
    std::iota(targets.begin(), targets.end(), 0);
    Graph g;
    ln_err = std::max(ln_err, std::abs(contrastive_loss(g.constant(Tensor({b, b}, 3.25)), targets).total.value().item() -
                                       std::log(static_cast<double>(b))));
  }
  std::uniform_real_distribution<double> k(1e-3, 1e3);
  for (int i = 0; i < 500; ++i) {
    const std::size_t b = 1 + rng() % 8, n = 1 + rng() % 8;
    std::vector<std::size_t> targets(b);
    for (auto& t : targets) t = rng() % n;
    Graph g;
    min_loss = std::min(min_loss, contrastive_loss(g.constant(oracle::random_tensor({b, n}, rng, 10.0)), targets)
                                      .total.value()
                                      .item());
    Tensor x = oracle::random_tensor({16}, rng), y = oracle::random_tensor({16}, rng);
    const double c = cosine_sim(x, y);
    cos_min = std::min(cos_min, c);
    cos_max = std::max(cos_max, c);
    const double self = cosine_sim(x, x);
    cos_max = std::max(cos_max, self);
    Tensor xs = x, ys = y;
    const double kx = k(rng), ky = k(rng);
    for (auto& v : xs.data()) v *= kx;
    for (auto& v : ys.data()) v *= ky;
    scale_err = std::max(scale_err, std::abs(cosine_sim(xs, ys) - c));
  }
  return {ln_err < 1e-12 && min_loss >= 0.0 && cos_min >= -1.0 && cos_max <= 1.0 && scale_err < 1e-12,
          fmt("|L_uniform - ln B| max %.1e (B=1..32), min loss %.3e, cos in [%.6f, %.6f], scale err %.1e", ln_err,
              min_loss, cos_min, cos_max, scale_err)};
}

Outcome rollout_checks() {
  std::mt19937_64 rng(9);
  double row_err = 0.0, oracle_err = 0.0;
  ModelConfig def;
  for (const ModelConfig& c : {def, support::small_vision(true), support::small_vision(false)}) {
    for (int i = 0; i < 5; ++i) {
      const auto s = support::permutation_setup(c, 300 + i, rng);
      const auto trace = encode_video(s, c, support::random_clip(c, rng)).second;
      for (const auto& frame : rollout_products(trace, c))
        for (const auto& m : frame)
          for (std::size_t r = 0; r < m.rows(); ++r) {
            double sum = 0.0;
            for (double v : m.row(r)) sum += v;
            row_err = std::max(row_err, std::abs(sum - 1.0));
          }
    }
  }
  const ModelConfig off = support::small_vision(false);
  for (int i = 0; i < 5; ++i) {
    const auto s = init_model(off, 400 + i);
    const auto clip = support::random_clip(off, rng);
    std::vector<std::vector<oracle::Mat>> maps;
    oracle::vanilla_vit(s, off, clip.frames, &maps);
    const auto ref = oracle::textbook_rollout(maps);
    const Heatmap hm = rollout(encode_video(s, off, clip).second, off);
    for (std::size_t t = 0; t < off.frames; ++t)
      for (std::size_t j = 0; j < off.patches_per_frame(); ++j)
        oracle_err = std::max(oracle_err, std::abs(hm.attribution[t * off.patches_per_frame() + j] - ref[t][j]));
  }
  const ModelConfig on = support::small_vision(true);
  const auto s = init_model(on, 5);
  const auto clip = support::random_clip(on, rng);
  const fs::path a = fs::temp_directory_path() / "vclip_accept_roll_a";
  const fs::path b = fs::temp_directory_path() / "vclip_accept_roll_b";
  fs::remove_all(a);
  fs::remove_all(b);
  emit_heatmap(rollout(encode_video(s, on, clip).second, on), clip, a);
  emit_heatmap(rollout(encode_video(s, on, clip).second, on), clip, b);
  bool same = true;
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    same = same && fs::exists(b / e.path().filename()) &&
           detail::read_file(e.path()) == detail::read_file(b / e.path().filename());
  }
  return {row_err < 1e-10 && oracle_err < 1e-10 && same && files > 0,
          fmt("row-sum err %.1e, textbook oracle err %.1e, %zu output files %s across reruns", row_err, oracle_err,
              files, same ? "byte-identical" : "DIFFER")};
}

int run(const std::string& args) {
  const std::string cmd = std::string(VITACLIP_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "vclip_accept_det";
  fs::remove_all(root);
  for (const char* r : {"a", "b"}) {
    const fs::path d = root / r;
    const std::string seed = "--seed 11 ";
    if (run(seed + "gen --out " + (d / "data").string()) != 0 ||
        run(seed + "train --epochs 2 --data " + (d / "data").string() + " --out " + (d / "run").string()) != 0 ||
        run(seed + "eval --ckpt " + (d / "run/checkpoint").string() + " --data " + (d / "data").string() +
            " --out " + (d / "report.json").string()) != 0 ||
        run(seed + "rollout --ckpt " + (d / "run/checkpoint").string() + " --clip " +
            (d / "data/clips/val_00000.vclp").string() + " --out " + (d / "roll").string()) != 0) {
      return {false, std::string("pipeline failed in run ") + r};
    }
  }
  std::size_t compared = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    if (rel.begin()->string() == "data") continue;
    ++compared;
    const fs::path other = root / "b" / rel;
    if (!fs::exists(other) || detail::read_file(e.path()) != detail::read_file(other)) ++differ;
  }
  return {compared > 0 && differ == 0,
          fmt("gen -> train -> eval -> rollout twice: %zu artifacts (metrics, report, checkpoint, PGMs), %zu differ",
              compared, differ)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient verification", gradients},
      {"freeze contract", freeze_contract},
      {"baseline reduction", baseline_reduction},
      {"restricted permutation invariance", permutation_invariance},
      {"ablation ordering", ablation_ordering},
      {"zero-shot path", zero_shot},
      {"parameter accounting", parameter_accounting},
      {"loss sanity", loss_sanity},
      {"rollout", rollout_checks},
      {"end-to-end determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s [%d] %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
