#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "vision_support.hpp"
#include "vclip/rollout.hpp"

using namespace vclip;
namespace fs = std::filesystem;

namespace {

void expect_row_stochastic(const Tensor& m, double tol) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    for (double v : m.row(r)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, tol);
  }
}

}  // namespace

TEST(Rollout, FoldKeepsRowsStochastic) {
  Tensor a = Tensor::matrix(2, 4, {0.1, 0.3, 0.2, 0.4, 0.5, 0.0, 0.25, 0.25});
  Tensor f = fold_prompt_columns(a, 2);
  expect_row_stochastic(f, 1e-15);
  EXPECT_NEAR(f.at(0, 0), 0.25, 1e-15);  // 0.1 scaled by 1 / 0.4
  EXPECT_NEAR(f.at(1, 0), 1.0, 1e-15);
  Tensor only_prompts = Tensor::matrix(1, 3, {0.0, 0.5, 0.5});
  EXPECT_NEAR(fold_prompt_columns(only_prompts, 1).at(0, 0), 1.0, 1e-15);
  EXPECT_THROW(fold_prompt_columns(a, 3), DimensionError);
}

TEST(Rollout, PartialProductsAreRowStochastic) {
  std::mt19937_64 rng(51);
  for (bool prompts : {false, true}) {
    const ModelConfig c = support::small_vision(prompts);
    const auto s = init_model(c, 1);
    const auto [emb, trace] = encode_video(s, c, support::random_clip(c, rng));
    for (const auto& frame : rollout_products(trace, c))
      for (const auto& m : frame) expect_row_stochastic(m, 1e-10);
    const Heatmap hm = rollout(trace, c);
    EXPECT_FALSE(hm.degenerate);
    for (std::size_t t = 0; t < c.frames; ++t) {
      double sum = 0.0, mx = 0.0;
      for (std::size_t j = 0; j < c.patches_per_frame(); ++j) {
        sum += hm.attribution[t * c.patches_per_frame() + j];
        mx = std::max(mx, hm.values[t * c.patches_per_frame() + j]);
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
      EXPECT_DOUBLE_EQ(mx, 1.0);
    }
  }
}

TEST(Rollout, PromptsDisabledMatchesTextbookRollout) {
  std::mt19937_64 rng(52);
  const ModelConfig c = support::small_vision(false);
  const auto s = init_model(c, 2);
  const auto clip = support::random_clip(c, rng);
  std::vector<std::vector<oracle::Mat>> maps;
  oracle::vanilla_vit(s, c, clip.frames, &maps);
  const auto ref = oracle::textbook_rollout(maps);
  const Heatmap hm = rollout(encode_video(s, c, clip).second, c);
  const std::size_t N = c.patches_per_frame();
  for (std::size_t t = 0; t < c.frames; ++t)
    for (std::size_t j = 0; j < N; ++j) EXPECT_NEAR(hm.attribution[t * N + j], ref[t][j], 1e-10);
}

TEST(Rollout, MissingLayerIsAContractError) {
  std::mt19937_64 rng(53);
  const ModelConfig c = support::small_vision(true);
  auto [emb, trace] = encode_video(init_model(c, 3), c, support::random_clip(c, rng));
  trace.layers.pop_back();
  EXPECT_THROW(rollout(trace, c), ContractError);
}

TEST(Pgm, HeaderAndBytes) {
  const std::string p = encode_pgm({0, 128, 255, 7}, 2, 2);
  EXPECT_EQ(p, std::string("P5\n2 2\n255\n") + std::string("\x00\x80\xff\x07", 4));
  EXPECT_EQ(to_byte(-1.0), 0);
  EXPECT_EQ(to_byte(0.5), 128);
  EXPECT_EQ(to_byte(2.0), 255);
}

TEST(Pgm, EmitIsByteIdenticalAcrossRuns) {
  std::mt19937_64 rng(54);
  const ModelConfig c = support::small_vision(true);
  const auto s = init_model(c, 4);
  const auto clip = support::random_clip(c, rng);
  const fs::path a = fs::temp_directory_path() / "vclip_roll_a", b = fs::temp_directory_path() / "vclip_roll_b";
  fs::remove_all(a);
  fs::remove_all(b);
  emit_heatmap(rollout(encode_video(s, c, clip).second, c), clip, a);
  emit_heatmap(rollout(encode_video(s, c, clip).second, c), clip, b);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    EXPECT_EQ(detail::read_file(e.path()), detail::read_file(b / e.path().filename()));
  }
  EXPECT_EQ(files, 2 * c.frames + 1);
  const std::string heat = detail::read_file(a / "frame_00_heat.pgm");
  EXPECT_EQ(heat.substr(0, 11), "P5\n4 4\n255\n");
  EXPECT_EQ(heat.size(), 11u + 16u);
}
