#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

#include "vclip/data.hpp"
#include "vclip/text.hpp"

using namespace vclip;
namespace fs = std::filesystem;

namespace {

DatasetSpec small_spec() {
  DatasetSpec s;
  s.train_per_class = 3;
  s.val_per_class = 2;
  s.zeroshot_per_class = 2;
  return s;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("vclip_data_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(ClipFormat, RoundTrip) {
  Tensor f({2, 3, 4, 1});
  for (std::size_t i = 0; i < f.numel(); ++i) f[i] = static_cast<float>(i * 0.01);
  const std::string bytes = encode_clip(f);
  EXPECT_EQ(bytes.substr(0, 4), "VCLP");
  EXPECT_EQ(bytes.size(), 4 + 4 + 16 + f.numel() * 4);
  EXPECT_EQ(decode_clip(bytes), f);
}

TEST(ClipFormat, Errors) {
  const std::string good = encode_clip(Tensor({1, 2, 2, 1}, 0.5));
  std::string b = good;
  b[0] = 'X';
  EXPECT_THROW(decode_clip(b), FormatError);
  b = good;
  b[4] = 2;
  EXPECT_THROW(decode_clip(b), FormatError);
  EXPECT_THROW(decode_clip(good.substr(0, good.size() - 1)), TruncationError);
  EXPECT_THROW(decode_clip(good.substr(0, 10)), TruncationError);
  EXPECT_THROW(decode_clip(good + "x"), FormatError);
  b = good;
  b[8] = 0;  // T = 0
  EXPECT_THROW(decode_clip(b), ShapeError);
  b = good;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(b.data() + 24, &nan, 4);
  EXPECT_THROW(decode_clip(b), FormatError);
  EXPECT_THROW(read_clip(scratch("nothing") / "x.vclp"), MissingArtifact);
}

TEST(Classes, DefaultLayout) {
  const auto cls = motion_classes(DatasetSpec{});
  ASSERT_EQ(cls.size(), 12u);
  std::set<std::string> labels;
  for (const auto& c : cls) labels.insert(c.label);
  EXPECT_EQ(labels.size(), 12u);
  // Zero-shot labels are new combinations of words seen in training.
  std::set<std::string> train_words;
  for (std::size_t i = 0; i < 8; ++i)
    for (const auto& w : Vocabulary::split_words(cls[i].label)) train_words.insert(w);
  for (std::size_t i = 8; i < 12; ++i)
    for (const auto& w : Vocabulary::split_words(cls[i].label)) EXPECT_TRUE(train_words.count(w)) << w;
  EXPECT_EQ(cls[8].label, "move left slow");
  EXPECT_EQ(cls[9].label, "move right medium");
}

TEST(Classes, SpecErrors) {
  DatasetSpec s;
  s.train_classes = 12;
  EXPECT_THROW(motion_classes(s), SpecError);
  s = DatasetSpec{};
  s.speeds = 4;
  EXPECT_THROW(motion_classes(s), SpecError);
  s = DatasetSpec{};
  s.width = s.height = 4;  // fast right (+3) aliases slow left (-1)
  EXPECT_THROW(motion_classes(s), SpecError);
  s = DatasetSpec{};
  s.sprite = 9;
  EXPECT_THROW(validate(s), SpecError);
  EXPECT_THROW(nlohmann::json({{"spritez", 2}}).get<DatasetSpec>(), ConfigError);
}

TEST(Render, SpriteMovesWithClassVelocity) {
  DatasetSpec s;
  s.noise = 0.0;
  const auto cls = motion_classes(s);
  Rng rng = named_stream(1, "t");
  for (const auto& c : cls) {
    const auto clip = render_clip(s, c, rng);
    const Tensor& f = clip.frames;
    std::size_t x0 = 0, y0 = 0;
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x)
        if (f[(y * 8 + x)] == 1.0 && f[(((y + 7) % 8) * 8 + x)] == 0.0 && f[(y * 8 + (x + 7) % 8)] == 0.0)
          x0 = x, y0 = y;
    for (std::size_t t = 0; t < s.frames; ++t) {
      const long x = ((static_cast<long>(x0) + c.dx * static_cast<long>(t)) % 8 + 8) % 8;
      const long y = ((static_cast<long>(y0) + c.dy * static_cast<long>(t)) % 8 + 8) % 8;
      EXPECT_EQ(f[(t * 8 + y) * 8 + x], 1.0) << c.label << " t=" << t;
    }
    double lit = 0.0;
    for (double v : f.data()) lit += v;
    EXPECT_EQ(lit, 9.0 * s.frames);
  }
}

TEST(Dataset, DeterministicAndSeedSensitive) {
  const auto a = generate_dataset(small_spec(), 3), b = generate_dataset(small_spec(), 3);
  const auto c = generate_dataset(small_spec(), 4);
  ASSERT_EQ(a.train.size(), 24u);
  EXPECT_EQ(a.val.size(), 16u);
  EXPECT_EQ(a.zeroshot.size(), 8u);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].clip.frames, b.train[i].clip.frames);
  EXPECT_FALSE(a.train[0].clip.frames == c.train[0].clip.frames);
  for (const auto& s : a.zeroshot) EXPECT_GE(s.label, 8u);
  for (const auto& s : a.train) {
    for (double v : s.clip.frames.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
    }
  }
}

TEST(Dataset, WriteLoadRoundTrip) {
  const auto ds = generate_dataset(small_spec(), 5);
  const auto dir = scratch("rt");
  write_dataset(ds, dir);
  const auto back = load_dataset(dir);
  EXPECT_EQ(back.labels(), ds.labels());
  EXPECT_EQ(back.seed, 5u);
  ASSERT_EQ(back.val.size(), ds.val.size());
  for (std::size_t i = 0; i < ds.val.size(); ++i) {
    EXPECT_EQ(back.val[i].clip.frames, ds.val[i].clip.frames);
    EXPECT_EQ(back.val[i].label, ds.val[i].label);
  }
  fs::remove(dir / ds.val[0].file);
  EXPECT_THROW(load_dataset(dir), MissingArtifact);
  EXPECT_THROW(load_dataset(scratch("none")), MissingArtifact);
}

TEST(Dataset, SingleFrameProbeStaysAtChance) {
  // Softmax regression on the first frame alone: the sprite start is uniform,
  // so without motion there is nothing to learn. Val accuracy must stay under
  // chance + 4 binomial standard deviations.
  DatasetSpec spec;
  spec.train_per_class = 100;
  const auto ds = generate_dataset(spec, 9);
  const std::size_t F = 64, K = 8;
  std::vector<double> w(F * K, 0.0), b(K, 0.0);
  auto scores = [&](const Sample& s) {
    std::vector<double> z(b);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t f = 0; f < F; ++f) z[k] += w[k * F + f] * s.clip.frames[f];
    return z;
  };
  for (int epoch = 0; epoch < 60; ++epoch)
    for (const auto& s : ds.train) {
      auto z = scores(s);
      double mx = *std::max_element(z.begin(), z.end()), sum = 0.0;
      for (auto& v : z) sum += v = std::exp(v - mx);
      for (std::size_t k = 0; k < K; ++k) {
        const double gk = z[k] / sum - (k == s.label ? 1.0 : 0.0);
        b[k] -= 0.05 * gk;
        for (std::size_t f = 0; f < F; ++f) w[k * F + f] -= 0.05 * gk * s.clip.frames[f];
      }
    }
  std::size_t hits = 0;
  for (const auto& s : ds.val) {
    auto z = scores(s);
    if (static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin()) == s.label) ++hits;
  }
  const double n = static_cast<double>(ds.val.size()), p = 1.0 / K;
  EXPECT_LT(hits / n, p + 4.0 * std::sqrt(p * (1 - p) / n));
}
