#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vclip/config.hpp"
#include "vclip/data.hpp"
#include "vclip/layers.hpp"
#include "vclip/tensor.hpp"
#include "vclip/vision.hpp"

namespace vclip {

struct Heatmap {
  Tensor values;      // T × (H/P) × (W/P), per-frame max-normalized to [0, 1]
  Tensor attribution; // same shape, per-frame sums to one
  bool degenerate = false;
  std::vector<double> entropy;  // per frame, of the attribution
};

namespace detail {

// Ā = 0.5·A + 0.5·I on the square retained block, rows renormalized.
inline void mix_identity(Tensor& a) {
  const std::size_t n = a.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      a[i * n + j] = 0.5 * a[i * n + j] + (i == j ? 0.5 : 0.0);
      s += a[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] /= s;
  }
}

inline Tensor matmul_plain(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n}, 0.0);
  gemm_nn(a.data().data(), b.data().data(), c.data().data(), m, k, n);
  return c;
}

}  // namespace detail

// Head-averaged map of one layer and frame (retained × augmented columns)
// folded onto the retained columns: each row's mass on appended prompt
// columns is spread over its retained columns in proportion to their own
// mass, so the result stays row-stochastic.
inline Tensor fold_prompt_columns(const Tensor& head_avg, std::size_t retained) {
  const std::size_t cols = head_avg.dim(1);
  if (head_avg.dim(0) != retained || cols < retained) {
    throw DimensionError("attention map does not start with the retained block");
  }
  Tensor out({retained, retained});
  for (std::size_t i = 0; i < retained; ++i) {
    double kept = 0.0, total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      total += head_avg[i * cols + j];
      if (j < retained) kept += head_avg[i * cols + j];
    }
    for (std::size_t j = 0; j < retained; ++j) {
      out[i * retained + j] = kept > 0.0 ? head_avg[i * cols + j] * total / kept
                                         : total / static_cast<double>(retained);
    }
  }
  return out;
}

// Per-frame propagated matrices, later layers on the left. Exposed so tests
// can check row-stochasticity of every partial product.
inline std::vector<std::vector<Tensor>> rollout_products(const AttentionTrace& trace,
                                                         const ModelConfig& c) {
  if (trace.layers.size() != c.vision_layers) {
    throw ContractError("trace covers " + std::to_string(trace.layers.size()) + " of " +
                        std::to_string(c.vision_layers) + " layers");
  }
  const std::size_t R = trace.retained;
  std::vector<std::vector<Tensor>> products(c.frames);
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    if (trace.layers[l].size() != c.frames) throw ContractError("trace layer misses frames");
    for (std::size_t t = 0; t < c.frames; ++t) {
      Tensor a = fold_prompt_columns(head_mean(trace.layers[l][t]), R);
      detail::mix_identity(a);
      products[t].push_back(products[t].empty() ? a
                                                : detail::matmul_plain(a, products[t].back()));
    }
  }
  return products;
}

inline Heatmap rollout(const AttentionTrace& trace, const ModelConfig& c) {
  const std::size_t gh = c.height / c.patch, gw = c.width / c.patch, N = gh * gw;
  if (trace.retained != 1 + N) throw ContractError("trace width does not match config");
  const auto products = rollout_products(trace, c);
  Heatmap hm{Tensor({c.frames, gh, gw}), Tensor({c.frames, gh, gw}), false, {}};
  for (std::size_t t = 0; t < c.frames; ++t) {
    const Tensor& m = products[t].back();
    double total = 0.0;
    for (std::size_t j = 1; j <= N; ++j) total += m[j];  // CLS row, patch columns
    double* attr = hm.attribution.data().data() + t * N;
    if (!(total > 0.0)) {
      hm.degenerate = true;
      for (std::size_t j = 0; j < N; ++j) attr[j] = 1.0 / static_cast<double>(N);
    } else {
      for (std::size_t j = 0; j < N; ++j) attr[j] = m[j + 1] / total;
    }
    double mx = 0.0, h = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      mx = std::max(mx, attr[j]);
      if (attr[j] > 0.0) h -= attr[j] * std::log(attr[j]);
    }
    hm.entropy.push_back(h);
    for (std::size_t j = 0; j < N; ++j) hm.values[t * N + j] = attr[j] / mx;
  }
  return hm;
}

// Binary greymap, maxval 255.
inline std::string encode_pgm(const std::vector<std::uint8_t>& pixels, std::size_t h,
                              std::size_t w) {
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(pixels.begin(), pixels.end());
  return out;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// frame_XX_heat.pgm (nearest-neighbour upsampled heatmap) and frame_XX_raw.pgm
// (channel mean) per frame, plus rollout.json.
inline void emit_heatmap(const Heatmap& hm, const VideoClip& clip, const fs::path& out_dir) {
  const Tensor& f = clip.frames;
  const std::size_t T = f.dim(0), H = f.dim(1), W = f.dim(2), C = f.dim(3);
  if (hm.values.dim(0) != T || H % hm.values.dim(1) != 0 || W % hm.values.dim(2) != 0) {
    throw DimensionError("heatmap does not match the clip");
  }
  const std::size_t gh = hm.values.dim(1), gw = hm.values.dim(2), ph = H / gh, pw = W / gw;
  fs::create_directories(out_dir);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::uint8_t> heat(H * W), raw(H * W);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        heat[y * W + x] = to_byte(hm.values[(t * gh + y / ph) * gw + x / pw]);
        double s = 0.0;
        for (std::size_t ch = 0; ch < C; ++ch) s += f[((t * H + y) * W + x) * C + ch];
        raw[y * W + x] = to_byte(s / static_cast<double>(C));
      }
    char name[48];
    std::snprintf(name, sizeof name, "frame_%02zu_heat.pgm", t);
    detail::write_file(out_dir / name, encode_pgm(heat, H, W));
    std::snprintf(name, sizeof name, "frame_%02zu_raw.pgm", t);
    detail::write_file(out_dir / name, encode_pgm(raw, H, W));
  }
  nlohmann::json report = {{"degenerate", hm.degenerate}, {"per_frame_entropy", hm.entropy}};
  detail::write_file(out_dir / "rollout.json", report.dump(2) + "\n");
}

}  // namespace vclip
