#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "vclip/graph.hpp"
#include "vclip/tensor.hpp"

namespace vclip {

inline double cosine_sim(std::span<const double> v, std::span<const double> c) {
  if (v.size() != c.size()) throw DimensionError("cosine_sim length mismatch");
  double dot = 0.0, nv = 0.0, nc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    dot += v[i] * c[i];
    nv += v[i] * v[i];
    nc += c[i] * c[i];
  }
  if (nv == 0.0 || nc == 0.0) throw DegenerateInputError("cosine_sim of a zero vector");
  // Clamp the rounding overshoot so the bound holds exactly.
  return std::clamp(dot / (std::sqrt(nv) * std::sqrt(nc)), -1.0, 1.0);
}

inline double cosine_sim(const Tensor& v, const Tensor& c) { return cosine_sim(v.data(), c.data()); }

// Differentiable scalar cosine similarity of two equal-shape tensors.
inline Var cosine_sim(Var v, Var c) {
  Var a = normalize_rows(reshape(v, {1, v.value().numel()}));
  Var b = normalize_rows(reshape(c, {1, c.value().numel()}));
  return matmul_nt(a, b);
}

// Entry (i, j) = exp(logit_scale) · cos(v_i, c_j).
inline Var similarity_matrix(Var videos, Var texts, Var logit_scale) {
  Var cos = matmul_nt(normalize_rows(videos), normalize_rows(texts));
  return mul_scalar(cos, exp(logit_scale));
}

struct SimilarityMatrix {
  Tensor values;
  bool scaled = false;
  double logit_scale = 0.0;
};

inline SimilarityMatrix similarity_matrix(const Tensor& videos, const Tensor& texts,
                                          std::optional<double> logit_scale = std::nullopt) {
  const std::size_t bv = videos.rows(), bc = texts.rows(), d = videos.cols();
  if (texts.cols() != d) throw DimensionError("similarity_matrix width mismatch");
  SimilarityMatrix s{Tensor({bv, bc}), logit_scale.has_value(), logit_scale.value_or(0.0)};
  const double m = logit_scale ? std::exp(*logit_scale) : 1.0;
  for (std::size_t i = 0; i < bv; ++i)
    for (std::size_t j = 0; j < bc; ++j) {
      s.values[i * bc + j] =
          m * cosine_sim(std::span<const double>(videos.data().data() + i * d, d),
                         std::span<const double>(texts.data().data() + j * d, d));
    }
  return s;
}

struct LossTerms {
  Var total;
  Var video_to_text;
  std::optional<Var> text_to_video;  // absent when no column has a positive
};

// Symmetric softmax cross-entropy. Row i's target is column targets[i]; the
// column term runs over columns that are the target of at least one row, each
// spreading its target mass uniformly over those rows.
inline LossTerms contrastive_loss(Var logits, const std::vector<std::size_t>& targets) {
  const std::size_t rows = logits.value().rows(), cols = logits.value().cols();
  if (targets.size() != rows) throw ContractError("one target per video is required");
  Tensor row_w({rows, cols}, 0.0);
  std::vector<std::size_t> positives(cols, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    if (targets[i] >= cols) {
      throw ContractError("target " + std::to_string(targets[i]) + " out of range for " +
                          std::to_string(cols) + " texts");
    }
    row_w[i * cols + targets[i]] = 1.0;
    ++positives[targets[i]];
  }
  LossTerms out;
  out.video_to_text = soft_cross_entropy(logits, row_w);

  std::vector<std::size_t> used;
  for (std::size_t j = 0; j < cols; ++j)
    if (positives[j]) used.push_back(j);
  if (used.empty()) {
    out.total = out.video_to_text;
    return out;
  }
  Tensor col_w({used.size(), rows}, 0.0);
  for (std::size_t k = 0; k < used.size(); ++k)
    for (std::size_t i = 0; i < rows; ++i)
      if (targets[i] == used[k]) col_w[k * rows + i] = 1.0 / static_cast<double>(positives[used[k]]);
  out.text_to_video = soft_cross_entropy(gather_rows(transpose(logits), used), col_w);
  out.total = scale(add(out.video_to_text, *out.text_to_video), 0.5);
  return out;
}

}  // namespace vclip
