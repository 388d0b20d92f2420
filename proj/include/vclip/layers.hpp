#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "vclip/graph.hpp"

namespace vclip {

// Projection weights of one multi-head self-attention block. Matrices are
// stored input-major (D_in × D_out) so a projection is x · W + b.
struct AttentionWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerNormWeights {
  Var gamma, beta;
};

struct FeedForwardWeights {
  Var w1, b1, w2, b2;
};

inline Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

inline Var apply(const LayerNormWeights& ln, Var x) { return layer_norm(x, ln.gamma, ln.beta); }

// Two-layer GELU MLP.
inline Var feed_forward(const FeedForwardWeights& w, Var x) {
  return linear(gelu(linear(x, w.w1, w.b1)), w.w2, w.b2);
}

struct MhsaResult {
  Var out;
  Tensor attn;  // heads × n × n, rows sum to one
};

// Standard multi-head self-attention over the rows of x.
inline MhsaResult mhsa(Var x, const AttentionWeights& w, std::size_t heads,
                       const std::vector<char>& key_mask = {}) {
  if (heads == 0 || x.value().cols() % heads != 0) {
    throw ConfigError("width " + std::to_string(x.value().cols()) +
                      " is not divisible by heads=" + std::to_string(heads));
  }
  Var q = linear(x, w.wq, w.bq);
  Var k = linear(x, w.wk, w.bk);
  Var v = linear(x, w.wv, w.bv);
  Var a = attention(q, k, v, heads, key_mask);
  return {linear(a, w.wo, w.bo), attention_probs(a)};
}

// Mean over heads of a heads×n×m probability tensor.
inline Tensor head_mean(const Tensor& probs) {
  const std::size_t heads = probs.dim(0), n = probs.dim(1), m = probs.dim(2);
  Tensor out({n, m}, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n * m; ++i) out[i] += probs[h * n * m + i];
  for (auto& v : out.data()) v /= static_cast<double>(heads);
  return out;
}

}  // namespace vclip
