#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vclip/graph.hpp"

namespace vclip {

inline constexpr double kGradCheckFloor = 1e-3;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
};

// Compares reverse-mode gradients of a scalar function against central
// differences. Error per input is ‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, floor),
// reported as the maximum over inputs. Central differences at h = 1e-5 carry
// about 1e-10 of rounding noise, so gradients with norm below the floor (a key
// bias under softmax is exactly zero) are compared in absolute terms.
inline GradCheckReport check_gradients(
    const std::function<Var(Graph&, const std::vector<Var>&)>& fn,
    const std::vector<Tensor>& inputs, double h = 1e-5, double floor = kGradCheckFloor) {
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Graph g;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(g.leaf(x, false));
    return fn(g, vars).value().item();
  };

  Graph g;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(g.leaf(x, true));
  Var out = fn(g, vars);
  g.backward(out);

  GradCheckReport report;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor analytic = g.grad(vars[i]).numel() ? g.grad(vars[i]) : Tensor(inputs[i].shape(), 0.0);
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      const double x0 = inputs[i][j];
      probe[i][j] = x0 + h;
      const double fp = evaluate(probe);
      probe[i][j] = x0 - h;
      const double fm = evaluate(probe);
      probe[i][j] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      diff2 += (analytic[j] - numeric) * (analytic[j] - numeric);
      a2 += analytic[j] * analytic[j];
      n2 += numeric * numeric;
    }
    const double rel = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), floor);
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_input = i;
    }
  }
  return report;
}

}  // namespace vclip
