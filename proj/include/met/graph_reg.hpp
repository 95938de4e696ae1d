#pragma once

// Intra/inter-class similarity graphs built from detached last-exit logits,
// and the distance penalties they weight on early-exit representations.

#include <algorithm>
#include <cmath>
#include <iostream>
#include <span>
#include <vector>

#include "met/ops.hpp"

namespace met {

struct SimilarityGraphs {
  std::size_t samples = 0;
  std::vector<double> intra;  // samples × samples
  std::vector<double> inter;  // samples × samples
  std::size_t intra_pairs = 0;
  std::size_t inter_pairs = 0;
  std::vector<int> labels;
  std::size_t degenerate_rows = 0;  // zero logit rows, similarity forced to 0
};

/// Cosine similarities of `logits` rows over same-class (intra) and
/// different-class (inter) ordered pairs i ≠ j. Pair counts are the sizes of
/// those pair sets. A zero logit row gets similarity 0 with everything.
inline SimilarityGraphs build_graphs(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = labels.size();
  if (n == 0) throw DataError("build_graphs: empty batch");
  if (logits.rows() != n)
    throw DimensionError("build_graphs: " + std::to_string(logits.rows()) + " logit rows for " +
                         std::to_string(n) + " labels");
  const std::size_t c = logits.cols();
  auto row = [&](std::size_t i) { return logits.data().subspan(i * c, c); };
  std::vector<bool> degenerate(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : row(i)) s += v * v;
    degenerate[i] = s == 0.0;
  }
  const auto zero_rows = static_cast<std::size_t>(std::count(degenerate.begin(), degenerate.end(), true));
  if (zero_rows > 0)
    std::cerr << "warning: " << zero_rows << " of " << n
              << " logit rows are zero; their graph similarities are set to 0\n";

  SimilarityGraphs g;
  g.samples = n;
  g.intra.assign(n * n, 0.0);
  g.inter.assign(n * n, 0.0);
  g.labels.assign(labels.begin(), labels.end());
  g.degenerate_rows = zero_rows;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const bool same = labels[i] == labels[j];
      (same ? g.intra_pairs : g.inter_pairs) += 1;
      if (j < i) continue;
      const double sim = (degenerate[i] || degenerate[j]) ? 0.0 : cosine_sim(row(i), row(j));
      auto& m = same ? g.intra : g.inter;
      m[i * n + j] = sim;
      m[j * n + i] = sim;
    }
  return g;
}

inline constexpr double kDistanceGuard = 1e-12;

/// Σ_ij sqrt(‖x_i − x_j‖² + guard) · weights[i,j].
inline Tensor weighted_distance_sum(const Tensor& reps, const std::vector<double>& weights) {
  const std::size_t n = reps.rows(), d = reps.cols();
  if (weights.size() != n * n)
    throw DimensionError("weighted_distance_sum: " + std::to_string(n) + " rows vs " +
                         std::to_string(weights.size()) + " weights");
  auto x = reps.data();
  std::vector<double> dist(n * n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (weights[i * n + j] == 0.0) continue;
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = x[i * d + t] - x[j * d + t];
        s += diff * diff;
      }
      dist[i * n + j] = std::sqrt(s + kDistanceGuard);
      total += dist[i * n + j] * weights[i * n + j];
    }
  return detail::make_result(
      {1}, {total}, "weighted_distance_sum", {reps},
      [n, d, w = weights, dist = std::move(dist)](detail::Node& o) {
        auto& xn = *o.inputs[0];
        const double g = o.grad[0];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double wij = w[i * n + j];
            if (wij == 0.0) continue;
            const double coef = g * wij / dist[i * n + j];
            for (std::size_t t = 0; t < d; ++t) {
              const double diff = xn.value[i * d + t] - xn.value[j * d + t];
              xn.grad[i * d + t] += coef * diff;
              xn.grad[j * d + t] -= coef * diff;
            }
          }
      });
}

inline void check_graph_rows(const Tensor& reps, const SimilarityGraphs& g) {
  if (reps.rows() != g.samples)
    throw DimensionError("representations have " + std::to_string(reps.rows()) +
                         " rows, graphs cover " + std::to_string(g.samples));
}

/// Intra-class compactness (unnormalized).
inline Tensor compactness(const Tensor& reps, const SimilarityGraphs& g) {
  check_graph_rows(reps, g);
  return weighted_distance_sum(reps, g.intra);
}

/// Inter-class separability (unnormalized).
inline Tensor separability(const Tensor& reps, const SimilarityGraphs& g) {
  check_graph_rows(reps, g);
  return weighted_distance_sum(reps, g.inter);
}

/// compactness/N_intra − separability/N_inter, dropping a term whose pair count is 0.
inline Tensor normalized_graph_term(const Tensor& reps, const SimilarityGraphs& g) {
  Tensor term = Tensor::scalar(0.0);
  if (g.intra_pairs > 0)
    term = add(term, scale(compactness(reps, g), 1.0 / static_cast<double>(g.intra_pairs)));
  if (g.inter_pairs > 0)
    term = sub(term, scale(separability(reps, g), 1.0 / static_cast<double>(g.inter_pairs)));
  return term;
}

struct GraphPenalty {
  Tensor value;                // α · Σ terms
  std::vector<double> terms;   // unscaled term per early exit
};

/// α · Σ over early exits of the normalized graph term. `early_reps` holds
/// exits 1..E−1; it is empty for a single-exit model.
inline GraphPenalty graph_penalty(std::span<const Tensor> early_reps, const SimilarityGraphs& g,
                                  double alpha) {
  if (alpha < 0.0) throw ConfigError("graph penalty weight must be non-negative");
  GraphPenalty out{Tensor::scalar(0.0), {}};
  if (early_reps.empty()) return out;
  Tensor acc;
  for (const auto& reps : early_reps) {
    auto t = normalized_graph_term(reps, g);
    out.terms.push_back(t.item());
    acc = acc.defined() ? add(acc, t) : t;
  }
  out.value = scale(acc, alpha);
  return out;
}

}  // namespace met
