#pragma once

// Anytime and budgeted early-exit inference with an exact matmul MAC model.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "met/multi_exit.hpp"
#include "met/parallel.hpp"
#include "met/trainer.hpp"

namespace met {

// ---------------------------------------------------------------- cost model

/// Matmul MACs per component, in mega-MACs (1 MAC counted as 1 FLOP).
struct CostBreakdown {
  double patch_embed = 0.0;
  double attention = 0.0;
  double ffn = 0.0;
  double adapters = 0.0;
  double heads = 0.0;

  double total() const { return patch_embed + attention + ffn + adapters + heads; }
};

/// Cumulative cost of running through exit e (index e−1).
struct CostTable {
  std::vector<CostBreakdown> per_exit;

  std::size_t exits() const { return per_exit.size(); }
  double cost(int e) const { return per_exit.at(static_cast<std::size_t>(e - 1)).total(); }
  std::vector<double> totals() const {
    std::vector<double> out;
    for (const auto& b : per_exit) out.push_back(b.total());
    return out;
  }
};

/// What the executed graph contains besides the backbone.
struct CostModelConfig {
  int dprime = 0;             // 0 → no adapters
  bool share_token = false;   // single class-token stream
};

namespace detail {

inline constexpr double kMega = 1e6;

struct LayerMacs {
  double attention = 0.0, ffn = 0.0, adapters = 0.0;
};

inline LayerMacs layer_macs(double tokens, double d, double dprime) {
  LayerMacs m;
  m.attention = 3 * tokens * d * d      // Q, K, V
                + tokens * tokens * d   // scores over all heads
                + tokens * tokens * d   // probabilities · V
                + tokens * d * d;       // output projection
  m.ffn = 2 * tokens * d * 4 * d;
  if (dprime > 0)
    m.adapters = 2 * tokens * (d * dprime + 2 * dprime * dprime + dprime * d);
  return m;
}

}  // namespace detail

/// Per-exit cumulative cost: patch embedding, layers 1..ψ(e) with the class
/// rows live in each layer, plus exit e's head.
inline CostTable flops_table(const ViTConfig& vit, const ExitPlan& plan,
                             const CostModelConfig& bank = {}) {
  vit.validate();
  if (plan.layers() != vit.layers) throw ConfigError("exit plan does not match ViT depth");
  const double d = vit.dim, n = vit.num_patches(), dp = bank.dprime;
  CostTable table;
  CostBreakdown running;
  running.patch_embed = n * vit.patch_elems() * d / detail::kMega;
  int e = 1;
  for (int k = 1; k <= vit.layers; ++k) {
    const double cls = bank.share_token ? 1.0 : static_cast<double>(plan.live_at_layer(k).size());
    const auto m = detail::layer_macs(cls + n, d, dp);
    running.attention += m.attention / detail::kMega;
    running.ffn += m.ffn / detail::kMega;
    running.adapters += m.adapters / detail::kMega;
    while (e <= plan.exits() && plan.layer_of(e) == k) {
      CostBreakdown at = running;
      at.heads = d * vit.classes / detail::kMega;
      table.per_exit.push_back(at);
      ++e;
    }
  }
  return table;
}

/// Plain ViT: patch embedding, L layers over n+1 tokens, one head (mega-MACs).
inline double baseline_vit_cost(const ViTConfig& vit) {
  vit.validate();
  const double d = vit.dim, n = vit.num_patches();
  const auto m = detail::layer_macs(n + 1, d, 0);
  return (n * vit.patch_elems() * d + vit.layers * (m.attention + m.ffn) + d * vit.classes) /
         detail::kMega;
}

// ---------------------------------------------------------------- confidence

/// Maximum softmax probability.
inline double confidence(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("confidence of an empty row");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return 1.0 / z;
}

/// Validation confidences (samples × exits, row-major) and labels.
struct ConfidenceProfile {
  std::size_t samples = 0;
  std::size_t exits = 0;
  std::vector<double> confidence;
  std::vector<int> labels;

  double at(std::size_t i, std::size_t e) const { return confidence[i * exits + e]; }
};

/// A profile plus each exit's predicted label.
struct ExitScores {
  ConfidenceProfile profile;
  std::vector<int> predictions;  // samples × exits

  int predicted(std::size_t i, std::size_t e) const { return predictions[i * profile.exits + e]; }
};

/// Confidences and predictions at every exit for every sample.
inline ExitScores score_exits(const MetModel& model, const ImageBatch& data, int chunk = 64,
                              unsigned threads = eval_threads()) {
  const std::size_t N = data.size(), E = static_cast<std::size_t>(model.exits());
  const std::size_t B = static_cast<std::size_t>(chunk), chunks = (N + B - 1) / B;
  ExitScores s;
  s.profile.samples = N;
  s.profile.exits = E;
  s.profile.confidence.assign(N * E, 0.0);
  s.profile.labels = data.labels;
  s.predictions.assign(N * E, 0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    NoGradGuard guard;
    std::vector<std::size_t> idx;
    for (std::size_t i = c * B; i < std::min(N, (c + 1) * B); ++i) idx.push_back(i);
    auto out = model(data.subset(idx));
    for (std::size_t e = 0; e < E; ++e) {
      const auto& lg = out.logits[e];
      const auto pred = argmax_rows(lg);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        s.profile.confidence[idx[r] * E + e] = confidence(lg.data().subspan(r * lg.cols(), lg.cols()));
        s.predictions[idx[r] * E + e] = pred[r];
      }
    }
  });
  return s;
}

// ---------------------------------------------------------------- anytime

struct AnytimeResult {
  std::vector<int> predictions;
  double cost = 0.0;  // mega-MACs per sample
  double accuracy = 0.0;
};

/// Static inference at exit e; layers after ψ(e) are not executed.
inline AnytimeResult anytime_predict(const MetModel& model, const ImageBatch& data, int exit,
                                     const CostTable& costs, int chunk = 64,
                                     unsigned threads = eval_threads()) {
  if (exit < 1 || exit > model.exits())
    throw DimensionError("exit " + std::to_string(exit) + " out of range 1.." +
                         std::to_string(model.exits()));
  const std::size_t N = data.size(), B = static_cast<std::size_t>(chunk), chunks = (N + B - 1) / B;
  AnytimeResult r;
  r.predictions.assign(N, 0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    NoGradGuard guard;
    std::vector<std::size_t> idx;
    for (std::size_t i = c * B; i < std::min(N, (c + 1) * B); ++i) idx.push_back(i);
    auto out = model(data.subset(idx), exit);
    const auto pred = argmax_rows(out.logits.back());
    for (std::size_t k = 0; k < idx.size(); ++k) r.predictions[idx[k]] = pred[k];
  });
  r.cost = costs.cost(exit);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < N; ++i) hit += r.predictions[i] == data.labels[i];
  r.accuracy = N ? static_cast<double>(hit) / static_cast<double>(N) : 0.0;
  return r;
}

enum class ExitSelection { kBestAccuracy, kCheapestWithinDelta };

/// 1-based exit chosen from per-exit validation accuracy.
inline int select_static_exit(std::span<const double> acc, const CostTable& costs,
                              ExitSelection mode, double delta = 0.0) {
  if (acc.empty() || acc.size() != costs.exits())
    throw DimensionError("need one accuracy per exit");
  const double best = *std::max_element(acc.begin(), acc.end());
  const double floor = mode == ExitSelection::kBestAccuracy ? best : best - delta;
  int pick = 0;
  for (std::size_t e = 0; e < acc.size(); ++e) {
    if (acc[e] < floor - 1e-12) continue;
    if (pick == 0 || costs.per_exit[e].total() < costs.cost(pick)) pick = static_cast<int>(e + 1);
  }
  return pick;
}

// ---------------------------------------------------------------- budgeted

/// τ_e for e = 1..E−1; the last exit accepts everything.
struct ThresholdSet {
  std::vector<double> tau;
};

struct RoutingResult {
  std::vector<int> exit_taken;  // 1-based
  std::vector<int> predicted;
  std::vector<double> confidence;
  std::vector<double> cost;
  std::vector<std::size_t> counts;  // per exit
  double mean_cost = 0.0;
  double accuracy = 0.0;

  std::vector<double> fractions() const {
    std::vector<double> f;
    for (auto c : counts) f.push_back(static_cast<double>(c) / static_cast<double>(exit_taken.size()));
    return f;
  }
};

/// Sample i leaves at the first e < E with confidence ≥ τ_e, else at E.
inline RoutingResult budgeted_route(const ExitScores& scores, const ThresholdSet& th,
                                    const CostTable& costs) {
  const auto& p = scores.profile;
  const std::size_t N = p.samples, E = p.exits;
  if (th.tau.size() + 1 != E)
    throw DimensionError("need " + std::to_string(E - 1) + " thresholds, got " +
                         std::to_string(th.tau.size()));
  if (costs.exits() != E) throw DimensionError("cost table does not match exit count");
  RoutingResult r;
  r.counts.assign(E, 0);
  std::size_t hit = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t e = 0;
    while (e + 1 < E && p.at(i, e) < th.tau[e]) ++e;
    r.exit_taken.push_back(static_cast<int>(e + 1));
    r.predicted.push_back(scores.predicted(i, e));
    r.confidence.push_back(p.at(i, e));
    r.cost.push_back(costs.per_exit[e].total());
    r.counts[e] += 1;
    total += costs.per_exit[e].total();
    if (!p.labels.empty()) hit += scores.predicted(i, e) == p.labels[i];
  }
  r.mean_cost = N ? total / static_cast<double>(N) : 0.0;
  r.accuracy = N ? static_cast<double>(hit) / static_cast<double>(N) : 0.0;
  return r;
}

/// Target exit fractions q(1−q)^{e−1} for e < E, remainder at E.
inline std::vector<double> geometric_fractions(double q, std::size_t exits) {
  std::vector<double> f(exits, 0.0);
  double rest = 1.0;
  for (std::size_t e = 0; e + 1 < exits; ++e) {
    f[e] = rest * q;
    rest -= f[e];
  }
  f[exits - 1] = rest;
  return f;
}

/// Thresholds whose routing of `profile` consumes about `budget` mega-MACs
/// per sample: the geometric rate q is found by bisection on the expected
/// cost, then each τ_e admits the most confident share of the samples still
/// running. Ties admit extra samples early, which only lowers the cost.
inline ThresholdSet calibrate_thresholds(const ConfidenceProfile& profile, const CostTable& costs,
                                         double budget) {
  const std::size_t N = profile.samples, E = profile.exits;
  if (costs.exits() != E) throw DimensionError("cost table does not match profile exits");
  if (N == 0) throw DataError("empty confidence profile");
  const auto c = costs.totals();
  if (budget < c.front() * (1.0 - 1e-12))
    throw InfeasibleBudget("budget " + std::to_string(budget) + " below exit-1 cost " +
                           std::to_string(c.front()));
  ThresholdSet th;
  if (E == 1) return th;

  auto expected = [&](double q) {
    const auto f = geometric_fractions(q, E);
    double s = 0.0;
    for (std::size_t e = 0; e < E; ++e) s += f[e] * c[e];
    return s;
  };
  double q;
  if (budget >= c.back()) {
    q = 0.0;
  } else if (budget <= c.front()) {
    q = 1.0;
  } else {
    double lo = 0.0, hi = 1.0;  // expected(lo) > budget ≥ expected(hi)
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (expected(mid) > budget ? lo : hi) = mid;
    }
    q = hi;
  }
  const auto f = geometric_fractions(q, E);

  std::vector<std::size_t> running(N);
  std::iota(running.begin(), running.end(), std::size_t{0});
  double cumulative = 0.0;
  std::size_t exited = 0;
  for (std::size_t e = 0; e + 1 < E; ++e) {
    cumulative += f[e];
    const auto target = static_cast<std::size_t>(
        std::clamp(std::ceil(cumulative * static_cast<double>(N) - 1e-9), 0.0, static_cast<double>(N)));
    const std::size_t take = target > exited ? target - exited : 0;
    std::vector<double> conf;
    for (auto i : running) conf.push_back(profile.at(i, e));
    std::sort(conf.begin(), conf.end(), std::greater<>());
    double tau;
    if (running.empty() || take >= running.size()) {
      tau = 0.0;
    } else if (take == 0) {
      tau = std::nextafter(conf.front(), std::numeric_limits<double>::infinity());
    } else {
      tau = conf[take - 1];
    }
    th.tau.push_back(tau);
    std::vector<std::size_t> still;
    for (auto i : running)
      if (profile.at(i, e) < tau) still.push_back(i);
    exited += running.size() - still.size();
    running = std::move(still);
  }
  return th;
}

// ---------------------------------------------------------------- profile CSV

inline constexpr const char* kProfileHeader = "sample,exit,confidence,label";

inline void write_profile(const ConfidenceProfile& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write profile to " + path.string());
  out << kProfileHeader << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < p.samples; ++i)
    for (std::size_t e = 0; e < p.exits; ++e)
      out << i << ',' << e + 1 << ',' << p.at(i, e) << ',' << p.labels[i] << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline ConfidenceProfile read_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read profile " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kProfileHeader) throw DataError("unexpected profile header: " + line);
  struct Row {
    std::size_t sample, exit;
    double conf;
    int label;
  };
  std::vector<Row> rows;
  std::size_t N = 0, E = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[4];
    for (auto& s : f)
      if (!std::getline(ss, s, ',')) throw DataError("short profile row: " + line);
    Row r{std::stoul(f[0]), std::stoul(f[1]), std::stod(f[2]), std::stoi(f[3])};
    if (r.exit < 1) throw DataError("exit ids start at 1: " + line);
    if (r.conf < 0.0 || r.conf > 1.0) throw DataError("confidence outside [0,1]: " + line);
    N = std::max(N, r.sample + 1);
    E = std::max(E, r.exit);
    rows.push_back(r);
  }
  if (rows.size() != N * E) throw DataError("profile is not a full samples × exits grid");
  ConfidenceProfile p{N, E, std::vector<double>(N * E, -1.0), std::vector<int>(N, 0)};
  for (const auto& r : rows) {
    auto& slot = p.confidence[r.sample * E + r.exit - 1];
    if (slot >= 0.0) throw DataError("duplicate profile row for sample " + std::to_string(r.sample));
    slot = r.conf;
    p.labels[r.sample] = r.label;
  }
  return p;
}

}  // namespace met
