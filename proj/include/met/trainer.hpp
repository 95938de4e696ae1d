#pragma once

// Joint multi-exit training: summed exit cross-entropies plus the graph
// penalty, Adam with decoupled weight decay, linear warmup and cosine decay.

#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "met/graph_reg.hpp"
#include "met/metrics.hpp"
#include "met/multi_exit.hpp"
#include "met/parallel.hpp"

namespace met {

struct TrainConfig {
  double lr = 0.0;
  double weight_decay = 0.0;
  int batch = 32;
  int epochs = 100;
  int warmup_epochs = 10;
  double alpha = 0.0;
  int dprime = 0;
  std::uint64_t seed = 0;
  ExitPlan plan;
  MergeMode merge = MergeMode::kResidualOnce;
  bool share_token = false;
  bool mask_cross_exit = false;
  bool penalty_post_ln = false;  // graph penalty on LN'd representations

  void validate() const {
    if (batch < 1) throw ConfigError("batch size must be at least 1");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
      throw ConfigError("warmup epochs must lie in [0, epochs)");
    if (alpha < 0.0) throw ConfigError("alpha must be non-negative");
    if (lr < 0.0 || weight_decay < 0.0) throw ConfigError("lr and weight decay must be non-negative");
    plan.validate();
  }
};

struct LossReport {
  std::vector<double> ce;           // per exit, batch mean
  std::vector<double> acc;          // per exit
  std::vector<double> graph_terms;  // α·term per exit; 0 for the last exit
  double penalty = 0.0;
  double total = 0.0;
};

struct LossResult {
  Tensor total;
  LossReport report;
};

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.rows(), c = logits.cols();
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = logits.data().subspan(r * c, c);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

inline double accuracy(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Σ_e CE_e plus α times the graph terms of exits 1..E−1, with graphs built
/// from the detached logits of the last exit.
inline LossResult total_loss(const MetOutput& out, std::span<const int> labels, double alpha,
                             bool penalty_post_ln = false) {
  const std::size_t E = out.logits.size();
  if (E == 0) throw DimensionError("total_loss needs at least one exit");
  LossResult res;
  Tensor objective;
  for (std::size_t e = 0; e < E; ++e) {
    auto ce = cross_entropy(out.logits[e], labels);
    res.report.ce.push_back(ce.item());
    res.report.acc.push_back(accuracy(out.logits[e], labels));
    objective = objective.defined() ? add(objective, ce) : ce;
  }
  const auto graphs = build_graphs(detach(out.logits.back()), labels);
  const auto& reps = penalty_post_ln ? out.normed : out.reps;
  auto penalty = graph_penalty(std::span<const Tensor>(reps.data(), E - 1), graphs, alpha);
  for (double t : penalty.terms) res.report.graph_terms.push_back(alpha * t);
  res.report.graph_terms.push_back(0.0);
  res.report.penalty = penalty.value.item();
  res.total = add(objective, penalty.value);
  res.report.total = res.total.item();
  return res;
}

/// Linear warmup from 0, then half-cosine decay to 0.
inline double lr_at(long step, long total_steps, long warmup_steps, double base_lr) {
  if (step < 0) step = 0;
  if (step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const long decay = std::max(1L, total_steps - warmup_steps);
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamConstants {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::map<std::string, std::vector<double>> first;
  std::map<std::string, std::vector<double>> second;
  long step = 0;
};

/// One bias-corrected Adam update with decoupled weight decay. Trainable
/// parameters without a gradient are treated as having a zero gradient;
/// frozen parameters are skipped.
inline void adam_step(std::span<Parameter> params, OptimizerState& state, double lr, double wd,
                      const AdamConstants& k = {}) {
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(k.beta1, t);
  const double c2 = 1.0 - std::pow(k.beta2, t);
  for (auto& p : params) {
    if (!p.trainable) continue;
    auto& m = state.first[p.name];
    auto& v = state.second[p.name];
    const std::size_t n = p.tensor.numel();
    if (m.size() != n) m.assign(n, 0.0);
    if (v.size() != n) v.assign(n, 0.0);
    auto value = p.tensor.mutable_data();
    const bool has = p.tensor.has_grad();
    auto grad = p.tensor.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = has ? grad[i] : 0.0;
      m[i] = k.beta1 * m[i] + (1.0 - k.beta1) * g;
      v[i] = k.beta2 * v[i] + (1.0 - k.beta2) * g * g;
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      value[i] -= lr * (mhat / (std::sqrt(vhat) + k.eps) + wd * value[i]);
    }
  }
}

/// Fresh model for a config: seeded bank, zero heads.
inline MetModel init_model(const TrainConfig& cfg, const BackboneWeights& backbone) {
  cfg.validate();
  if (cfg.plan.layers() != backbone.config.layers)
    throw ConfigError("exit plan does not match backbone depth");
  MetModel model{backbone,
                 EAdapterBank::init(backbone.config.dim, cfg.dprime, cfg.plan, cfg.share_token,
                                    cfg.seed),
                 ExitHeads::zeros(cfg.plan.exits(), backbone.config.dim, backbone.config.classes),
                 {cfg.merge, cfg.mask_cross_exit}};
  return model;
}

/// Size-weighted running mean of batch reports.
struct ReportAccumulator {
  LossReport sum;
  double weight = 0.0;

  void add(const LossReport& r, double w) {
    if (sum.ce.empty()) {
      sum.ce.assign(r.ce.size(), 0.0);
      sum.acc.assign(r.acc.size(), 0.0);
      sum.graph_terms.assign(r.graph_terms.size(), 0.0);
    }
    for (std::size_t e = 0; e < r.ce.size(); ++e) {
      sum.ce[e] += w * r.ce[e];
      sum.acc[e] += w * r.acc[e];
      sum.graph_terms[e] += w * r.graph_terms[e];
    }
    sum.penalty += w * r.penalty;
    sum.total += w * r.total;
    weight += w;
  }

  LossReport mean() const {
    LossReport m = sum;
    for (auto* v : {&m.ce, &m.acc, &m.graph_terms})
      for (auto& x : *v) x /= weight;
    m.penalty /= weight;
    m.total /= weight;
    return m;
  }
};

/// Loss report over a dataset in consecutive batches, without recording.
inline LossReport evaluate(const MetModel& model, const ImageBatch& data, int batch, double alpha,
                           bool penalty_post_ln = false, unsigned threads = eval_threads()) {
  const std::size_t N = data.size(), B = static_cast<std::size_t>(batch);
  const std::size_t chunks = (N + B - 1) / B;
  std::vector<LossReport> reports(chunks);
  parallel_for(chunks, threads, [&](std::size_t c) {
    NoGradGuard guard;
    std::vector<std::size_t> idx;
    for (std::size_t i = c * B; i < std::min(N, (c + 1) * B); ++i) idx.push_back(i);
    auto part = data.subset(idx);
    reports[c] = total_loss(model(part), part.labels, alpha, penalty_post_ln).report;
  });
  ReportAccumulator acc;
  for (std::size_t c = 0; c < chunks; ++c)
    acc.add(reports[c], static_cast<double>(std::min(N, (c + 1) * B) - c * B));
  return acc.mean();
}

inline void append_rows(std::vector<MetricsRow>& out, int epoch, const std::string& split,
                        const LossReport& r, double lr) {
  double ce_sum = 0.0, acc_sum = 0.0;
  for (std::size_t e = 0; e < r.ce.size(); ++e) {
    out.push_back({epoch, split, std::to_string(e + 1), r.ce[e], r.acc[e], r.graph_terms[e],
                   r.total, lr});
    ce_sum += r.ce[e];
    acc_sum += r.acc[e];
  }
  out.push_back({epoch, split, "all", ce_sum, acc_sum / static_cast<double>(r.acc.size()),
                 r.penalty, r.total, lr});
}

inline double mean_accuracy(const LossReport& r) {
  double s = 0.0;
  for (double a : r.acc) s += a;
  return s / static_cast<double>(r.acc.size());
}

struct TrainResult {
  MetModel model;       // after the last epoch
  MetModel best;        // highest mean validation accuracy over exits
  int best_epoch = 0;
  std::vector<MetricsRow> history;
};

/// Seeded Fisher–Yates permutation.
inline void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
}

/// Trains bank and heads; the backbone stays frozen. Deterministic in
/// cfg.seed. `val` may be empty, in which case selection uses train metrics.
inline TrainResult train(const TrainConfig& cfg, const ImageBatch& data, const ImageBatch& val,
                         const BackboneWeights& backbone) {
  if (data.size() == 0) throw DataError("training set is empty");
  auto model = init_model(cfg, backbone);
  auto params = model.trainable();

  const std::size_t N = data.size(), B = static_cast<std::size_t>(cfg.batch);
  const long steps_per_epoch = static_cast<long>((N + B - 1) / B);
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result{model, model.snapshot(), 0, {}};
  double best_score = -1.0;
  OptimizerState opt;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_indices(order, rng);
    ReportAccumulator running;
    double lr = 0.0;
    for (std::size_t start = 0; start < N; start += B) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(N, start + B)));
      auto batch = data.subset(idx);
      auto loss = total_loss(model(batch), batch.labels, cfg.alpha, cfg.penalty_post_ln);
      if (!std::isfinite(loss.report.total))
        throw DivergenceError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                              std::to_string(epoch) + ")");
      for (auto& p : params) p.tensor.zero_grad();
      backward(loss.total);
      lr = lr_at(step, total_steps, warmup_steps, cfg.lr);
      adam_step(params, opt, lr, cfg.weight_decay);
      running.add(loss.report, static_cast<double>(idx.size()));
      ++step;
    }
    const auto train_report = running.mean();
    append_rows(result.history, epoch, "train", train_report, lr);
    double score = mean_accuracy(train_report);
    if (val.size() > 0) {
      const auto val_report = evaluate(model, val, cfg.batch, cfg.alpha, cfg.penalty_post_ln);
      append_rows(result.history, epoch, "val", val_report, lr);
      score = mean_accuracy(val_report);
    }
    if (score > best_score) {
      best_score = score;
      result.best = model.snapshot();
      result.best_epoch = epoch;
    }
  }
  for (auto& p : params) p.tensor.zero_grad();
  result.model = model;
  return result;
}

}  // namespace met
