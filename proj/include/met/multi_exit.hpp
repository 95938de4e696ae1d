#pragma once

// Exit-specific adapters with shared projections, the multi-class-token
// forward with per-exit retirement, exit heads and parameter accounting.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "met/vit.hpp"

namespace met {

/// Exit e (1-based) sits after encoder layer layer_of(e).
class ExitPlan {
 public:
  ExitPlan() = default;
  ExitPlan(int layers, std::vector<int> exit_layers)
      : layers_(layers), exit_layers_(std::move(exit_layers)) {
    validate();
  }

  /// ψ(e) = L − E + e.
  static ExitPlan last_layers(int layers, int exits) {
    if (exits < 1 || exits > layers)
      throw ConfigError("cannot place " + std::to_string(exits) + " exits on " +
                        std::to_string(layers) + " layers");
    std::vector<int> psi;
    for (int e = 1; e <= exits; ++e) psi.push_back(layers - exits + e);
    return ExitPlan(layers, std::move(psi));
  }

  int layers() const { return layers_; }
  int exits() const { return static_cast<int>(exit_layers_.size()); }
  int layer_of(int e) const {
    if (e < 1 || e > exits()) throw DimensionError("exit " + std::to_string(e) + " out of range");
    return exit_layers_[static_cast<std::size_t>(e - 1)];
  }
  const std::vector<int>& exit_layers() const { return exit_layers_; }

  bool is_last_layers() const {
    for (int e = 1; e <= exits(); ++e)
      if (layer_of(e) != layers_ - exits() + e) return false;
    return true;
  }

  /// Exits whose class token is live inside encoder layer k.
  std::vector<int> live_at_layer(int k) const {
    if (k < 1 || k > layers_)
      throw DimensionError("layer " + std::to_string(k) + " outside 1.." + std::to_string(layers_));
    std::vector<int> out;
    for (int e = 1; e <= exits(); ++e)
      if (layer_of(e) >= k) out.push_back(e);
    return out;
  }

  void validate() const {
    if (layers_ < 1) throw ConfigError("exit plan needs at least one layer");
    if (exit_layers_.empty()) throw ConfigError("exit plan needs at least one exit");
    if (exit_layers_.front() < 1) throw ConfigError("first exit must follow layer 1 or later");
    for (std::size_t i = 1; i < exit_layers_.size(); ++i)
      if (exit_layers_[i] <= exit_layers_[i - 1])
        throw ConfigError("exit layers must be strictly increasing");
    if (exit_layers_.back() != layers_)
      throw ConfigError("last exit must sit after layer " + std::to_string(layers_));
  }

  bool operator==(const ExitPlan&) const = default;

 private:
  int layers_ = 0;
  std::vector<int> exit_layers_;
};

/// Exits live at adapter m (1..2L); adapter m belongs to layer ⌈m/2⌉.
inline std::vector<int> live_exits(int m, const ExitPlan& plan) {
  if (m < 1 || m > 2 * plan.layers())
    throw DimensionError("adapter index " + std::to_string(m) + " outside 1.." +
                         std::to_string(2 * plan.layers()));
  return plan.live_at_layer((m + 1) / 2);
}

enum class MergeMode {
  kResidualOnce,  // Z_out = Z_in + Σ_i Δ_i
  kBranchSum,     // Z_out = Σ_i (Z_in + Δ_i), CLI name "branch-sum"
};

inline std::string to_string(MergeMode m) {
  return m == MergeMode::kResidualOnce ? "residual-once" : "branch-sum";
}

inline MergeMode parse_merge_mode(const std::string& s) {
  if (s == "residual-once") return MergeMode::kResidualOnce;
  if (s == "branch-sum") return MergeMode::kBranchSum;
  throw ConfigError("unknown merge mode '" + s + "'");
}

struct MetOptions {
  MergeMode merge = MergeMode::kResidualOnce;
  bool mask_cross_exit = false;
};

/// Shared U_down/U_up, per-adapter R_m/W_m, per-(adapter, live exit) diagonals.
/// In shared-token mode each adapter carries one diagonal.
class EAdapterBank {
 public:
  int dim = 0;
  int dprime = 0;
  ExitPlan plan;
  bool shared_token = false;

  Tensor down;                  // d × d'
  Tensor up;                    // d' × d
  std::vector<Tensor> r;        // per adapter, d' × d'
  std::vector<Tensor> w;        // per adapter, d' × d'
  std::vector<std::vector<Tensor>> diag;  // [m-1][j], j over diag_exits(m)

  static void check_dims(int dim, int dprime) {
    if (dprime < 1) throw ConfigError("bottleneck d' must be at least 1");
    if (dprime >= dim)
      throw ConfigError("bottleneck d'=" + std::to_string(dprime) + " must be below d=" +
                        std::to_string(dim));
  }

  /// Exit ids owning a diagonal at adapter m; {0} in shared-token mode.
  std::vector<int> diag_exits(int m) const {
    if (shared_token) {
      live_exits(m, plan);  // range check
      return {0};
    }
    return live_exits(m, plan);
  }

  static EAdapterBank init(int dim, int dprime, const ExitPlan& plan, bool shared_token,
                           std::uint64_t seed) {
    check_dims(dim, dprime);
    std::mt19937_64 rng(seed);
    auto uniform = [&](std::size_t r, std::size_t c, double bound) {
      std::uniform_real_distribution<double> dist(-bound, bound);
      std::vector<double> v(r * c);
      for (auto& x : v) x = dist(rng);
      return Tensor::matrix(r, c, std::move(v), true);
    };
    const auto d = static_cast<std::size_t>(dim), dp = static_cast<std::size_t>(dprime);
    EAdapterBank b;
    b.dim = dim;
    b.dprime = dprime;
    b.plan = plan;
    b.shared_token = shared_token;
    b.down = uniform(d, dp, 1.0 / std::sqrt(static_cast<double>(d)));
    b.up = Tensor::zeros({dp, d}, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(dp));
    for (int m = 1; m <= 2 * plan.layers(); ++m) {
      b.r.push_back(uniform(dp, dp, bound));
      b.w.push_back(uniform(dp, dp, bound));
      std::vector<Tensor> lam;
      for (std::size_t j = 0; j < b.diag_exits(m).size(); ++j)
        lam.push_back(Tensor::filled({dp}, 1.0, true));
      b.diag.push_back(std::move(lam));
    }
    return b;
  }

  const Tensor& lambda(int m, int exit) const {
    const auto ids = diag_exits(m);
    for (std::size_t j = 0; j < ids.size(); ++j)
      if (ids[j] == exit) return diag[static_cast<std::size_t>(m - 1)][j];
    throw StateError("no diagonal for exit " + std::to_string(exit) + " at adapter " +
                     std::to_string(m));
  }

  std::vector<Parameter> parameters() const {
    std::vector<Parameter> out{{"bank.U_down", down, true}, {"bank.U_up", up, true}};
    for (int m = 1; m <= 2 * plan.layers(); ++m) {
      const auto mi = static_cast<std::size_t>(m - 1);
      out.push_back({"bank.R." + std::to_string(m), r[mi], true});
      out.push_back({"bank.W." + std::to_string(m), w[mi], true});
      const auto ids = diag_exits(m);
      for (std::size_t j = 0; j < ids.size(); ++j)
        out.push_back({"bank.lambda." + std::to_string(m) + "." + std::to_string(ids[j]),
                       diag[mi][j], true});
    }
    return out;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  /// Deep copy with fresh trainable leaves.
  EAdapterBank clone() const {
    EAdapterBank b = *this;
    b.down = down.clone(true);
    b.up = up.clone(true);
    for (auto& t : b.r) t = t.clone(true);
    for (auto& t : b.w) t = t.clone(true);
    for (auto& v : b.diag)
      for (auto& t : v) t = t.clone(true);
    return b;
  }
};

/// One trainable linear head per exit; all share the backbone's final LN.
struct ExitHeads {
  std::vector<LinearHead> heads;

  static ExitHeads zeros(int exits, int dim, int classes) {
    ExitHeads h;
    for (int e = 0; e < exits; ++e) h.heads.push_back(LinearHead::zeros(dim, classes, true));
    return h;
  }

  std::vector<Parameter> parameters() const {
    std::vector<Parameter> out;
    for (std::size_t e = 0; e < heads.size(); ++e) {
      const auto p = "head." + std::to_string(e + 1) + ".";
      out.push_back({p + "weight", heads[e].weight, true});
      out.push_back({p + "bias", heads[e].bias, true});
    }
    return out;
  }

  ExitHeads clone() const {
    ExitHeads h;
    for (const auto& x : heads) h.heads.push_back({x.weight.clone(true), x.bias.clone(true)});
    return h;
  }
};

/// Tag of the pre-trained class token before fan-out, and of the single
/// stream in shared-token mode.
inline constexpr int kSharedClassToken = 0;

/// Batched token state: per-sample blocks [live class rows; feature rows].
struct TokenState {
  Tensor tokens;
  std::size_t samples = 0;
  std::size_t features = 0;
  std::vector<int> live;           // exit id per class row, block order
  std::map<int, Tensor> captured;  // exit → N×d representation

  std::size_t segment() const { return live.size() + features; }
};

inline TokenState initial_state(const ImageBatch& batch, const BackboneWeights& backbone) {
  return {patch_embed(batch, backbone), batch.size(),
          static_cast<std::size_t>(backbone.config.num_patches()),
          {kSharedClassToken},
          {}};
}

/// The m-th E-adapter.
///
/// Every live exit i forms a branch over [c_i; Z] with increment
/// σ(Q·U_down·R_m)·Λ_{m,i}·W_m·U_up. Class rows keep their own branch. The
/// feature rows of all branches share σ(Z·U_down·R_m), so their summed
/// increment uses Σ_i Λ_{m,i}. At m = 1 the single pre-trained class token is
/// fanned out into one row per exit first.
inline TokenState eadapter_apply(const TokenState& in, int m, const EAdapterBank& bank,
                                 MergeMode merge = MergeMode::kResidualOnce) {
  const auto expected = bank.diag_exits(m);
  TokenState st = in;
  st.captured = in.captured;

  if (!bank.shared_token) {
    if (m == 1) {
      if (in.live != std::vector<int>{kSharedClassToken})
        throw StateError("first adapter expects the single pre-trained class token");
      const std::size_t T = in.segment(), E = expected.size();
      std::vector<std::size_t> idx;
      for (std::size_t s = 0; s < in.samples; ++s) {
        for (std::size_t j = 0; j < E; ++j) idx.push_back(s * T);
        for (std::size_t f = 0; f < in.features; ++f) idx.push_back(s * T + 1 + f);
      }
      st.tokens = gather_rows(in.tokens, std::move(idx));
      st.live = expected;
    } else if (in.live != expected) {
      throw StateError("adapter " + std::to_string(m) + " expects " +
                       std::to_string(expected.size()) + " live exits, state has " +
                       std::to_string(in.live.size()));
    }
  } else if (in.live != std::vector<int>{kSharedClassToken}) {
    throw StateError("shared-token adapter expects a single class stream");
  }

  const std::size_t T = st.segment(), C = st.live.size();
  const auto mi = static_cast<std::size_t>(m - 1);

  // Row-wise diagonal table: one row per live exit, then their sum for features.
  std::vector<Tensor> diag_rows;
  Tensor feature_diag;
  for (int e : st.live) {
    const auto& lam = bank.lambda(m, e);
    diag_rows.push_back(lam);
    feature_diag = feature_diag.defined() ? add(feature_diag, lam) : lam;
  }
  diag_rows.push_back(feature_diag);
  auto table = concat_rows(diag_rows);
  std::vector<std::size_t> pick;
  pick.reserve(st.samples * T);
  for (std::size_t s = 0; s < st.samples; ++s)
    for (std::size_t i = 0; i < T; ++i) pick.push_back(i < C ? i : C);
  auto diag_per_row = gather_rows(table, std::move(pick));

  auto hidden = gelu(matmul(matmul(st.tokens, bank.down), bank.r[mi]));
  auto increment = matmul(matmul(mul(hidden, diag_per_row), bank.w[mi]), bank.up);

  if (merge == MergeMode::kBranchSum && C > 1 && !bank.shared_token) {
    std::vector<double> factors(st.samples * T);
    for (std::size_t i = 0; i < factors.size(); ++i)
      factors[i] = (i % T) < C ? 1.0 : static_cast<double>(C);
    st.tokens = add(scale_rows(st.tokens, std::move(factors)), increment);
  } else {
    st.tokens = add(st.tokens, increment);
  }
  return st;
}

/// One encoder layer with its two E-adapters, then retirement of every exit
/// placed after layer k.
inline TokenState met_layer_forward(const TokenState& in, int k, const BackboneWeights& backbone,
                                    const EAdapterBank& bank, const MetOptions& opts = {}) {
  const auto& plan = bank.plan;
  if (k == 1 || bank.shared_token) {
    if (in.live != std::vector<int>{kSharedClassToken})
      throw StateError("layer " + std::to_string(k) + " expects a single class stream");
  } else if (in.live != plan.live_at_layer(k)) {
    throw StateError("live class tokens entering layer " + std::to_string(k) +
                     " do not match the exit plan");
  }
  const auto& layer = backbone.layers[static_cast<std::size_t>(k - 1)];

  auto st = eadapter_apply(in, 2 * k - 1, bank, opts.merge);
  const std::size_t masked = (opts.mask_cross_exit && !bank.shared_token) ? st.live.size() : 0;
  AttentionLayout layout{st.segment(), static_cast<std::size_t>(backbone.config.heads), masked};
  st.tokens = mha(st.tokens, layer, layout);
  st = eadapter_apply(st, 2 * k, bank, opts.merge);
  st.tokens = ffn(st.tokens, layer);

  const std::size_t T = st.segment();
  if (bank.shared_token) {
    for (int e = 1; e <= plan.exits(); ++e)
      if (plan.layer_of(e) == k) st.captured[e] = gather_rows(st.tokens, strided_rows(st.samples, T, 0));
    return st;
  }

  std::vector<int> keep_live;
  std::vector<std::size_t> keep_pos;
  for (std::size_t j = 0; j < st.live.size(); ++j) {
    const int e = st.live[j];
    if (plan.layer_of(e) == k) {
      st.captured[e] = gather_rows(st.tokens, strided_rows(st.samples, T, j));
    } else {
      keep_live.push_back(e);
      keep_pos.push_back(j);
    }
  }
  if (keep_live.size() == st.live.size()) return st;
  if (keep_live.empty()) {
    // Every exit has retired; feature tokens are no longer needed.
    st.live.clear();
    st.tokens = Tensor();
    return st;
  }
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < st.samples; ++s) {
    for (auto j : keep_pos) idx.push_back(s * T + j);
    for (std::size_t f = 0; f < st.features; ++f) idx.push_back(s * T + st.live.size() + f);
  }
  st.tokens = gather_rows(st.tokens, std::move(idx));
  st.live = std::move(keep_live);
  return st;
}

struct MetOutput {
  std::vector<Tensor> reps;    // per executed exit, N×d, pre-LN
  std::vector<Tensor> normed;  // per executed exit, after the shared final LN
  std::vector<Tensor> logits;  // per executed exit, N×classes
  std::vector<std::size_t> live_entering;  // class rows entering each executed layer
};

namespace detail {

inline MetOutput run_met(const ImageBatch& batch, const BackboneWeights& backbone,
                         const EAdapterBank& bank, const ExitHeads& heads, const MetOptions& opts,
                         int last_exit) {
  const auto& plan = bank.plan;
  if (plan.layers() != backbone.config.layers)
    throw ConfigError("exit plan covers " + std::to_string(plan.layers()) +
                      " layers, backbone has " + std::to_string(backbone.config.layers));
  if (static_cast<int>(heads.heads.size()) != plan.exits())
    throw ConfigError("need one head per exit");
  if (bank.dim != backbone.config.dim) throw ConfigError("bank dim does not match backbone");
  if (last_exit < 1 || last_exit > plan.exits())
    throw DimensionError("exit " + std::to_string(last_exit) + " out of range");

  MetOutput out;
  auto st = initial_state(batch, backbone);
  const int stop = plan.layer_of(last_exit);
  for (int k = 1; k <= stop; ++k) {
    const std::size_t entering =
        (k == 1 && !bank.shared_token) ? plan.live_at_layer(1).size() : st.live.size();
    out.live_entering.push_back(entering);
    st = met_layer_forward(st, k, backbone, bank, opts);
  }
  for (int e = 1; e <= last_exit; ++e) {
    const auto& rep = st.captured.at(e);
    auto normed = layer_norm(rep, backbone.lnf_gamma, backbone.lnf_beta);
    out.logits.push_back(heads.heads[static_cast<std::size_t>(e - 1)](normed));
    out.reps.push_back(rep);
    out.normed.push_back(std::move(normed));
  }
  return out;
}

}  // namespace detail

/// Full multi-exit forward; `last_exit` truncates execution after layer
/// ψ(last_exit) (0 means all exits).
inline MetOutput met_forward(const ImageBatch& batch, const BackboneWeights& backbone,
                             const EAdapterBank& bank, const ExitHeads& heads,
                             const MetOptions& opts = {}, int last_exit = 0) {
  if (bank.shared_token) throw ConfigError("shared-token bank requires shared_token_forward");
  return detail::run_met(batch, backbone, bank, heads, opts,
                         last_exit == 0 ? bank.plan.exits() : last_exit);
}

/// Ablation: one class-token stream, one diagonal per adapter; head e reads
/// the stream after layer ψ(e).
inline MetOutput shared_token_forward(const ImageBatch& batch, const BackboneWeights& backbone,
                                      const EAdapterBank& bank, const ExitHeads& heads,
                                      int last_exit = 0) {
  if (!bank.shared_token) throw ConfigError("shared_token_forward needs a shared-token bank");
  return detail::run_met(batch, backbone, bank, heads, {},
                         last_exit == 0 ? bank.plan.exits() : last_exit);
}

/// Dispatches on the bank's mode.
inline MetOutput forward(const ImageBatch& batch, const BackboneWeights& backbone,
                         const EAdapterBank& bank, const ExitHeads& heads,
                         const MetOptions& opts = {}, int last_exit = 0) {
  return bank.shared_token ? shared_token_forward(batch, backbone, bank, heads, last_exit)
                           : met_forward(batch, backbone, bank, heads, opts, last_exit);
}

/// Frozen backbone plus trainable bank and heads.
struct MetModel {
  BackboneWeights backbone;
  EAdapterBank bank;
  ExitHeads heads;
  MetOptions options;

  int exits() const { return bank.plan.exits(); }

  MetOutput operator()(const ImageBatch& batch, int last_exit = 0) const {
    return forward(batch, backbone, bank, heads, options, last_exit);
  }

  std::vector<Parameter> trainable() const {
    auto out = bank.parameters();
    for (auto& p : heads.parameters()) out.push_back(std::move(p));
    return out;
  }

  MetModel snapshot() const { return {backbone, bank.clone(), heads.clone(), options}; }
};

struct AdapterParamCount {
  std::size_t shared = 0;
  std::size_t transforms = 0;
  std::size_t diagonals = 0;
  std::size_t total = 0;
};

/// Trainable adapter elements, diagonals counted by enumerating the
/// retirement schedule.
inline AdapterParamCount count_adapter_params(std::size_t d, std::size_t dprime, int layers,
                                              const ExitPlan& plan, bool shared_token = false) {
  if (plan.layers() != layers) throw ConfigError("exit plan does not match layer count");
  AdapterParamCount c;
  c.shared = 2 * d * dprime;
  c.transforms = 4 * static_cast<std::size_t>(layers) * dprime * dprime;
  for (int m = 1; m <= 2 * layers; ++m)
    c.diagonals += dprime * (shared_token ? 1 : live_exits(m, plan).size());
  c.total = c.shared + c.transforms + c.diagonals;
  return c;
}

/// All-distinct adapters for every (adapter, exit) pair: 12·d·d'·(L−1).
inline std::size_t naive_param_count(std::size_t d, std::size_t dprime, int layers) {
  return 12 * d * dprime * static_cast<std::size_t>(layers - 1);
}

}  // namespace met
