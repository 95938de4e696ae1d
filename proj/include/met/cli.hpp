#pragma once

// Command-line surface. Every command prints one JSON object on stdout.
// Exit codes: 0 success, 1 runtime error, 2 usage error, 3 infeasible budget.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "met/config.hpp"

namespace met {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInfeasible = 3;

/// Mega-MACs per GFLOP under the one-MAC-one-FLOP convention.
inline constexpr double kMegaPerGiga = 1000.0;

namespace detail {

struct CliArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> exit;
  std::optional<double> budget;
  std::optional<double> alpha, lr, weight_decay;
  std::optional<int> dprime, num_exits, epochs;
  std::vector<int> exits;
  std::optional<std::string> merge_mode;
  bool share_token = false;
  std::string model, data, profile, backbone, calib;
  // architecture overrides
  std::optional<int> dim, layers, heads, image_size, patch, classes;
  // synthetic data overrides
  std::optional<int> per_class, test_per_class;
  std::optional<double> noise;
  std::optional<std::uint64_t> pattern_seed;
};

inline RunConfig resolve(const CliArgs& a) {
  RunConfig rc;
  if (!a.config.empty()) rc = load_config(a.config);
  const bool arch_flags = a.dim || a.layers || a.heads || a.image_size || a.patch || a.classes;
  if (rc.vit || arch_flags) {
    ViTConfig v = rc.vit.value_or(ViTConfig{});  // ViT-B/16 shape when no config
    if (a.dim) v.dim = *a.dim;
    if (a.layers) v.layers = *a.layers;
    if (a.heads) v.heads = *a.heads;
    if (a.image_size) v.height = v.width = *a.image_size;
    if (a.patch) v.patch = *a.patch;
    if (a.classes) v.classes = *a.classes;
    v.validate();
    rc.vit = v;
  }
  if (a.dprime) rc.met.dprime = *a.dprime;
  if (!a.exits.empty()) {
    rc.met.exits = a.exits;
    rc.met.num_exits.reset();
  }
  if (a.num_exits) {
    rc.met.num_exits = *a.num_exits;
    if (a.exits.empty()) rc.met.exits.clear();
  }
  if (a.merge_mode) rc.met.merge = parse_merge_mode(*a.merge_mode);
  if (a.share_token) rc.met.share_token = true;
  if (a.alpha) rc.train.alpha = *a.alpha;
  if (a.lr) rc.train.lr = *a.lr;
  if (a.weight_decay) rc.train.weight_decay = *a.weight_decay;
  if (a.seed) rc.train.seed = *a.seed;
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.per_class || a.test_per_class || a.noise || a.pattern_seed || a.classes || a.image_size) {
    SynthSpec s = rc.synth.value_or(SynthSpec{});
    if (a.classes) s.classes = *a.classes;
    if (a.image_size) s.height = s.width = *a.image_size;
    if (a.per_class) s.per_class = *a.per_class;
    if (a.noise) s.noise = *a.noise;
    if (a.pattern_seed) s.pattern_seed = *a.pattern_seed;
    if (!rc.synth) rc.test_per_class = s.per_class;
    if (a.test_per_class) rc.test_per_class = *a.test_per_class;
    rc.synth = s;
  }
  if (!a.backbone.empty()) rc.paths.backbone = a.backbone;
  if (!a.model.empty()) rc.paths.model = a.model;
  return rc;
}

inline std::filesystem::path need_path(const std::filesystem::path& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string("no ") + what + " path given");
  return p;
}

inline std::uint64_t need_seed(const RunConfig& rc) {
  if (!rc.train.seed) throw ConfigError("a seed is required (--seed or train.seed)");
  return *rc.train.seed;
}

inline std::filesystem::path need_out(const CliArgs& a) {
  if (a.out.empty()) throw ConfigError("--out is required");
  return a.out;
}

inline std::vector<double> to_giga(const CostTable& t) {
  std::vector<double> g;
  for (double c : t.totals()) g.push_back(c / kMegaPerGiga);
  return g;
}

inline CostTable cost_table(const RunConfig& rc) {
  const auto& v = rc.vit_or_throw();
  return flops_table(v, rc.met.plan(v.layers), rc.cost_config());
}

inline MetModel load_trained(const RunConfig& rc) {
  const auto& v = rc.vit_or_throw();
  const auto backbone = load_backbone(need_path(rc.paths.backbone, "backbone"), v);
  return load_model(need_path(rc.paths.model, "model"), rc, backbone);
}

inline std::filesystem::path data_path(const CliArgs& a, const std::filesystem::path& fallback) {
  return a.data.empty() ? need_path(fallback, "data") : std::filesystem::path(a.data);
}

inline Dataset load_matching(const std::filesystem::path& dir, const RunConfig& rc) {
  auto ds = load_dataset(dir);
  const auto& v = rc.vit_or_throw();
  if (ds.classes != v.classes)
    throw ConfigError("dataset has " + std::to_string(ds.classes) + " classes, model expects " +
                      std::to_string(v.classes));
  return ds;
}

// ---------------------------------------------------------------- commands

inline nlohmann::json cmd_init_backbone(const CliArgs& a, const RunConfig& rc) {
  const auto& v = rc.vit_or_throw();
  const auto w = BackboneWeights::init(v, need_seed(rc));
  const auto prefix = need_out(a) / "backbone";
  const auto params = w.parameters();
  const auto m = save_checkpoint(params, prefix);
  return {{"backbone", prefix.string()},
          {"tensors", m.tensors.size()},
          {"bytes", m.expected_bytes()}};
}

inline nlohmann::json cmd_synth_data(const CliArgs& a, const RunConfig& rc) {
  if (!rc.synth) throw ConfigError("synthetic data settings missing (synth section or flags)");
  const auto seed = need_seed(rc);
  auto test_spec = *rc.synth;
  test_spec.per_class = rc.test_per_class;
  const auto train = generate_synthetic(seed, *rc.synth);
  const auto test = generate_synthetic(seed ^ 0x5851f42d4c957f2dULL, test_spec);
  const auto dir = need_out(a);
  save_dataset(train, dir / "train");
  save_dataset(test, dir / "test");
  return {{"train", (dir / "train").string()},
          {"test", (dir / "test").string()},
          {"train_samples", train.images.size()},
          {"test_samples", test.images.size()},
          {"classes", train.classes}};
}

inline nlohmann::json report_json(const LossReport& r) {
  return {{"ce", r.ce}, {"acc", r.acc}, {"penalty", r.penalty}, {"total", r.total}};
}

inline nlohmann::json cmd_tune(const CliArgs& a, const RunConfig& rc) {
  const auto cfg = rc.train_config();
  const auto& v = rc.vit_or_throw();
  const auto backbone = load_backbone(need_path(rc.paths.backbone, "backbone"), v);
  const auto train_set = load_matching(data_path(a, rc.paths.train), rc);
  ImageBatch val;
  if (!rc.paths.val.empty()) val = load_matching(rc.paths.val, rc).images;
  const auto result = train(cfg, train_set.images, val, backbone);
  const auto dir = need_out(a);
  std::filesystem::create_directories(dir);
  save_model(result.best, dir / "model");
  emit_metrics(result.history, dir / "metrics.csv");
  nlohmann::json summary{
      {"model", (dir / "model").string()},
      {"metrics", (dir / "metrics.csv").string()},
      {"best_epoch", result.best_epoch},
      {"seed", cfg.seed},
      {"alpha", cfg.alpha},
      {"exit_layers", cfg.plan.exit_layers()},
      {"trainable_elements", result.best.bank.element_count()},
      {"train", report_json(evaluate(result.best, train_set.images, cfg.batch, cfg.alpha,
                                     cfg.penalty_post_ln))}};
  if (val.size() > 0)
    summary["val"] = report_json(evaluate(result.best, val, cfg.batch, cfg.alpha, cfg.penalty_post_ln));
  detail::write_file(dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

inline nlohmann::json cmd_eval_anytime(const CliArgs& a, const RunConfig& rc) {
  if (!a.exit) throw ConfigError("--exit is required");
  const auto model = load_trained(rc);
  const auto costs = cost_table(rc);
  const auto data = load_matching(data_path(a, rc.paths.test), rc);
  const auto r = anytime_predict(model, data.images, *a.exit, costs);
  return {{"exit", *a.exit}, {"accuracy", r.accuracy}, {"gflops", r.cost / kMegaPerGiga},
          {"samples", data.images.size()}};
}

inline ConfidenceProfile calibration_profile(const CliArgs& a, const RunConfig& rc,
                                             const std::filesystem::path& fallback_data) {
  if (!a.profile.empty()) return read_profile(a.profile);
  std::filesystem::path dir = a.calib;
  if (dir.empty()) dir = rc.paths.val.empty() ? fallback_data : rc.paths.val;
  const auto model = load_trained(rc);
  return score_exits(model, load_matching(need_path(dir, "calibration data"), rc).images).profile;
}

inline void check_budget(double budget_mmacs, const CostTable& costs) {
  if (budget_mmacs < costs.cost(1) * (1.0 - 1e-12))
    throw InfeasibleBudget("budget " + std::to_string(budget_mmacs / kMegaPerGiga) +
                           " GFLOPs is below the exit-1 cost " +
                           std::to_string(costs.cost(1) / kMegaPerGiga) + " GFLOPs");
}

inline nlohmann::json cmd_calibrate(const CliArgs& a, const RunConfig& rc) {
  if (!a.budget) throw ConfigError("--budget is required");
  const auto costs = cost_table(rc);
  const double budget = *a.budget * kMegaPerGiga;
  check_budget(budget, costs);
  const auto profile = calibration_profile(a, rc, a.data);
  const auto th = calibrate_thresholds(profile, costs, budget);
  ExitScores scores{profile, std::vector<int>(profile.samples * profile.exits, 0)};
  const auto routed = budgeted_route(scores, th, costs);
  nlohmann::json j{{"budget_gflops", *a.budget},
                   {"thresholds", th.tau},
                   {"calibration_mean_gflops", routed.mean_cost / kMegaPerGiga},
                   {"calibration_fractions", routed.fractions()},
                   {"exit_gflops", to_giga(costs)}};
  if (!a.out.empty()) detail::write_file(a.out, j.dump(2) + "\n");
  return j;
}

inline nlohmann::json cmd_eval_budgeted(const CliArgs& a, const RunConfig& rc) {
  if (!a.budget) throw ConfigError("--budget is required");
  const auto costs = cost_table(rc);
  const double budget = *a.budget * kMegaPerGiga;
  check_budget(budget, costs);
  const auto test_dir = data_path(a, rc.paths.test);
  const auto profile = calibration_profile(a, rc, test_dir);
  const auto th = calibrate_thresholds(profile, costs, budget);
  const auto model = load_trained(rc);
  const auto scores = score_exits(model, load_matching(test_dir, rc).images);
  const auto r = budgeted_route(scores, th, costs);
  return {{"budget_gflops", *a.budget},
          {"thresholds", th.tau},
          {"accuracy", r.accuracy},
          {"mean_gflops", r.mean_cost / kMegaPerGiga},
          {"fractions", r.fractions()},
          {"samples", r.exit_taken.size()}};
}

inline nlohmann::json cmd_export_profile(const CliArgs& a, const RunConfig& rc) {
  const auto model = load_trained(rc);
  const auto data = load_matching(data_path(a, rc.paths.test), rc);
  const auto scores = score_exits(model, data.images);
  const auto path = need_out(a);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_profile(scores.profile, path);
  return {{"profile", path.string()},
          {"samples", scores.profile.samples},
          {"exits", scores.profile.exits}};
}

inline nlohmann::json cmd_count_params(const CliArgs&, const RunConfig& rc) {
  ViTConfig v = rc.vit.value_or(ViTConfig{});
  if (!rc.met.dprime) throw ConfigError("--dprime is required");
  const auto plan = rc.met.plan(v.layers);
  const auto d = static_cast<std::size_t>(v.dim), dp = static_cast<std::size_t>(*rc.met.dprime);
  const auto c = count_adapter_params(d, dp, v.layers, plan, rc.met.share_token);
  const auto naive = naive_param_count(d, dp, v.layers);
  return {{"dim", v.dim},
          {"layers", v.layers},
          {"dprime", dp},
          {"exit_layers", plan.exit_layers()},
          {"shared", c.shared},
          {"transforms", c.transforms},
          {"diagonals", c.diagonals},
          {"total", c.total},
          {"naive", naive},
          {"reduction_pct", 100.0 * (1.0 - static_cast<double>(c.total) / static_cast<double>(naive))},
          {"leading_order_reduction_pct",
           100.0 * (1.0 - static_cast<double>(c.shared) / static_cast<double>(naive))}};
}

inline nlohmann::json cmd_flops(const CliArgs&, const RunConfig& rc) {
  ViTConfig v = rc.vit.value_or(ViTConfig{});
  nlohmann::json j{{"baseline_gflops", baseline_vit_cost(v) / kMegaPerGiga},
                   {"dim", v.dim},
                   {"layers", v.layers},
                   {"image_size", v.height},
                   {"patch", v.patch}};
  if (!rc.met.exits.empty() || rc.met.num_exits) {
    const auto plan = rc.met.plan(v.layers);
    const auto t = flops_table(v, plan, rc.cost_config());
    j["exit_layers"] = plan.exit_layers();
    j["exit_gflops"] = to_giga(t);
  }
  return j;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Multiple-exit adapter tuning for vision transformers"};
  app.require_subcommand(1);
  detail::CliArgs a;

  app.add_option("--config", a.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", a.seed, "seed for weights, data and training");
  app.add_option("--out", a.out, "output directory (or file for export-profile/calibrate)");
  app.add_option("--exit", a.exit, "exit index for eval-anytime (1-based)");
  app.add_option("--budget", a.budget, "average budget in GFLOPs");
  app.add_option("--alpha", a.alpha, "graph penalty weight")->check(CLI::NonNegativeNumber);
  app.add_option("--lr", a.lr, "base learning rate");
  app.add_option("--weight-decay", a.weight_decay, "decoupled weight decay");
  app.add_option("--epochs", a.epochs, "training epochs");
  app.add_option("--dprime", a.dprime, "adapter bottleneck width");
  app.add_option("--exits", a.exits, "exit layers, comma separated")->delimiter(',');
  app.add_option("--num-exits", a.num_exits, "exits on the last layers");
  app.add_option("--merge-mode", a.merge_mode, "feature merge")
      ->check(CLI::IsMember({"residual-once", "branch-sum"}));
  app.add_flag("--share-token", a.share_token, "single shared class-token stream");
  app.add_option("--model", a.model, "trained model checkpoint prefix");
  app.add_option("--data", a.data, "dataset directory");
  app.add_option("--calib", a.calib, "calibration dataset directory");
  app.add_option("--profile", a.profile, "confidence profile CSV");
  app.add_option("--backbone", a.backbone, "backbone checkpoint prefix");
  app.add_option("--dim", a.dim, "embedding width");
  app.add_option("--layers", a.layers, "encoder depth");
  app.add_option("--heads", a.heads, "attention heads");
  app.add_option("--size", a.image_size, "square image side");
  app.add_option("--patch", a.patch, "patch side");
  app.add_option("--classes", a.classes, "class count");
  app.add_option("--per-class", a.per_class, "synthetic training samples per class");
  app.add_option("--test-per-class", a.test_per_class, "synthetic test samples per class");
  app.add_option("--noise", a.noise, "synthetic pixel noise sigma")->check(CLI::NonNegativeNumber);
  app.add_option("--pattern-seed", a.pattern_seed, "seed of the synthetic class patterns");

  using Handler = nlohmann::json (*)(const detail::CliArgs&, const RunConfig&);
  const std::vector<std::pair<std::string, std::pair<std::string, Handler>>> commands = {
      {"init-backbone", {"write seeded backbone weights", detail::cmd_init_backbone}},
      {"synth-data", {"write synthetic train/test datasets", detail::cmd_synth_data}},
      {"tune", {"train adapters and exit heads", detail::cmd_tune}},
      {"eval-anytime", {"static inference at one exit", detail::cmd_eval_anytime}},
      {"eval-budgeted", {"confidence-routed inference under a budget", detail::cmd_eval_budgeted}},
      {"calibrate", {"fit exit thresholds to a budget", detail::cmd_calibrate}},
      {"count-params", {"count trainable adapter elements", detail::cmd_count_params}},
      {"flops", {"per-exit inference cost", detail::cmd_flops}},
      {"export-profile", {"write per-exit confidences as CSV", detail::cmd_export_profile}},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, info] : commands) subs.push_back(app.add_subcommand(name, info.first)->fallthrough());

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    const auto rc = detail::resolve(a);
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      auto j = commands[i].second.second(a, rc);
      j["command"] = commands[i].first;
      out << j.dump(2) << "\n";
      return kExitOk;
    }
    return kExitUsage;
  } catch (const InfeasibleBudget& e) {
    err << "infeasible budget: " << e.what() << "\n";
    return kExitInfeasible;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace met
