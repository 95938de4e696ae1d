#pragma once

// JSON run configuration and model persistence.
//
// Schema (all sections optional unless a command needs them):
//   vit:   {image_size | height+width, patch, dim, layers, heads, classes, mlp_ratio=4}
//   met:   {dprime, exits: [layers] | num_exits, merge_mode, share_token,
//           mask_cross_exit, penalty_post_ln}
//   train: {lr, weight_decay, alpha, seed, batch=32, epochs=100, warmup_epochs=10}
//   synth: {classes, per_class, test_per_class, image_size, noise, pattern_seed}
//   paths: {backbone, train, val, test, model}  (relative to the config file)

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "met/checkpoint.hpp"
#include "met/dataset.hpp"
#include "met/inference.hpp"
#include "met/trainer.hpp"

namespace met {

struct MetSection {
  std::optional<int> dprime;
  std::vector<int> exits;  // exit layers; empty means derive from num_exits
  std::optional<int> num_exits;
  MergeMode merge = MergeMode::kResidualOnce;
  bool share_token = false;
  bool mask_cross_exit = false;
  bool penalty_post_ln = false;

  ExitPlan plan(int layers) const {
    if (!exits.empty()) return ExitPlan(layers, exits);
    if (!num_exits) throw ConfigError("met.exits or met.num_exits is required");
    return ExitPlan::last_layers(layers, *num_exits);
  }
};

struct TrainSection {
  std::optional<double> lr, weight_decay, alpha;
  std::optional<std::uint64_t> seed;
  int batch = 32;
  int epochs = 100;
  int warmup_epochs = 10;
};

struct PathSection {
  std::filesystem::path backbone, train, val, test, model;
};

struct RunConfig {
  std::optional<ViTConfig> vit;
  MetSection met;
  TrainSection train;
  std::optional<SynthSpec> synth;
  int test_per_class = 50;
  PathSection paths;

  const ViTConfig& vit_or_throw() const {
    if (!vit) throw ConfigError("config has no vit section");
    return *vit;
  }

  /// Training config; every field without a listed default must be set.
  TrainConfig train_config() const {
    const auto& v = vit_or_throw();
    auto need = [](const auto& opt, const char* name) {
      if (!opt) throw ConfigError(std::string("missing required setting ") + name);
      return *opt;
    };
    TrainConfig c;
    c.lr = need(train.lr, "train.lr");
    c.weight_decay = need(train.weight_decay, "train.weight_decay");
    c.alpha = need(train.alpha, "train.alpha");
    c.seed = need(train.seed, "train.seed");
    c.dprime = need(met.dprime, "met.dprime");
    c.batch = train.batch;
    c.epochs = train.epochs;
    c.warmup_epochs = train.warmup_epochs;
    c.plan = met.plan(v.layers);
    c.merge = met.merge;
    c.share_token = met.share_token;
    c.mask_cross_exit = met.mask_cross_exit;
    c.penalty_post_ln = met.penalty_post_ln;
    c.validate();
    return c;
  }

  CostModelConfig cost_config() const { return {met.dprime.value_or(0), met.share_token}; }
};

namespace detail {

template <class T>
std::optional<T> opt_field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

inline void reject_unknown(const nlohmann::json& j, const char* section,
                           std::initializer_list<const char*> known) {
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* n : known) ok = ok || k == n;
    if (!ok) throw ConfigError(std::string("unknown key '") + k + "' in " + section);
  }
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  RunConfig rc;
  try {
    detail::reject_unknown(j, "config", {"vit", "met", "train", "synth", "paths"});
    if (j.contains("vit")) {
      const auto& v = j.at("vit");
      detail::reject_unknown(v, "vit", {"image_size", "height", "width", "patch", "dim", "layers",
                                        "heads", "classes", "mlp_ratio"});
      ViTConfig c;
      if (v.contains("image_size")) c.height = c.width = v.at("image_size").get<int>();
      if (v.contains("height")) c.height = v.at("height").get<int>();
      if (v.contains("width")) c.width = v.at("width").get<int>();
      c.patch = v.at("patch").get<int>();
      c.dim = v.at("dim").get<int>();
      c.layers = v.at("layers").get<int>();
      c.heads = v.at("heads").get<int>();
      c.classes = v.at("classes").get<int>();
      c.mlp_ratio = v.value("mlp_ratio", 4);
      c.validate();
      rc.vit = c;
    }
    if (j.contains("met")) {
      const auto& m = j.at("met");
      detail::reject_unknown(m, "met", {"dprime", "exits", "num_exits", "merge_mode", "share_token",
                                        "mask_cross_exit", "penalty_post_ln"});
      rc.met.dprime = detail::opt_field<int>(m, "dprime");
      if (m.contains("exits")) rc.met.exits = m.at("exits").get<std::vector<int>>();
      rc.met.num_exits = detail::opt_field<int>(m, "num_exits");
      if (m.contains("merge_mode")) rc.met.merge = parse_merge_mode(m.at("merge_mode").get<std::string>());
      rc.met.share_token = m.value("share_token", false);
      rc.met.mask_cross_exit = m.value("mask_cross_exit", false);
      rc.met.penalty_post_ln = m.value("penalty_post_ln", false);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::reject_unknown(t, "train", {"lr", "weight_decay", "alpha", "seed", "batch", "epochs",
                                          "warmup_epochs"});
      rc.train.lr = detail::opt_field<double>(t, "lr");
      rc.train.weight_decay = detail::opt_field<double>(t, "weight_decay");
      rc.train.alpha = detail::opt_field<double>(t, "alpha");
      rc.train.seed = detail::opt_field<std::uint64_t>(t, "seed");
      rc.train.batch = t.value("batch", 32);
      rc.train.epochs = t.value("epochs", 100);
      rc.train.warmup_epochs = t.value("warmup_epochs", 10);
    }
    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      detail::reject_unknown(s, "synth", {"classes", "per_class", "test_per_class", "image_size",
                                          "noise", "pattern_seed"});
      SynthSpec sp;
      sp.classes = s.at("classes").get<int>();
      sp.per_class = s.at("per_class").get<int>();
      sp.height = sp.width = s.at("image_size").get<int>();
      sp.noise = s.at("noise").get<double>();
      sp.pattern_seed = s.at("pattern_seed").get<std::uint64_t>();
      rc.test_per_class = s.value("test_per_class", sp.per_class);
      rc.synth = sp;
    }
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      detail::reject_unknown(p, "paths", {"backbone", "train", "val", "test", "model"});
      auto rel = [&](const char* key) -> std::filesystem::path {
        if (!p.contains(key)) return {};
        std::filesystem::path v = p.at(key).get<std::string>();
        return v.is_absolute() ? v : base_dir / v;
      };
      rc.paths = {rel("backbone"), rel("train"), rel("val"), rel("test"), rel("model")};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return rc;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path());
}

// ---------------------------------------------------------------- models

inline BackboneWeights load_backbone(const std::filesystem::path& prefix, const ViTConfig& cfg) {
  auto w = BackboneWeights::init(cfg, 0);
  auto params = w.parameters();
  assign_checkpoint(load_checkpoint(prefix), params);
  return w;
}

/// Saves the trainable parts (bank and heads); the backbone is referenced by config.
inline CheckpointManifest save_model(const MetModel& model, const std::filesystem::path& prefix) {
  const auto params = model.trainable();
  return save_checkpoint(params, prefix);
}

inline MetModel load_model(const std::filesystem::path& prefix, const RunConfig& rc,
                           const BackboneWeights& backbone) {
  const auto& v = rc.vit_or_throw();
  if (!rc.met.dprime) throw ConfigError("missing required setting met.dprime");
  const auto plan = rc.met.plan(v.layers);
  MetModel model{backbone,
                 EAdapterBank::init(v.dim, *rc.met.dprime, plan, rc.met.share_token, 0),
                 ExitHeads::zeros(plan.exits(), v.dim, v.classes),
                 {rc.met.merge, rc.met.mask_cross_exit}};
  auto params = model.trainable();
  assign_checkpoint(load_checkpoint(prefix), params);
  return model;
}

}  // namespace met
