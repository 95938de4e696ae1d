#pragma once

// Frozen ViT backbone: patch embedding, pre-LN encoder layers and the
// single-head baseline forward.
//
// Token matrices are batched: N samples are stacked as consecutive blocks of
// T rows each, so per-sample attention is expressed through AttentionLayout.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "met/ops.hpp"

namespace met {

struct ViTConfig {
  int height = 224;
  int width = 224;
  int patch = 16;
  int dim = 768;
  int layers = 12;
  int heads = 12;
  int mlp_ratio = 4;
  int classes = 1000;

  int num_patches() const { return (height / patch) * (width / patch); }
  int head_dim() const { return dim / heads; }
  int patch_elems() const { return 3 * patch * patch; }

  void validate() const {
    if (height <= 0 || width <= 0 || patch <= 0 || dim <= 0 || layers <= 0 || heads <= 0 ||
        classes <= 0)
      throw ConfigError("ViT config extents must be positive");
    if (height % patch != 0 || width % patch != 0)
      throw ConfigError("patch size " + std::to_string(patch) + " does not divide image " +
                        std::to_string(height) + "x" + std::to_string(width));
    if (dim % heads != 0)
      throw ConfigError("heads " + std::to_string(heads) + " do not divide dim " +
                        std::to_string(dim));
    if (mlp_ratio != 4) throw ConfigError("mlp ratio is fixed at 4");
  }
};

/// N images, channel-major (N×3×H×W), with labels.
struct ImageBatch {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_elems() const { return 3ull * static_cast<std::size_t>(height * width); }

  ImageBatch subset(std::span<const std::size_t> indices) const {
    ImageBatch out{height, width, {}, {}};
    out.pixels.reserve(indices.size() * image_elems());
    for (auto i : indices) {
      auto first = pixels.begin() + static_cast<std::ptrdiff_t>(i * image_elems());
      out.pixels.insert(out.pixels.end(), first,
                        first + static_cast<std::ptrdiff_t>(image_elems()));
      out.labels.push_back(labels[i]);
    }
    return out;
  }
};

struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv, watt;
  Tensor ln2_gamma, ln2_beta;
  Tensor wup, wdown;
};

struct BackboneWeights {
  ViTConfig config;
  Tensor proj;  // 3m² × d
  Tensor pos;   // (n+1) × d
  Tensor cls;   // 1 × d
  std::vector<LayerWeights> layers;
  Tensor lnf_gamma, lnf_beta;

  /// Seeded stand-in for pre-trained weights.
  static BackboneWeights init(const ViTConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto normal = [&](std::size_t r, std::size_t c, double sd) {
      std::normal_distribution<double> dist(0.0, sd);
      std::vector<double> v(r * c);
      for (auto& x : v) x = dist(rng);
      return Tensor::matrix(r, c, std::move(v));
    };
    const auto d = static_cast<std::size_t>(cfg.dim);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    BackboneWeights w;
    w.config = cfg;
    w.proj = normal(static_cast<std::size_t>(cfg.patch_elems()), d,
                    1.0 / std::sqrt(static_cast<double>(cfg.patch_elems())));
    w.pos = normal(static_cast<std::size_t>(cfg.num_patches() + 1), d, 0.02);
    w.cls = normal(1, d, 0.02);
    for (int k = 0; k < cfg.layers; ++k) {
      LayerWeights l;
      l.ln1_gamma = Tensor::filled({d}, 1.0);
      l.ln1_beta = Tensor::zeros({d});
      l.wq = normal(d, d, sd);
      l.wk = normal(d, d, sd);
      l.wv = normal(d, d, sd);
      l.watt = normal(d, d, sd);
      l.ln2_gamma = Tensor::filled({d}, 1.0);
      l.ln2_beta = Tensor::zeros({d});
      l.wup = normal(d, 4 * d, sd);
      l.wdown = normal(4 * d, d, 0.5 / std::sqrt(static_cast<double>(d)));
      w.layers.push_back(std::move(l));
    }
    w.lnf_gamma = Tensor::filled({d}, 1.0);
    w.lnf_beta = Tensor::zeros({d});
    return w;
  }

  /// Named views over every tensor, all frozen. Names follow `backbone.*`.
  std::vector<Parameter> parameters() const {
    std::vector<Parameter> out{{"backbone.proj", proj, false},
                               {"backbone.pos", pos, false},
                               {"backbone.cls", cls, false}};
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto p = "backbone.layer." + std::to_string(k + 1) + ".";
      const auto& l = layers[k];
      out.push_back({p + "ln1.gamma", l.ln1_gamma, false});
      out.push_back({p + "ln1.beta", l.ln1_beta, false});
      out.push_back({p + "wq", l.wq, false});
      out.push_back({p + "wk", l.wk, false});
      out.push_back({p + "wv", l.wv, false});
      out.push_back({p + "watt", l.watt, false});
      out.push_back({p + "ln2.gamma", l.ln2_gamma, false});
      out.push_back({p + "ln2.beta", l.ln2_beta, false});
      out.push_back({p + "wup", l.wup, false});
      out.push_back({p + "wdown", l.wdown, false});
    }
    out.push_back({"backbone.lnf.gamma", lnf_gamma, false});
    out.push_back({"backbone.lnf.beta", lnf_beta, false});
    return out;
  }

  /// Expected shape for every backbone name.
  static std::vector<std::pair<std::string, Shape>> layout(const ViTConfig& cfg) {
    const auto d = static_cast<std::size_t>(cfg.dim);
    std::vector<std::pair<std::string, Shape>> out{
        {"backbone.proj", {static_cast<std::size_t>(cfg.patch_elems()), d}},
        {"backbone.pos", {static_cast<std::size_t>(cfg.num_patches() + 1), d}},
        {"backbone.cls", {1, d}}};
    for (int k = 1; k <= cfg.layers; ++k) {
      const auto p = "backbone.layer." + std::to_string(k) + ".";
      out.push_back({p + "ln1.gamma", {d}});
      out.push_back({p + "ln1.beta", {d}});
      for (const char* n : {"wq", "wk", "wv", "watt"}) out.push_back({p + n, {d, d}});
      out.push_back({p + "ln2.gamma", {d}});
      out.push_back({p + "ln2.beta", {d}});
      out.push_back({p + "wup", {d, 4 * d}});
      out.push_back({p + "wdown", {4 * d, d}});
    }
    out.push_back({"backbone.lnf.gamma", {d}});
    out.push_back({"backbone.lnf.beta", {d}});
    return out;
  }
};

/// Linear classifier with bias.
struct LinearHead {
  Tensor weight;  // d × classes
  Tensor bias;    // classes

  static LinearHead zeros(int dim, int classes, bool trainable) {
    return {Tensor::zeros({static_cast<std::size_t>(dim), static_cast<std::size_t>(classes)},
                          trainable),
            Tensor::zeros({static_cast<std::size_t>(classes)}, trainable)};
  }

  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }
};

/// Flattened patches, one row per (sample, patch) in raster order; each row is
/// channel-major then row then column within the patch.
inline Tensor extract_patches(const ImageBatch& batch, const ViTConfig& cfg) {
  if (batch.height != cfg.height || batch.width != cfg.width)
    throw ConfigError("image " + std::to_string(batch.height) + "x" + std::to_string(batch.width) +
                      " does not match config " + std::to_string(cfg.height) + "x" +
                      std::to_string(cfg.width));
  cfg.validate();
  const int m = cfg.patch, gh = cfg.height / m, gw = cfg.width / m;
  const std::size_t N = batch.size(), n = static_cast<std::size_t>(gh * gw);
  const std::size_t pe = static_cast<std::size_t>(cfg.patch_elems());
  std::vector<double> rows(N * n * pe);
  std::size_t o = 0;
  for (std::size_t s = 0; s < N; ++s) {
    const double* img = batch.pixels.data() + s * batch.image_elems();
    for (int py = 0; py < gh; ++py)
      for (int px = 0; px < gw; ++px)
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < m; ++y)
            for (int x = 0; x < m; ++x)
              rows[o++] = img[(static_cast<std::size_t>(c) * static_cast<std::size_t>(cfg.height) +
                               static_cast<std::size_t>(py * m + y)) *
                                  static_cast<std::size_t>(cfg.width) +
                              static_cast<std::size_t>(px * m + x)];
  }
  return Tensor::matrix(N * n, pe, std::move(rows));
}

/// Per-sample blocks [c + pos₀; xᵢ·P + posᵢ], (N·(n+1)) × d.
inline Tensor patch_embed(const ImageBatch& batch, const BackboneWeights& w) {
  const auto& cfg = w.config;
  const std::size_t N = batch.size(), n = static_cast<std::size_t>(cfg.num_patches());
  if (N == 0) throw DataError("empty image batch");
  auto projected = matmul(extract_patches(batch, cfg), w.proj);  // (N·n) × d
  auto stacked = concat_rows({w.cls, projected});                // row 0 is the class token
  std::vector<std::size_t> order, pos_idx;
  order.reserve(N * (n + 1));
  for (std::size_t s = 0; s < N; ++s) {
    order.push_back(0);
    pos_idx.push_back(0);
    for (std::size_t i = 0; i < n; ++i) {
      order.push_back(1 + s * n + i);
      pos_idx.push_back(1 + i);
    }
  }
  return add(gather_rows(stacked, std::move(order)), gather_rows(w.pos, std::move(pos_idx)));
}

/// x + MHA(LN(x)) with the layer's projections.
inline Tensor mha(const Tensor& tokens, const LayerWeights& l, const AttentionLayout& layout) {
  auto h = layer_norm(tokens, l.ln1_gamma, l.ln1_beta);
  auto att = attention(matmul(h, l.wq), matmul(h, l.wk), matmul(h, l.wv), layout);
  return add(matmul(att, l.watt), tokens);
}

/// x + GELU(LN(x)·W_up)·W_down.
inline Tensor ffn(const Tensor& tokens, const LayerWeights& l) {
  auto h = layer_norm(tokens, l.ln2_gamma, l.ln2_beta);
  return add(matmul(gelu(matmul(h, l.wup)), l.wdown), tokens);
}

/// Rows s·segment + offset for s in [0, samples).
inline std::vector<std::size_t> strided_rows(std::size_t samples, std::size_t segment,
                                             std::size_t offset) {
  std::vector<std::size_t> idx(samples);
  for (std::size_t s = 0; s < samples; ++s) idx[s] = s * segment + offset;
  return idx;
}

/// Plain ViT: L layers, final LN on the class token, linear head.
inline Tensor vit_forward_baseline(const ImageBatch& batch, const BackboneWeights& w,
                                   const LinearHead& head) {
  const auto T = static_cast<std::size_t>(w.config.num_patches() + 1);
  AttentionLayout layout{T, static_cast<std::size_t>(w.config.heads), 0};
  auto x = patch_embed(batch, w);
  for (const auto& l : w.layers) x = ffn(mha(x, l, layout), l);
  auto cls = gather_rows(x, strided_rows(batch.size(), T, 0));
  return head(layer_norm(cls, w.lnf_gamma, w.lnf_beta));
}

}  // namespace met
