#pragma once

#include <random>

#include "met/multi_exit.hpp"

namespace fixtures {

inline met::ViTConfig tiny_vit(int layers = 2, int dim = 8, int heads = 2, int size = 8,
                               int patch = 4, int classes = 3) {
  met::ViTConfig c;
  c.height = c.width = size;
  c.patch = patch;
  c.dim = dim;
  c.layers = layers;
  c.heads = heads;
  c.classes = classes;
  return c;
}

inline met::ImageBatch random_batch(std::size_t n, int size, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> px(0.0, 1.0);
  met::ImageBatch b{size, size, {}, {}};
  b.pixels.resize(n * 3 * static_cast<std::size_t>(size * size));
  for (auto& v : b.pixels) v = px(rng);
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(i % static_cast<std::size_t>(classes)));
  return b;
}

inline void fill_normal(met::Tensor t, std::mt19937_64& rng, double sd, double mean = 0.0) {
  std::normal_distribution<double> dist(mean, sd);
  for (auto& v : t.mutable_data()) v = dist(rng);
}

/// Perturbs every bank tensor (including U_up and the diagonals) so adapters
/// are far from the identity.
inline void randomize_bank(met::EAdapterBank& bank, std::uint64_t seed, double sd = 0.3) {
  std::mt19937_64 rng(seed);
  for (auto& p : bank.parameters()) {
    if (p.name.find("lambda") != std::string::npos)
      fill_normal(p.tensor, rng, 0.5, 1.0);
    else
      fill_normal(p.tensor, rng, sd);
  }
}

inline void randomize_heads(met::ExitHeads& heads, std::uint64_t seed, double sd = 0.5) {
  std::mt19937_64 rng(seed);
  for (auto& p : heads.parameters()) fill_normal(p.tensor, rng, sd);
}

/// Non-trivial LN affine parameters so LN bugs cannot hide behind γ=1, β=0.
inline void randomize_norms(met::BackboneWeights& w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& l : w.layers) {
    fill_normal(l.ln1_gamma, rng, 0.2, 1.0);
    fill_normal(l.ln1_beta, rng, 0.2);
    fill_normal(l.ln2_gamma, rng, 0.2, 1.0);
    fill_normal(l.ln2_beta, rng, 0.2);
  }
  fill_normal(w.lnf_gamma, rng, 0.2, 1.0);
  fill_normal(w.lnf_beta, rng, 0.2);
}

}  // namespace fixtures
