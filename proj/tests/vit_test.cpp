#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "met/vit.hpp"
#include "oracle.hpp"

using namespace met;

namespace {

void zero(Tensor t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST(ViTConfig, ValidatesDivisibility) {
  auto c = fixtures::tiny_vit();
  EXPECT_NO_THROW(c.validate());
  c.patch = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = fixtures::tiny_vit();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = fixtures::tiny_vit();
  c.mlp_ratio = 2;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ViTConfig, PatchArithmetic) {
  const auto c = fixtures::tiny_vit();  // 8×8, m=4
  EXPECT_EQ(c.num_patches(), 4);
  EXPECT_EQ(c.head_dim(), 4);
  EXPECT_EQ(c.patch_elems(), 48);
  ViTConfig b16;
  EXPECT_EQ(b16.num_patches(), 196);
}

TEST(Backbone, AllParametersFrozenWithLayoutShapes) {
  const auto cfg = fixtures::tiny_vit(3);
  const auto w = BackboneWeights::init(cfg, 1);
  const auto params = w.parameters();
  const auto layout = BackboneWeights::layout(cfg);
  ASSERT_EQ(params.size(), layout.size());
  std::set<std::string> names;
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_FALSE(params[i].trainable);
    EXPECT_FALSE(params[i].tensor.requires_grad());
    EXPECT_EQ(params[i].name, layout[i].first);
    EXPECT_EQ(params[i].tensor.shape(), layout[i].second) << params[i].name;
    EXPECT_TRUE(names.insert(params[i].name).second);
  }
}

TEST(PatchEmbed, ZeroImageZeroPosition) {
  const auto cfg = fixtures::tiny_vit();
  auto w = BackboneWeights::init(cfg, 2);
  zero(w.pos);
  auto batch = fixtures::random_batch(1, 8, 3, 3);
  std::fill(batch.pixels.begin(), batch.pixels.end(), 0.0);
  const auto t = patch_embed(batch, w);
  ASSERT_EQ(t.shape(), (Shape{5, 8}));
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(t.at(0, j), w.cls[j]);
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(t.at(i, j), 0.0);
}

TEST(PatchEmbed, MatchesExplicitPatchOracle) {
  const auto cfg = fixtures::tiny_vit();
  const auto w = BackboneWeights::init(cfg, 4);
  const auto batch = fixtures::random_batch(3, 8, 3, 5);
  const auto t = patch_embed(batch, w);
  ASSERT_EQ(t.shape(), (Shape{15, 8}));
  for (std::size_t s = 0; s < 3; ++s) {
    const auto ref = oracle::embed(batch, s, w);
    std::vector<double> got(t.data().begin() + static_cast<std::ptrdiff_t>(s * 5 * 8),
                            t.data().begin() + static_cast<std::ptrdiff_t>((s + 1) * 5 * 8));
    EXPECT_LE(oracle::max_abs_diff(got, ref.v), 1e-12);
  }
}

TEST(PatchEmbed, MismatchedImageSizeThrows) {
  const auto w = BackboneWeights::init(fixtures::tiny_vit(), 1);
  const auto batch = fixtures::random_batch(1, 12, 3, 1);
  EXPECT_THROW(patch_embed(batch, w), ConfigError);
}

TEST(Mha, ZeroValueProjectionIsResidual) {
  auto w = BackboneWeights::init(fixtures::tiny_vit(), 6);
  zero(w.layers[0].wv);
  std::mt19937_64 rng(7);
  auto x = oracle::tensor(oracle::random_mat(5, 8, rng));
  const auto y = mha(x, w.layers[0], {5, 2, 0});
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Mha, SingletonSequenceAttendsToItself) {
  auto w = BackboneWeights::init(fixtures::tiny_vit(), 8);
  fixtures::randomize_norms(w, 9);
  std::mt19937_64 rng(10);
  const auto xm = oracle::random_mat(1, 8, rng);
  const auto y = mha(oracle::tensor(xm), w.layers[0], {1, 2, 0});
  const auto& l = w.layers[0];
  const auto h = oracle::layer_norm(xm, oracle::vec(l.ln1_gamma), oracle::vec(l.ln1_beta));
  const auto ref = oracle::add(oracle::matmul(oracle::matmul(h, oracle::from(l.wv)), oracle::from(l.watt)), xm);
  EXPECT_LE(oracle::max_abs_diff(oracle::vec(y), ref.v), 1e-12);
}

TEST(Mha, MatchesPerHeadOracle) {
  auto cfg = fixtures::tiny_vit(1, 4, 2);
  auto w = BackboneWeights::init(cfg, 11);
  fixtures::randomize_norms(w, 12);
  std::mt19937_64 rng(13);
  const auto xm = oracle::random_mat(3, 4, rng);
  const auto y = mha(oracle::tensor(xm), w.layers[0], {3, 2, 0});
  EXPECT_LE(oracle::max_abs_diff(oracle::vec(y), oracle::mha(xm, w.layers[0], 2).v), 1e-10);
}

TEST(Mha, SegmentsAreIndependent) {
  auto w = BackboneWeights::init(fixtures::tiny_vit(), 14);
  std::mt19937_64 rng(15);
  const auto a = oracle::random_mat(3, 8, rng), b = oracle::random_mat(3, 8, rng);
  Tensor both = concat_rows({oracle::tensor(a), oracle::tensor(b)});
  const auto y = mha(both, w.layers[0], {3, 2, 0});
  const auto yb = oracle::mha(b, w.layers[0], 2);
  std::vector<double> got(y.data().begin() + 24, y.data().end());
  EXPECT_LE(oracle::max_abs_diff(got, yb.v), 1e-10);
}

TEST(Attention, RowsSumToOne) {
  std::mt19937_64 rng(16);
  auto q = oracle::tensor(oracle::random_mat(10, 8, rng, 3.0));
  auto k = oracle::tensor(oracle::random_mat(10, 8, rng, 3.0));
  for (AttentionLayout layout : {AttentionLayout{5, 2, 0}, AttentionLayout{5, 4, 3}}) {
    const auto p = attention_probs(q, k, layout);
    const std::size_t T = layout.segment;
    ASSERT_EQ(p.size(), 2 * layout.heads * T * T);
    for (std::size_t r = 0; r < p.size() / T; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < T; ++j) s += p[r * T + j];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Ffn, ZeroDownIsResidual) {
  auto w = BackboneWeights::init(fixtures::tiny_vit(), 17);
  zero(w.layers[0].wdown);
  std::mt19937_64 rng(18);
  auto x = oracle::tensor(oracle::random_mat(4, 8, rng));
  const auto y = ffn(x, w.layers[0]);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Ffn, ZeroTokensWithZeroBetaGiveZero) {
  const auto w = BackboneWeights::init(fixtures::tiny_vit(), 19);
  const auto y = ffn(Tensor::zeros({3, 8}), w.layers[0]);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Ffn, MatchesComposedOracle) {
  auto w = BackboneWeights::init(fixtures::tiny_vit(), 20);
  fixtures::randomize_norms(w, 21);
  std::mt19937_64 rng(22);
  const auto xm = oracle::random_mat(1, 8, rng);
  const auto y = ffn(oracle::tensor(xm), w.layers[0]);
  EXPECT_LE(oracle::max_abs_diff(oracle::vec(y), oracle::ffn(xm, w.layers[0]).v), 1e-10);
}

TEST(Layers, PreserveShape) {
  const auto w = BackboneWeights::init(fixtures::tiny_vit(), 23);
  std::mt19937_64 rng(24);
  auto x = oracle::tensor(oracle::random_mat(10, 8, rng));
  EXPECT_EQ(mha(x, w.layers[0], {5, 2, 0}).shape(), x.shape());
  EXPECT_EQ(ffn(x, w.layers[0]).shape(), x.shape());
}

TEST(Baseline, ZeroWeightsGiveZeroLogits) {
  auto w = BackboneWeights::init(fixtures::tiny_vit(), 25);
  for (auto& p : w.parameters()) zero(p.tensor);
  const auto head = LinearHead::zeros(8, 3, false);
  const auto logits = vit_forward_baseline(fixtures::random_batch(2, 8, 3, 26), w, head);
  ASSERT_EQ(logits.shape(), (Shape{2, 3}));
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Baseline, DeterministicUnderSeed) {
  const auto cfg = fixtures::tiny_vit();
  const auto batch = fixtures::random_batch(3, 8, 3, 27);
  auto run = [&] {
    auto w = BackboneWeights::init(cfg, 28);
    auto head = LinearHead::zeros(8, 3, false);
    std::mt19937_64 rng(29);
    fixtures::fill_normal(head.weight, rng, 1.0);
    return oracle::vec(vit_forward_baseline(batch, w, head));
  };
  EXPECT_EQ(run(), run());
}

TEST(Baseline, MatchesStraightLineOracle) {
  const auto cfg = fixtures::tiny_vit();
  auto w = BackboneWeights::init(cfg, 30);
  fixtures::randomize_norms(w, 31);
  auto head = LinearHead::zeros(8, 3, false);
  std::mt19937_64 rng(32);
  fixtures::fill_normal(head.weight, rng, 1.0);
  fixtures::fill_normal(head.bias, rng, 1.0);
  const auto batch = fixtures::random_batch(3, 8, 3, 33);
  const auto logits = vit_forward_baseline(batch, w, head);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto ref = oracle::vit_logits(batch, s, w, head);
    std::vector<double> got(logits.data().begin() + static_cast<std::ptrdiff_t>(3 * s),
                            logits.data().begin() + static_cast<std::ptrdiff_t>(3 * s + 3));
    EXPECT_LE(oracle::max_abs_diff(got, ref), 1e-10);
  }
}

TEST(ImageBatch, SubsetCopiesSamplesAndLabels) {
  const auto b = fixtures::random_batch(4, 8, 3, 34);
  const std::vector<std::size_t> idx{2, 0};
  const auto s = b.subset(idx);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.labels, (std::vector<int>{2, 0}));
  EXPECT_EQ(oracle::image(s, 0), oracle::image(b, 2));
}
