#include "oracles.hpp"
#include "paattack/harness.hpp"
#include "paattack/micro_encoder.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace paattack;
using namespace paattack::testing;

TEST(Srr, Arithmetic) {
  const auto r = srr(0.8, 0.2);
  EXPECT_DOUBLE_EQ(r.srr, 0.75);
  EXPECT_EQ(srr(0.5, 0.5).srr, 0.0);
  EXPECT_LT(srr(0.5, 0.6).srr, 0.0);
  EXPECT_THROW(srr(0.0, 0.1), Error);
  EXPECT_THROW(srr(0.5, -0.1), Error);
  // Published scores in percent points.
  EXPECT_NEAR(srr(115.5, 6.1).srr, 0.9472, 5e-5);
  EXPECT_NEAR(srr(77.5, 4.7).srr, 0.9394, 5e-5);
}

TEST(Metrics, SpearmanMatchesCountingOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(12), b(12);
    for (auto& v : a) v = std::round(rng.uniform(0, 5));  // ties on purpose
    for (auto& v : b) v = rng.uniform(-1, 1);
    EXPECT_NEAR(spearman(a, b), oracle::spearman(a, b), 1e-12);
  }
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-15);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-15);
  EXPECT_THROW(spearman({1}, {1}), Error);
}

TEST(Metrics, AttentionShiftOfIdenticalWeights) {
  const std::vector<double> w{0.1, 0.4, 0.2, 0.3};
  const auto s = attention_shift(w, w, 2);
  EXPECT_NEAR(s.spearman, 1.0, 1e-15);
  EXPECT_EQ(s.l1, 0.0);
  EXPECT_EQ(s.top_k_overlap, 1.0);
  const auto moved = attention_shift(w, {0.4, 0.1, 0.3, 0.2}, 2);
  EXPECT_NEAR(moved.l1, 0.8, 1e-15);  // 0.3 + 0.3 + 0.1 + 0.1
  EXPECT_EQ(moved.top_k_overlap, 0.0);
}

TEST(Probe, SeparableDataIsFitPerfectly) {
  Rng rng(1);
  std::vector<Vector<double>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) {
    const int label = i % 3;
    Vector<double> f = random_vector(5, rng, 0.1);
    f(label) += 2.0;
    feats.push_back(f);
    labels.push_back(label);
  }
  for (const auto& opt : {ProbeOptions{}, task_probe_options()}) {
    const LinearProbe probe = fit_linear_probe(feats, labels, 4, opt);
    int correct = 0;
    for (size_t i = 0; i < feats.size(); ++i) correct += probe.predict(feats[i]) == labels[i];
    EXPECT_EQ(correct, 60);
  }
}

TEST(Probe, HomogeneousProbeIgnoresPositiveScale) {
  Rng rng(2);
  std::vector<Vector<double>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    feats.push_back(random_vector(6, rng));
    labels.push_back(i % 4);
  }
  const LinearProbe probe = fit_linear_probe(feats, labels, 1, task_probe_options());
  EXPECT_EQ(probe.bias.norm(), 0.0);
  for (const auto& f : feats) EXPECT_EQ(probe.predict(f), probe.predict(Vector<double>(0.37 * f)));
}

TEST(Probe, DegenerateLabels) {
  std::vector<Vector<double>> feats(4, Vector<double>::Ones(2));
  auto code = [&](const std::vector<int>& labels) {
    try {
      fit_linear_probe(feats, labels, 0);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::Io;
  };
  EXPECT_EQ(code({0, 0, 0, 0}), ErrorCode::DegenerateLabels);
  EXPECT_EQ(code({0, 0, 0, 1}), ErrorCode::DegenerateLabels);
  EXPECT_EQ(code({0, -1, 1, 1}), ErrorCode::DegenerateLabels);
}

TEST(ProbeFeatures, MeanPoolingAndMasks) {
  Matrix<double> tokens(2, 3);
  tokens << 1, 2, 3, 3, 4, 5;
  EXPECT_EQ(probe_features(tokens, ProbeFeatures::MeanPooled), Vector<double>((Vector<double>(3) << 2, 3, 4).finished()));
  const std::vector<bool> mask{true, false};
  EXPECT_EQ(probe_features(tokens, ProbeFeatures::MeanPooled, &mask),
            Vector<double>((Vector<double>(3) << 1.5, 2, 2.5).finished()));
  const auto t = probe_features(tokens, ProbeFeatures::Tokens, &mask);
  EXPECT_EQ(t.head(3).norm(), 0.0);
  EXPECT_NEAR(t.tail(3).norm(), 1.0, 1e-15);
}

class FixtureTask : public ::testing::Test {
 protected:
  MicroEncoder<double> enc{toy_config()};
  std::vector<LabeledImage> probe_set = synthetic_dataset(32, 4, 1, "probe", 3, 8, 8);
  std::vector<LabeledImage> eval_set = synthetic_dataset(8, 4, 1, "eval", 3, 8, 8);
  SurrogateTask task = train_probe(enc, probe_set, 1);

  std::vector<ImageTensor<double>> images() const {
    std::vector<ImageTensor<double>> out;
    for (const auto& e : eval_set) out.push_back(e.image);
    return out;
  }
  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& e : eval_set) out.push_back(e.label);
    return out;
  }
};

TEST_F(FixtureTask, MaskingAtZeroIsANoOp) {
  const double base = score_images(enc, task, images(), labels());
  for (auto strategy : {MaskStrategy::Random, MaskStrategy::AttentionKeepHigh}) {
    const auto curve = token_mask_experiment(enc, task, images(), labels(), {0.0}, strategy, 3);
    EXPECT_EQ(curve[0].score, base);
  }
}

TEST_F(FixtureTask, MaskingEverythingLeavesOnlyTheDefaultClass) {
  // All-zero features give all-zero logits; argmax picks class 0.
  const auto curve = token_mask_experiment(enc, task, images(), labels(), {1.0}, MaskStrategy::Random, 3);
  EXPECT_DOUBLE_EQ(curve[0].score, 0.25);
  EXPECT_THROW(token_mask_experiment(enc, task, images(), labels(), {1.5}, MaskStrategy::Random, 3), Error);
}

TEST_F(FixtureTask, RandomMaskingDependsOnSeedOnly) {
  const auto a = token_mask_experiment(enc, task, images(), labels(), {0.25, 0.5}, MaskStrategy::Random, 9);
  const auto b = token_mask_experiment(enc, task, images(), labels(), {0.25, 0.5}, MaskStrategy::Random, 9);
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].score, b[i].score);
}

TEST_F(FixtureTask, RetrievalOfCleanImagesIsPerfect) {
  const SurrogateTask r = retrieval_task(enc, images());
  EXPECT_EQ(score_images(enc, r, images(), labels()), 1.0);
}

TEST_F(FixtureTask, ZeroStepAblationHasZeroSrr) {
  std::vector<ImageTensor<double>> guide;
  std::vector<std::string> ids;
  for (const auto& g : synthetic_dataset(8, 4, 2, "guide", 3, 8, 8)) {
    guide.push_back(g.image);
    ids.push_back(g.id);
  }
  const auto bank = build_prototype_bank(build_memory(enc, guide, ids, {}), {4, 2, 0, GuidanceMode::FarthestPrototype});
  AttackConfig base;
  base.s1 = 0;
  base.s2 = 0;
  base.eta = 0.0;
  const auto rows = ablation_suite(enc, bank, eval_set, task, expand_grid(base, ""));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].report.srr, 0.0);

  base.s1 = 2;
  base.s2 = 2;
  base.eta.reset();
  const auto grid = expand_grid(base, "guidance=on,off;stages=1,2");
  const auto serial = ablation_suite(enc, bank, eval_set, task, grid, 1);
  const auto parallel = ablation_suite(enc, bank, eval_set, task, grid, 3);
  ASSERT_EQ(serial.size(), 4u);
  for (size_t i = 0; i < serial.size(); ++i) EXPECT_EQ(serial[i].report.score_adv, parallel[i].report.score_adv);
}

TEST(Grid, ExpansionOrderAndErrors) {
  const auto cells = expand_grid(AttackConfig{}, "guidance=on,off;stages=1,2,3");
  ASSERT_EQ(cells.size(), 6u);
  EXPECT_EQ(cells[0].label(), "guidance=on;stages=1");
  EXPECT_EQ(cells[1].label(), "guidance=on;stages=2");
  EXPECT_EQ(cells[3].label(), "guidance=off;stages=1");
  EXPECT_FALSE(cells[4].config.use_guidance);
  EXPECT_EQ(cells[4].config.stages, 2);
  EXPECT_EQ(expand_grid(AttackConfig{}, "").size(), 1u);
  EXPECT_EQ(expand_grid(AttackConfig{}, "").front().label(), "base");
  EXPECT_THROW(expand_grid(AttackConfig{}, "colour=red"), Error);
  EXPECT_THROW(expand_grid(AttackConfig{}, "stages=x"), Error);
  EXPECT_THROW(expand_grid(AttackConfig{}, "stages=0"), Error);
  const auto csv = ablation_csv({{cells[0], srr(1.0, 0.5)}}, 4);
  EXPECT_EQ(csv.rfind("# seed=4\n", 0), 0u);
}

TEST(Synthetic, DeterministicBalancedAndInRange) {
  const auto a = synthetic_dataset(12, 4, 5, "x"), b = synthetic_dataset(12, 4, 5, "x");
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.pixels, b[i].image.pixels);
    EXPECT_EQ(a[i].label, static_cast<int>(i % 4));
    EXPECT_TRUE(a[i].image.valid());
  }
  EXPECT_NE(synthetic_dataset(1, 4, 5, "y")[0].image.pixels, a[0].image.pixels);
}
