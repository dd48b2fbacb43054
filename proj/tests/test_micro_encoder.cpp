#include "paattack/gradcheck.hpp"
#include "paattack/micro_encoder.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace paattack;
using namespace paattack::testing;

TEST(MicroEncoder, ToyShapes) {
  const MicroEncoder<double> enc(toy_config());
  const auto info = enc.info();
  EXPECT_EQ(info.num_tokens, 4);
  EXPECT_EQ(info.layers, 2);
  EXPECT_EQ(info.heads, 2);
  EXPECT_EQ(info.dim, 16);
  EXPECT_EQ(enc.params().pos_embed.rows(), 5);
  EXPECT_EQ(enc.params().layers.size(), 2u);
}

TEST(MicroEncoder, InitIsBitReproducible) {
  const MicroEncoder<double> a(toy_config()), b(toy_config());
  const auto pa = a.flat_parameters(), pb = b.flat_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  EXPECT_EQ(std::memcmp(pa.data(), pb.data(), pa.size() * sizeof(double)), 0);
  const MicroEncoder<double> c(toy_config(8));
  EXPECT_NE(c.flat_parameters(), pa);
}

TEST(MicroEncoder, RejectsInvalidConfig) {
  auto c = toy_config();
  c.dim = 15;
  try {
    MicroEncoder<double> enc(c);
    FAIL() << "expected invalid-config";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
  }
  c = toy_config();
  c.image_width = 10;
  EXPECT_THROW(MicroEncoder<double>{c}, Error);
  c = toy_config();
  c.image_height = 4;
  c.image_width = 4;  // N = 1
  EXPECT_THROW(MicroEncoder<double>{c}, Error);
}

TEST(MicroEncoder, AttentionRowsAreProbabilityVectors) {
  const MicroEncoder<double> enc(EncoderConfig{});
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto out = enc.encode(random_image(enc.config(), s, 0.0, 1.0));
    const auto& att = out.attention;
    ASSERT_EQ(att.layers, 4);
    ASSERT_EQ(att.length, 65);
    for (int l = 0; l < att.layers; ++l)
      for (int h = 0; h < att.heads; ++h) {
        double sum = 0.0;
        for (int j = 0; j < att.length; ++j) {
          EXPECT_GE(att.at(l, h, j), 0.0);
          sum += att.at(l, h, j);
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
      }
  }
}

TEST(MicroEncoder, EncodeIsPure) {
  const MicroEncoder<double> enc(toy_config());
  const auto x = random_image(enc.config(), 3);
  const auto a = enc.encode(x), b = enc.encode(x);
  EXPECT_TRUE(a.features.patch_tokens == b.features.patch_tokens);
  EXPECT_TRUE(a.features.class_token == b.features.class_token);
  EXPECT_EQ(a.attention.rows, b.attention.rows);
}

TEST(MicroEncoder, ShapeMismatchIsRejected) {
  const MicroEncoder<double> enc(toy_config());
  ImageTensor<double> wrong(3, 8, 12);
  try {
    enc.encode(wrong);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
  const auto x = random_image(enc.config(), 1);
  EXPECT_THROW(enc.vjp(x, Matrix<double>::Zero(3, 16), Vector<double>::Zero(16)), Error);
}

// Golden per-token norms of the seed-7 toy encoder on the all-zero image.
// Captured after the finite-difference checks below passed.
TEST(MicroEncoder, ZeroImageGoldenNorms) {
  const MicroEncoder<double> enc(toy_config());
  const auto out = enc.encode(ImageTensor<double>(3, 8, 8, 0.0));
  const double expected[] = {4.4316684749066537, 4.354067285500971, 4.4977197064317957, 4.500595791281115};
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(out.features.patch_tokens.row(j).norm(), expected[j], 1e-12) << j;
  EXPECT_NEAR(out.features.class_token.norm(), 4.4518628537890947, 1e-12);
}

TEST(MicroEncoder, VjpIsLinearInCotangent) {
  const MicroEncoder<double> enc(toy_config());
  const auto x = random_image(enc.config(), 11);
  Rng rng(5);
  const auto u = random_matrix(4, 16, rng), v = random_matrix(4, 16, rng);
  const auto uc = random_vector(16, rng), vc = random_vector(16, rng);
  const auto gu = enc.vjp(x, u, uc), gv = enc.vjp(x, v, vc);
  const auto guv = enc.vjp(x, u + v, uc + vc);
  for (size_t i = 0; i < gu.size(); ++i) EXPECT_NEAR(guv[i], gu[i] + gv[i], 1e-10);
  const auto zero = enc.vjp(x, Matrix<double>::Zero(4, 16), Vector<double>::Zero(16));
  for (double g : zero) EXPECT_EQ(g, 0.0);
}

namespace {

double probe_max_relative_error(const MicroEncoder<double>& enc, std::uint64_t seed, int probes) {
  const auto x = random_image(enc.config(), seed);
  Rng rng(seed * 31 + 1);
  const auto& info = enc.info();
  Matrix<double> cot = random_matrix(info.num_tokens, info.dim, rng);
  Vector<double> cot_c = random_vector(info.dim, rng);
  const double norm = std::sqrt(cot.squaredNorm() + cot_c.squaredNorm());
  cot /= norm;
  cot_c /= norm;
  const auto grad = enc.vjp(x, cot, cot_c);
  std::vector<size_t> idx;
  for (int i = 0; i < probes; ++i) idx.push_back(rng.below(x.size()));
  const FeatureLoss<double> loss = [&](const TokenFeatures<double>& f) {
    return f.patch_tokens.cwiseProduct(cot).sum() + f.class_token.dot(cot_c);
  };
  double worst = 0.0;
  for (const auto& est : fd_gradient_oracle<double>(enc, x, loss, 1e-4, idx))
    worst = std::max(worst, relative_error(grad[est.pixel], est.value));
  return worst;
}

}  // namespace

TEST(MicroEncoder, VjpMatchesFiniteDifferencesToy) {
  const MicroEncoder<double> enc(toy_config());
  for (std::uint64_t s = 1; s <= 3; ++s) EXPECT_LE(probe_max_relative_error(enc, s, 50), 1e-4) << "seed " << s;
}

TEST(MicroEncoder, VjpMatchesFiniteDifferencesDefault) {
  const MicroEncoder<double> enc(EncoderConfig{});
  EXPECT_LE(probe_max_relative_error(enc, 42, 50), 1e-4);
}

TEST(FdOracle, SumLossMatchesAllOnesCotangent) {
  const MicroEncoder<double> enc(toy_config());
  const auto x = random_image(enc.config(), 9);
  const auto grad = enc.vjp(x, Matrix<double>::Ones(4, 16), Vector<double>::Zero(16));
  const FeatureLoss<double> loss = [](const TokenFeatures<double>& f) { return f.patch_tokens.sum(); };
  for (const auto& est : fd_gradient_oracle<double>(enc, x, loss, 1e-4, {0, 17, 63, 100, 191}))
    EXPECT_LE(relative_error(grad[est.pixel], est.value), 1e-4);
}

TEST(FdOracle, PreconditionsAndConstantLoss) {
  const MicroEncoder<double> enc(toy_config());
  const auto x = random_image(enc.config(), 9);
  const FeatureLoss<double> constant = [](const TokenFeatures<double>&) { return 3.0; };
  EXPECT_THROW(fd_gradient_oracle<double>(enc, x, constant, 0.0), Error);
  for (const auto& est : fd_gradient_oracle<double>(enc, x, constant, 1e-3)) EXPECT_EQ(est.value, 0.0);
}

TEST(MicroEncoder, SnapshotRoundTrip) {
  const MicroEncoder<double> enc(toy_config());
  const auto bytes = encode_snapshot(enc);
  const auto back = decode_snapshot<double>(bytes);
  EXPECT_EQ(back.config(), enc.config());
  EXPECT_EQ(back.flat_parameters(), enc.flat_parameters());
  EXPECT_EQ(encode_snapshot(back), bytes);
  EXPECT_THROW(decode_snapshot<double>(bytes.substr(0, bytes.size() - 3)), Error);

  const MicroEncoder<float> single(toy_config());
  const auto back32 = decode_snapshot<float>(encode_snapshot(single));
  EXPECT_EQ(back32.flat_parameters(), single.flat_parameters());
}

TEST(MicroEncoder, SinglePrecisionTracksDouble) {
  const MicroEncoder<double> enc64(EncoderConfig{});
  const MicroEncoder<float> enc32(EncoderConfig{});
  const auto x = random_image(enc64.config(), 4);
  const auto a = enc64.encode(x);
  const auto b = enc32.encode(x.cast<float>());
  EXPECT_LE((a.features.patch_tokens.cast<float>() - b.features.patch_tokens).cwiseAbs().maxCoeff(), 1e-3f);
}
