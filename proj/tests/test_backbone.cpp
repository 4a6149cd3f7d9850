#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "idol/backbone.hpp"

using namespace idol;
using idol::ad::Tensor;
using idol::testing::grad_check;
using idol::testing::random_tensor;
using idol::testing::uniform_tensor;

namespace {

model::BackboneConfig small_config() {
  model::BackboneConfig c;
  c.n = 8;
  return c;
}

}  // namespace

TEST(Backbone, EncodeFramesShapes) {
  Rng rng(1);
  model::Backbone<double> bb(small_config(), rng);
  auto ir = uniform_tensor({2, 2, 2, 64, 64}, rng, 0.0, 1.0);
  const auto frames = bb.encode_frames(ir);
  ASSERT_EQ(frames.size(), 2u);
  for (const auto& f : frames) EXPECT_EQ(f.shape(), (ad::Shape{2, 16, 8}));
  EXPECT_THROW(bb.encode_frames(random_tensor({2, 2, 64, 64}, rng)), ShapeError);
  // separate weights per frame: the same input encodes differently
  auto same = uniform_tensor({1, 1, 2, 64, 64}, rng, 0.0, 1.0);
  auto both = ad::concat<double>({same, same}, 1);
  const auto f2 = bb.encode_frames(both);
  EXPECT_GT(ad::max_abs_diff(f2[0], f2[1]), 1e-6);
}

TEST(Backbone, ZeroInputIsFinite) {
  Rng rng(2);
  model::Backbone<double> bb(small_config(), rng);
  auto ir = Tensor<double>::zeros({2, 2, 2, 32, 32});
  const auto frames = bb.encode_frames(ir);
  for (const auto& f : frames) EXPECT_TRUE(ad::all_finite(f));
  auto fused = bb.fuse_spatiotemporal(frames, bb.embed_cor(Tensor<double>::zeros({2, 4})));
  EXPECT_TRUE(ad::all_finite(fused));
}

TEST(Backbone, SinglePixelGradientMatchesFiniteDifference) {
  Rng rng(3);
  model::Backbone<double> bb(small_config(), rng);
  auto ir = uniform_tensor({1, 2, 2, 32, 32}, rng, 0.0, 1.0);
  auto loss = [&] {
    const auto frames = bb.encode_frames(ir);
    return ad::sum(frames[0]) + ad::sum(frames[1]);
  };
  loss().backward();
  const std::size_t pixel = ((0 * 2 + 1) * 32 + 15) * 32 + 17;  // frame 0, channel 1, (15, 17)
  const double analytic = ir.grad()[pixel];
  auto v = ir.mutable_values();
  const double saved = v[pixel], eps = 1e-5;
  v[pixel] = saved + eps;
  const double up = loss().item();
  v[pixel] = saved - eps;
  const double down = loss().item();
  v[pixel] = saved;
  const double numeric = (up - down) / (2 * eps);
  EXPECT_LT(std::abs(analytic - numeric) / std::max(std::abs(analytic), 1e-12), 1e-4) << analytic << " vs " << numeric;
}

TEST(Backbone, FusionMatchesManualRecurrence) {
  Rng rng(4);
  model::Backbone<double> bb(small_config(), rng);
  auto x = random_tensor({2, 4, 8}, rng);
  auto cor = Tensor<double>::zeros({2, 8});
  const auto fused = bb.fuse_spatiotemporal({x, x}, cor);
  EXPECT_EQ(fused.shape(), (ad::Shape{2, 4, 8}));
  auto cor_tokens = ad::broadcast_to(ad::reshape(cor, {2, 1, 8}), {2, 4, 8});
  model::RecurrentState<double> s{Tensor<double>::zeros({2, 4, 8}), Tensor<double>::zeros({2, 4, 8})};
  s = bb.fusion.step(x, s, cor_tokens);
  s = bb.fusion.step(x, s, cor_tokens);
  EXPECT_EQ(ad::max_abs_diff(fused, s.h), 0.0);
  EXPECT_THROW(bb.fuse_spatiotemporal({x, x}, Tensor<double>::zeros({2, 5})), ShapeError);
}

TEST(Backbone, FusionGradientWrtCorFeatures) {
  Rng rng(5);
  model::Backbone<double> bb(small_config(), rng);
  auto f0 = random_tensor({2, 4, 8}, rng);
  auto f1 = random_tensor({2, 4, 8}, rng);
  auto cor = random_tensor({2, 8}, rng);
  auto probe = random_tensor({2, 4, 8}, rng);
  auto r = grad_check({cor}, [&] { return ad::sum(bb.fuse_spatiotemporal({f0, f1}, cor) * probe); });
  EXPECT_LT(r.rel_error, 1e-4);
}

TEST(SampleIdentity, ConstantTokensGiveFloorSigma) {
  auto f = Tensor<double>::constant({1, 3, 2}, {0.5, -2.0, 0.5, -2.0, 0.5, -2.0});
  const auto s = model::sample_identity(f, false, nullptr);
  EXPECT_DOUBLE_EQ(s.sigma[0], model::kSigmaFloor);
  EXPECT_DOUBLE_EQ(s.sigma[1], model::kSigmaFloor);
  EXPECT_EQ(s.id[0], 0.5);
  EXPECT_EQ(s.id[1], -2.0);
}

TEST(SampleIdentity, TrainModeIsSeededAndEvalIsDeterministic) {
  Rng init(6);
  auto f = random_tensor({2, 4, 3}, init);
  Rng a(9), b(9);
  const auto s1 = model::sample_identity(f, true, &a);
  const auto s2 = model::sample_identity(f, true, &b);
  EXPECT_EQ(ad::max_abs_diff(s1.id, s2.id), 0.0);
  const auto e1 = model::sample_identity(f, false, nullptr);
  const auto e2 = model::sample_identity(f, false, nullptr);
  EXPECT_EQ(ad::max_abs_diff(e1.id, e2.id), 0.0);
  EXPECT_EQ(ad::max_abs_diff(e1.id, e1.mu), 0.0);
}

TEST(SampleIdentity, MonteCarloMeanMatchesMu) {
  Rng init(7);
  const std::vector<double> base{0.3, -1.2, 0.8, 2.0, 0.1, -0.4};  // one sample, 2 tokens x 3 dims
  const std::size_t draws = 100000;
  std::vector<double> tiled;
  for (std::size_t i = 0; i < draws; ++i) tiled.insert(tiled.end(), base.begin(), base.end());
  auto f = Tensor<double>::constant({draws, 2, 3}, tiled);
  Rng rng(8);
  const auto s = model::sample_identity(f, true, &rng);
  for (std::size_t d = 0; d < 3; ++d) {
    double mean = 0;
    for (std::size_t i = 0; i < draws; ++i) mean += s.id[i * 3 + d];
    mean /= static_cast<double>(draws);
    EXPECT_LT(std::abs(mean - s.mu[d]), 3.0 * s.sigma[d] / std::sqrt(static_cast<double>(draws)));
  }
}

TEST(SampleIdentity, ReparameterizationGradient) {
  Rng init(10);
  auto f = random_tensor({2, 4, 3}, init);
  auto target = random_tensor({2, 3}, init);
  auto r = grad_check({f}, [&] {
    Rng rng(11);  // same epsilon for every evaluation
    const auto s = model::sample_identity(f, true, &rng);
    return ad::sum(ad::square(s.id - target));
  });
  EXPECT_LT(r.rel_error, 1e-4);
}

TEST(Backbone, NoNaNOnRandomInputs) {
  Rng rng(12);
  model::Backbone<float> bb(model::BackboneConfig{}, rng);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<float> v(2 * 2 * 2 * 32 * 32), c(2 * 4);
    for (auto& x : v) x = static_cast<float>(rng.uniform());
    for (auto& x : c) x = static_cast<float>(rng.normal());
    auto ir = Tensor<float>::constant({2, 2, 2, 32, 32}, v);
    auto f = bb.fuse_spatiotemporal(bb.encode_frames(ir), bb.embed_cor(Tensor<float>::constant({2, 4}, c)));
    const auto s = model::sample_identity(f, true, &rng);
    EXPECT_TRUE(ad::all_finite(f));
    EXPECT_TRUE(ad::all_finite(s.id));
    EXPECT_EQ(s.id.shape(), (ad::Shape{2, 64}));
  }
}
