#include <gtest/gtest.h>

#include "flowseg/latent.hpp"
#include "flowseg/layers.hpp"
#include "flowseg/ops.hpp"
#include "flowseg/phantom.hpp"
#include "support/gradcheck.hpp"

using namespace flowseg;

namespace {
Tensor phantom_tensor(std::uint64_t seed) {
  return to_network(preprocess(generate_phantom(seed, PhantomConfig{}).image));
}
}  // namespace

TEST(Latent, IdentityModeIsIdentity) {
  auto ae = Autoencoder::identity();
  Rng rng(1);
  Tensor x = randn({1, 1, 8, 8, 8}, rng);
  EXPECT_TRUE(ae.is_identity());
  EXPECT_EQ(ae.encode(x).data()[5], x.data()[5]);
  EXPECT_EQ(ae.decode(x).shape(), x.shape());
  EXPECT_TRUE(ae.state().empty());
}

TEST(Latent, ShapeContract) {
  Rng rng(2);
  Autoencoder ae(AeConfig{}, rng);
  Tensor x = Tensor::zeros({1, 1, 32, 32, 32});
  Tensor z = ae.encode(x);
  EXPECT_EQ(z.shape(), (Shape{1, 4, 8, 8, 8}));
  EXPECT_EQ(ae.decode(z).shape(), x.shape());
}

TEST(Latent, NonDivisibleDimsRejected) {
  Rng rng(3);
  Autoencoder ae(AeConfig{}, rng);
  EXPECT_THROW(ae.encode(Tensor::zeros({1, 1, 30, 32, 32})), ShapeError);
  EXPECT_THROW(ae.decode(Tensor::zeros({1, 3, 8, 8, 8})), ShapeError);
}

TEST(Latent, ZeroLatentDecodesFiniteInRange) {
  Rng rng(4);
  Autoencoder ae(AeConfig{}, rng);
  Tensor out = ae.decode(Tensor::zeros({1, 4, 4, 4, 4}));
  ASSERT_TRUE(all_finite(out));
  for (float v : out.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Latent, DecoderGradientMatchesFiniteDifferences) {
  Rng init(5);
  Autoencoder ae(AeConfig{}, init);
  oracle::GradCase c{"decode",
                     [](Rng& r) { return std::vector<Tensor>{oracle::random_tensor({1, 4, 2, 2, 2}, r)}; },
                     [&ae](const std::vector<Tensor>& in) { return ae.decode(in[0]); }};
  Rng rng(6);
  // h = 1e-2: through seven layers f32 rounding swamps a 1e-3 difference.
  for (int trial = 0; trial < 3; ++trial) EXPECT_LE(oracle::grad_check(c, rng, 1e-2).max_rel_error, 1e-3);
}

TEST(Latent, CheckpointRoundTripReproducesOutputs) {
  Rng rng(7);
  Autoencoder a(AeConfig{}, rng);
  a.set_latent_scale(0.37f);
  Autoencoder b(AeConfig{}, rng);
  b.load(decode_checkpoint(encode_checkpoint(a.state())));
  EXPECT_EQ(b.latent_scale(), 0.37f);
  EXPECT_EQ(b.params().checksum(), a.params().checksum());
  Tensor x = phantom_tensor(8);
  auto za = a.encode(x), zb = b.encode(x);
  for (std::int64_t i = 0; i < za.numel(); ++i) ASSERT_EQ(za.at(i), zb.at(i));
}

TEST(Latent, SmokeTrainingReducesLoss) {
  std::vector<Tensor> vols{phantom_tensor(1), phantom_tensor(2)};
  AeConfig cfg;
  cfg.steps = 30;
  cfg.batch = 2;
  cfg.lr = 5e-3f;
  std::vector<float> losses;
  auto ae = train_autoencoder(vols, cfg, 9, [&](const TrainPoint& p) { losses.push_back(p.loss); });
  ASSERT_EQ(losses.size(), 30u);
  for (float l : losses) ASSERT_TRUE(std::isfinite(l));
  EXPECT_LT(losses.back(), losses.front());
  EXPECT_GT(ae.latent_scale(), 0.0f);
  // The fitted scale leaves latents with unit RMS.
  double sq = 0.0;
  std::int64_t n = 0;
  for (const auto& v : vols) {
    auto z = ae.encode(v);
    for (float x : z.data()) sq += double(x) * x;
    n += z.numel();
  }
  EXPECT_NEAR(std::sqrt(sq / n), 1.0, 1e-3);
}
