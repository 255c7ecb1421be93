#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "panfuse/gan.hpp"
#include "panfuse/harness.hpp"

using namespace panfuse;
using namespace panfuse::ad;
using gradcheck::max_relative_error;
using gradcheck::random_tensor;

namespace {

MultispectralImage random_ms(Rng& rng, std::size_t w, std::size_t h, std::size_t k, double lo = 0.1, double hi = 0.9) {
  std::vector<RasterBand> bands;
  for (std::size_t b = 0; b < k; ++b) {
    RasterBand band(w, h);
    for (double& v : band.data()) v = rng.uniform(lo, hi);
    bands.push_back(band);
  }
  return MultispectralImage(bands);
}

FusionProduct product(MultispectralImage img) { return {std::move(img), "test", {}}; }

const harness::SyntheticScene& small_scene() {
  static const auto s = harness::synth_scene(7, 64, 64, 4, 4);
  return s;
}

}  // namespace

// ---------------------------------------------------------------- losses

TEST(LossSpectral, ReplicatedMsIsZero) {
  Rng rng(1);
  const auto ms = random_ms(rng, 8, 6, 4);
  EXPECT_NEAR(gan::loss_spectral(product(upsample(ms, 4, Resample::replicate)), ms, 4), 0.0, 1e-10);
}

TEST(LossSpectral, InvertedImageExceedsOne) {
  Rng rng(2);
  const auto ms = random_ms(rng, 8, 8, 3);
  auto inv = upsample(ms, 2, Resample::replicate);
  for (std::size_t k = 0; k < 3; ++k)
    for (double& v : inv.band(k).data()) v = 1.0 - v;
  const double loss = gan::loss_spectral(product(inv), ms, 2);
  EXPECT_GT(loss, 1.0);
  EXPECT_LE(loss, 2.0);
}

TEST(LossSpectral, ScaleMismatchRejected) {
  Rng rng(3);
  const auto ms = random_ms(rng, 8, 8, 3);
  EXPECT_THROW(gan::loss_spectral(product(upsample(ms, 2, Resample::replicate)), ms, 4), InvalidInput);
}

TEST(LossSpatial, IntensityEqualToPanIsZero) {
  const auto& s = small_scene();
  const IntensityWeights w{{0.1, 0.2, 0.3, 0.4}, 0.05};
  RasterBand band(s.pan.width(), s.pan.height());
  for (std::size_t i = 0; i < band.size(); ++i) band[i] = s.pan[i] - w.bias;
  const MultispectralImage fused({band, band, band, band});
  EXPECT_NEAR(gan::loss_spatial(product(fused), s.pan, w), 0.0, 1e-10);
}

TEST(LossSpatial, BlurredPanIsPositive) {
  const auto& s = small_scene();
  const IntensityWeights w{{0.25, 0.25, 0.25, 0.25}, 0.0};
  const RasterBand blurred = gaussian_blur(s.pan, 2.0);
  const MultispectralImage fused({blurred, blurred, blurred, blurred});
  const double loss = gan::loss_spatial(product(fused), s.pan, w);
  EXPECT_GT(loss, 1e-3);
  EXPECT_LT(loss, 1.0);
}

TEST(LossSpatial, ConstantIntensityIsDegenerate) {
  const auto& s = small_scene();
  const RasterBand flat(s.pan.width(), s.pan.height(), 0.5);
  EXPECT_THROW(gan::loss_spatial(product(MultispectralImage({flat})), s.pan, IntensityWeights{{1.0}, 0.0}),
               DegenerateInput);
}

TEST(LossAdversarial, HandValues) {
  EXPECT_NEAR(gan::loss_discriminator(0.5, 0.5), 2 * std::log(2.0), 1e-15);
  gan::TrainingConfig cfg;
  cfg.lambda_adv_spec = cfg.lambda_adv_spat = 1.0;
  EXPECT_LT(gan::loss_adversarial_generator(1 - 1e-12, 1 - 1e-12, cfg), 1e-11);
  cfg.lambda_adv_spec = cfg.lambda_adv_spat = 0.0;
  EXPECT_EQ(gan::total_generator_loss(0.3, 0.2, 0.1, 0.9, cfg), 1.0 * 0.3 + 1.0 * 0.2);
  cfg.lambda_spec = 2.0;
  cfg.lambda_spat = 0.5;
  EXPECT_EQ(gan::total_generator_loss(0.3, 0.2, 0.1, 0.9, cfg), 2.0 * 0.3 + 0.5 * 0.2);
}

TEST(LossAdversarial, ScoresOutsideOpenIntervalRejected) {
  gan::TrainingConfig cfg;
  for (double bad : {0.0, 1.0, -0.1, 1.5, std::nan("")}) {
    EXPECT_THROW(gan::loss_discriminator(bad, 0.5), InvalidInput);
    EXPECT_THROW(gan::loss_discriminator(0.5, bad), InvalidInput);
    EXPECT_THROW(gan::loss_adversarial_generator(bad, 0.5, cfg), InvalidInput);
  }
}

TEST(LossAdversarial, LogitFormsMatchScoreForms) {
  Tape tape;
  for (double real : {-3.0, 0.0, 1.2})
    for (double fake : {-0.7, 2.5}) {
      Var lr = tape.constant(Tensor::scalar(real)), lf = tape.constant(Tensor::scalar(fake));
      const double sr = 1 / (1 + std::exp(-real)), sf = 1 / (1 + std::exp(-fake));
      EXPECT_NEAR(gan::discriminator_loss_logits(lr, lf).item(), gan::loss_discriminator(sr, sf), 1e-12);
      EXPECT_NEAR(gan::generator_adversarial_logit(lf).item(), -std::log(sf), 1e-12);
    }
}

// ---------------------------------------------------------------- gradients

TEST(LossGradients, SpectralMatchesFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor fused = random_tensor(rng, {1, 3, 8, 8}, 0.1, 0.9);
    const Tensor ms = random_tensor(rng, {1, 3, 4, 4}, 0.1, 0.9);
    const double err = max_relative_error(
        [&](Tape&, const std::vector<Var>& v) { return gan::spectral_loss(v[0], ms, 2); }, {fused});
    EXPECT_LT(err, 1e-3) << "seed " << seed;
  }
}

TEST(LossGradients, SpatialMatchesFiniteDifferences) {
  // Finite differences re-run the histogram match; the detached statistics
  // still agree because Q is stationary in the matched mean and spread.
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor fused = random_tensor(rng, {1, 3, 8, 8}, 0.1, 0.9);
    const Tensor pan = random_tensor(rng, {1, 1, 8, 8}, 0.1, 0.9);
    const IntensityWeights w{{rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)}, 0.02};
    const double err = max_relative_error(
        [&](Tape&, const std::vector<Var>& v) { return gan::spatial_loss(v[0], pan, w); }, {fused});
    EXPECT_LT(err, 1e-3) << "seed " << seed;
  }
}

TEST(LossGradients, GeneratorParametersMatchFiniteDifferences) {
  // Full generator objective, adversarial terms included, on 8x8 PAN scenes.
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto ms = random_ms(rng, 4, 4, 3, 0.2, 0.8);
    RasterBand pan(8, 8);
    for (double& v : pan.data()) v = rng.uniform(0.2, 0.8);
    const auto ms_up = upsample(ms, 2, Resample::bicubic);
    const Tensor input = gan::generator_input(ms_up, pan), ms_up_t = gan::to_tensor(ms_up);
    const Tensor ms_t = gan::to_tensor(ms), pan_t = gan::to_tensor(pan);
    const auto w = estimate_weights(ms_up, pan);

    ParameterSet g = gan::make_generator(3, rng);
    for (double& v : g.at("gen.head.weight").value.data()) v = rng.uniform(-0.05, 0.05);
    ParameterSet ds = gan::make_discriminator(3, rng), dp = gan::make_discriminator(1, rng);
    gan::TrainingConfig cfg;
    cfg.lambda_adv_spec = cfg.lambda_adv_spat = 0.5;

    auto objective = [&](Tape& tape, bool trainable) {
      Var f = gan::generator_forward(tape, input, ms_up_t, g, trainable);
      Var l1 = gan::spectral_loss(f, ms_t, 2), l2 = gan::spatial_loss(f, pan_t, w);
      Var a1 = gan::generator_adversarial_logit(gan::discriminator_logit(tape, avg_pool(f, 2), ds, false));
      Var a2 = gan::generator_adversarial_logit(gan::discriminator_logit(tape, gan::intensity(f, w), dp, false));
      return add(add(scalar_mul(l1, cfg.lambda_spec), scalar_mul(l2, cfg.lambda_spat)),
                 add(scalar_mul(a1, cfg.lambda_adv_spec), scalar_mul(a2, cfg.lambda_adv_spat)));
    };
    Tape tape;
    tape.backward(objective(tape, true));

    const double eps = 1e-6;
    double worst = 0.0;
    for (const char* name : {"gen.conv1.weight", "gen.conv1.bias", "gen.conv2.weight", "gen.head.weight", "gen.head.bias"}) {
      const Tensor analytic = g.at(name).grad;
      for (int t = 0; t < 8; ++t) {
        const auto i = static_cast<std::size_t>(rng.uniform() * static_cast<double>(analytic.numel()));
        double& p = g.at(name).value[i];
        const double orig = p;
        p = orig + eps;
        Tape tp;
        const double up = objective(tp, false).item();
        p = orig - eps;
        Tape tm;
        const double down = objective(tm, false).item();
        p = orig;
        const double numeric = (up - down) / (2 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-4});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
      }
    }
    EXPECT_LT(worst, 1e-3) << "seed " << seed;
  }
}

// ---------------------------------------------------------------- networks

TEST(Networks, ParameterShapes) {
  Rng rng(5);
  const auto g = gan::make_generator(4, rng);
  EXPECT_EQ(g.value("gen.conv1.weight").shape(), (Shape{16, 5, 3, 3}));
  EXPECT_EQ(g.value("gen.conv2.weight").shape(), (Shape{16, 16, 3, 3}));
  EXPECT_EQ(g.value("gen.head.weight").shape(), (Shape{4, 16, 3, 3}));
  for (double v : g.value("gen.head.weight").data()) EXPECT_EQ(v, 0.0);
  for (double v : g.value("gen.conv1.bias").data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(gan::generator_bands(g), 4u);

  const auto d = gan::make_discriminator(1, rng);
  EXPECT_EQ(d.value("disc.conv1.weight").shape(), (Shape{16, 1, 3, 3}));
  EXPECT_EQ(d.value("disc.conv2.weight").shape(), (Shape{32, 16, 3, 3}));
  EXPECT_EQ(d.value("disc.conv3.weight").shape(), (Shape{32, 32, 3, 3}));
  // He-uniform bound sqrt(6 / fan_in)
  for (double v : d.value("disc.conv2.weight").data()) EXPECT_LE(std::abs(v), std::sqrt(6.0 / 144.0));
}

TEST(Networks, DiscriminatorScoreInOpenInterval) {
  Rng rng(6);
  ParameterSet d = gan::make_discriminator(2, rng);
  for (double scale : {1e-3, 1.0, 1e3}) {
    Tape tape;
    const double s = gan::discriminator_score(tape, tape.constant(random_tensor(rng, {1, 2, 16, 16}, -scale, scale)), d, false).item();
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
}

// ---------------------------------------------------------------- fuse

TEST(Fuse, ZeroHeadIsNearBicubic) {
  const auto& s = small_scene();
  Rng rng(7);
  const auto g = gan::make_generator(4, rng);
  const auto f = gan::fuse(g, s.ms, s.pan, 4);
  const auto up = upsample(s.ms, 4, Resample::bicubic);
  ASSERT_EQ(f.image.band_count(), 4u);
  ASSERT_EQ(f.image.width(), s.pan.width());
  ASSERT_EQ(f.image.height(), s.pan.height());
  double worst = 0.0;
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < up.band(k).size(); ++i) {
      const double v = f.image.band(k)[i];
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      worst = std::max(worst, std::abs(v - up.band(k)[i]));
    }
  EXPECT_LT(worst, 0.02);
  EXPECT_EQ(f.method, "gan");
  EXPECT_EQ(f.checkpoint_hash, checkpoint_hash(g));
}

TEST(Fuse, PureInference) {
  const auto& s = small_scene();
  Rng rng(8);
  auto g = gan::make_generator(4, rng);
  for (double& v : g.at("gen.head.weight").value.data()) v = rng.uniform(-0.1, 0.1);
  EXPECT_EQ(gan::fuse(g, s.ms, s.pan, 4).image, gan::fuse(g, s.ms, s.pan, 4).image);
}

TEST(Fuse, ShapeMismatchRejected) {
  const auto& s = small_scene();
  Rng rng(9);
  EXPECT_THROW(gan::fuse(gan::make_generator(3, rng), s.ms, s.pan, 4), InvalidInput);
  EXPECT_THROW(gan::fuse(gan::make_generator(4, rng), s.ms, s.pan, 2), InvalidInput);
  EXPECT_THROW(gan::fuse(ParameterSet{}, s.ms, s.pan, 4), InvalidInput);
}

// ---------------------------------------------------------------- training

TEST(Train, DeterministicCheckpoints) {
  const auto& s = small_scene();
  gan::TrainingConfig cfg;
  cfg.iterations = 5;
  const auto a = gan::train(s.ms, s.pan, cfg), b = gan::train(s.ms, s.pan, cfg);
  EXPECT_EQ(encode_checkpoint(a.generator), encode_checkpoint(b.generator));
  EXPECT_EQ(a.log.to_csv(), b.log.to_csv());
  cfg.seed = 8;
  EXPECT_NE(encode_checkpoint(gan::train(s.ms, s.pan, cfg).generator), encode_checkpoint(a.generator));
}

TEST(Train, LogHasEveryComponent) {
  const auto& s = small_scene();
  gan::TrainingConfig cfg;
  cfg.iterations = 3;
  const auto res = gan::train(s.ms, s.pan, cfg);
  ASSERT_EQ(res.log.rows.size(), 3u);
  const auto csv = res.log.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "iteration,L1,L2,adv_G_spec,adv_G_spat,D_spec_loss,D_spat_loss,total_G");
  for (const auto& r : res.log.rows) {
    EXPECT_NEAR(r.total_g, cfg.lambda_spec * r.l1 + cfg.lambda_spat * r.l2 + cfg.lambda_adv_spec * r.adv_g_spec +
                               cfg.lambda_adv_spat * r.adv_g_spat, 1e-12);
    EXPECT_GT(r.d_spec_loss, 0.0);
    EXPECT_GT(r.d_spat_loss, 0.0);
  }
}

TEST(Train, FirstSpectralLossIsBicubicLoss) {
  const auto& s = small_scene();
  gan::TrainingConfig cfg;
  cfg.iterations = 1;
  cfg.lambda_spat = cfg.lambda_adv_spec = cfg.lambda_adv_spat = 0.0;
  const auto res = gan::train(s.ms, s.pan, cfg);
  const double bicubic = gan::loss_spectral(product(upsample(s.ms, 4, Resample::bicubic)), s.ms, 4);
  EXPECT_NEAR(res.log.rows[0].l1, bicubic, 1e-3);
  EXPECT_EQ(res.log.rows[0].total_g, res.log.rows[0].l1);
}

TEST(Train, WithoutAdversariesLossDescends) {
  const auto& s = small_scene();
  gan::TrainingConfig cfg;
  cfg.iterations = 100;
  cfg.lambda_adv_spec = cfg.lambda_adv_spat = 0.0;
  const auto res = gan::train(s.ms, s.pan, cfg);
  // Adam wobbles early on; the second half must be monotone
  for (std::size_t i = 50; i < res.log.rows.size(); ++i)
    EXPECT_LE(res.log.rows[i].total_g, res.log.rows[i - 1].total_g) << "iteration " << res.log.rows[i].iteration;
  EXPECT_LT(res.log.rows.back().total_g, 0.2 * res.log.rows.front().total_g);
}

TEST(Train, InvalidInputs) {
  const auto& s = small_scene();
  gan::TrainingConfig cfg;
  cfg.ratio = 2;
  EXPECT_THROW(gan::train(s.ms, s.pan, cfg), InvalidInput);
  cfg = {};
  cfg.iterations = 0;
  EXPECT_THROW(gan::train(s.ms, s.pan, cfg), InvalidInput);
  cfg = {};
  cfg.lambda_spat = -1.0;
  EXPECT_THROW(gan::train(s.ms, s.pan, cfg), InvalidInput);
}

TEST(Train, DivergenceCarriesIteration) {
  const auto& s = small_scene();
  gan::TrainingConfig cfg;
  cfg.lr_g = 1e308;
  cfg.iterations = 5;
  try {
    gan::train(s.ms, s.pan, cfg);
    FAIL() << "expected divergence";
  } catch (const TrainingDivergence& e) {
    EXPECT_GE(e.iteration(), 1);
  }
}
