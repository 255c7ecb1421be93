#pragma once

// Unsupervised dual-discriminator generative fusion.
//
// The generator maps (bicubic MS, PAN) to a residual added to the bicubic MS.
// A spectral discriminator judges MS-scale images (real: the input MS; fake:
// the block-averaged generator output) and a spatial discriminator judges
// PAN-scale intensities (real: PAN; fake: the intensity of the output).
// The generator minimizes
//   l_spec * (1 - Q(degrade(F), MS)) + l_spat * (1 - Q(I(F), matched PAN))
//   + l_adv_spec * -log D_spec(fake) + l_adv_spat * -log D_spat(fake)
// with Q the single-window universal image quality index.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "panfuse/autodiff.hpp"
#include "panfuse/error.hpp"
#include "panfuse/metrics.hpp"
#include "panfuse/random.hpp"
#include "panfuse/raster.hpp"

namespace panfuse::gan {

using ad::ParameterSet;
using ad::Tape;
using ad::Tensor;
using ad::Var;

inline constexpr std::size_t kHiddenChannels = 16;
inline constexpr double kLeakySlope = 0.2;

struct TrainingConfig {
  long iterations = 500;
  double lr_g = 2e-3;
  double lr_d = 1e-4;
  double lambda_spec = 1.0;
  double lambda_spat = 1.0;
  double lambda_adv_spec = 0.01;
  double lambda_adv_spat = 0.01;
  std::uint64_t seed = 7;
  int ratio = 4;

  void validate() const {
    if (iterations < 1) throw InvalidInput("training config: iterations must be >= 1");
    if (!(lr_g > 0.0) || !(lr_d > 0.0)) throw InvalidInput("training config: learning rates must be positive");
    for (double l : {lambda_spec, lambda_spat, lambda_adv_spec, lambda_adv_spat})
      if (!(l >= 0.0)) throw InvalidInput("training config: loss weights must be >= 0");
    if (ratio < 1) throw InvalidInput("training config: ratio must be >= 1");
  }
};

// ---------------------------------------------------------------- image <-> tensor

inline Tensor to_tensor(const MultispectralImage& img) {
  Tensor t(ad::Shape{1, img.band_count(), img.height(), img.width()});
  const std::size_t hw = img.width() * img.height();
  for (std::size_t k = 0; k < img.band_count(); ++k)
    std::copy(img.band(k).data().begin(), img.band(k).data().end(), t.data().begin() + static_cast<long>(k * hw));
  return t;
}

inline Tensor to_tensor(const RasterBand& band) { return to_tensor(MultispectralImage({band})); }

inline MultispectralImage to_image(const Tensor& t, int scale_ratio = 1) {
  if (t.rank() != 4 || t.dim(0) != 1) throw ShapeError("to_image: expected [1,C,H,W], got " + ad::shape_string(t.shape()));
  const std::size_t C = t.dim(1), H = t.dim(2), W = t.dim(3);
  std::vector<RasterBand> bands;
  for (std::size_t k = 0; k < C; ++k) {
    const auto first = t.data().begin() + static_cast<long>(k * H * W);
    bands.emplace_back(W, H, std::vector<double>(first, first + static_cast<long>(H * W)));
  }
  return MultispectralImage(std::move(bands), scale_ratio);
}

// Generator input: K upsampled MS channels followed by PAN.
inline Tensor generator_input(const MultispectralImage& ms_up, const RasterBand& pan) {
  auto bands = ms_up.bands();
  bands.push_back(pan);
  return to_tensor(MultispectralImage(std::move(bands)));
}

// ---------------------------------------------------------------- networks

inline Tensor he_uniform(ad::Shape shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  const double bound = std::sqrt(6.0 / fan_in);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

inline void add_conv(ParameterSet& ps, const std::string& prefix, std::size_t out, std::size_t in, std::size_t k,
                     Rng& rng, bool zero = false) {
  ps.add(prefix + ".weight", zero ? Tensor(ad::Shape{out, in, k, k}) : he_uniform({out, in, k, k}, rng));
  ps.add(prefix + ".bias", Tensor(ad::Shape{out}));
}

// Two 3x3 hidden layers of 16 channels and a zero-initialized 3x3 head.
inline ParameterSet make_generator(std::size_t bands, Rng& rng) {
  ParameterSet ps;
  add_conv(ps, "gen.conv1", kHiddenChannels, bands + 1, 3, rng);
  add_conv(ps, "gen.conv2", kHiddenChannels, kHiddenChannels, 3, rng);
  add_conv(ps, "gen.head", bands, kHiddenChannels, 3, rng, /*zero=*/true);
  return ps;
}

// Three stride-2 3x3 layers (16, 32, 32) and a 1x1 projection to a logit map.
inline ParameterSet make_discriminator(std::size_t channels, Rng& rng) {
  ParameterSet ps;
  add_conv(ps, "disc.conv1", 16, channels, 3, rng);
  add_conv(ps, "disc.conv2", 32, 16, 3, rng);
  add_conv(ps, "disc.conv3", 32, 32, 3, rng);
  add_conv(ps, "disc.score", 1, 32, 1, rng);
  return ps;
}

inline std::size_t generator_bands(const ParameterSet& g) {
  if (!g.contains("gen.head.bias")) throw InvalidInput("checkpoint is not a generator (missing gen.head.bias)");
  return g.value("gen.head.bias").dim(0);
}

namespace detail {

// Binds a parameter either as a trainable leaf or as a frozen constant.
inline Var bind_param(Tape& tape, ParameterSet& ps, const std::string& name, bool trainable) {
  return trainable ? tape.parameter(ps, name) : tape.constant(ps.value(name));
}

inline Var conv(Tape& tape, Var x, ParameterSet& ps, const std::string& prefix, bool trainable, int stride = 1) {
  return ad::conv2d(x, bind_param(tape, ps, prefix + ".weight", trainable), bind_param(tape, ps, prefix + ".bias", trainable), stride);
}

}  // namespace detail

inline Var generator_forward(Tape& tape, const Tensor& input, const Tensor& ms_up, ParameterSet& g, bool trainable) {
  Var x = tape.constant(input);
  Var h = ad::leaky_relu(detail::conv(tape, x, g, "gen.conv1", trainable), kLeakySlope);
  h = ad::leaky_relu(detail::conv(tape, h, g, "gen.conv2", trainable), kLeakySlope);
  Var residual = detail::conv(tape, h, g, "gen.head", trainable);
  return ad::clamp_smooth(ad::add(residual, tape.constant(ms_up)));
}

// Mean of the logit map; the score is sigmoid(logit).
inline Var discriminator_logit(Tape& tape, Var x, ParameterSet& d, bool trainable) {
  Var h = ad::leaky_relu(detail::conv(tape, x, d, "disc.conv1", trainable, 2), kLeakySlope);
  h = ad::leaky_relu(detail::conv(tape, h, d, "disc.conv2", trainable, 2), kLeakySlope);
  h = ad::leaky_relu(detail::conv(tape, h, d, "disc.conv3", trainable, 2), kLeakySlope);
  return ad::mean(detail::conv(tape, h, d, "disc.score", trainable));
}

inline Var discriminator_score(Tape& tape, Var x, ParameterSet& d, bool trainable) {
  return ad::sigmoid(discriminator_logit(tape, x, d, trainable));
}

// ---------------------------------------------------------------- losses

// Single-window universal image quality index of two equally shaped tensors.
inline Var q_global(Var a, Var b) {
  Tape& tape = a.tape();
  Var va = ad::variance(a), vb = ad::variance(b);
  if (va.item() == 0.0 && vb.item() == 0.0) {
    Var ma = ad::mean(a), mb = ad::mean(b);
    return tape.constant(Tensor::scalar(ma.item() == mb.item() ? 1.0 : 0.0));
  }
  Var ma = ad::mean(a), mb = ad::mean(b);
  Var num = ad::scalar_mul(ad::mul(ad::mul(ad::covariance(a, b), ma), mb), 4.0);
  Var den = ad::mul(ad::add(va, vb), ad::add(ad::mul(ma, ma), ad::mul(mb, mb)));
  return ad::div(num, den);
}

// (1/K) sum_k (1 - Q(blockavg_r(F_k), M_k)); fused [1,K,H,W], ms [1,K,H/r,W/r].
inline Var spectral_loss(Var fused, const Tensor& ms, int r) {
  const auto& fs = fused.shape();
  if (fs.size() != 4 || ms.rank() != 4 || fs[1] != ms.dim(1) || fs[2] != ms.dim(2) * static_cast<std::size_t>(r) ||
      fs[3] != ms.dim(3) * static_cast<std::size_t>(r))
    throw InvalidInput("loss_spectral: fused " + ad::shape_string(fs) + " is not MS " + ad::shape_string(ms.shape()) +
                       " at ratio " + std::to_string(r));
  Tape& tape = fused.tape();
  Var degraded = ad::avg_pool(fused, r);
  Var ms_var = tape.constant(ms);
  const std::size_t K = ms.dim(1);
  Var total = tape.constant(Tensor::scalar(0.0));
  for (std::size_t k = 0; k < K; ++k)
    total = ad::add(total, ad::add_scalar(ad::scalar_mul(q_global(ad::channel(degraded, k), ad::channel(ms_var, k)), -1.0), 1.0));
  return ad::scalar_mul(total, 1.0 / static_cast<double>(K));
}

// Intensity bias + sum_k w_k F_k as a 1x1 convolution with fixed weights.
inline Var intensity(Var fused, const IntensityWeights& w) {
  const auto& fs = fused.shape();
  if (fs.size() != 4 || fs[1] != w.w.size())
    throw InvalidInput("intensity: " + std::to_string(w.w.size()) + " weights for tensor " + ad::shape_string(fs));
  Tape& tape = fused.tape();
  Var kernel = tape.constant(Tensor(ad::Shape{1, w.w.size(), 1, 1}, w.w));
  Var bias = tape.constant(Tensor(ad::Shape{1}, std::vector<double>{w.bias}));
  return ad::conv2d(fused, kernel, bias);
}

// 1 - Q(I, P_m) with P_m the PAN moment-matched to I; the matching statistics
// are treated as constants.
inline Var spatial_loss(Var fused, const Tensor& pan, const IntensityWeights& w) {
  Var i_hat = intensity(fused, w);
  if (i_hat.shape() != pan.shape())
    throw InvalidInput("loss_spatial: intensity " + ad::shape_string(i_hat.shape()) + " vs PAN " + ad::shape_string(pan.shape()));
  const RasterBand i_band = to_image(i_hat.value()).band(0);
  const RasterBand pan_band = to_image(pan).band(0);
  {
    double m = 0.0;
    for (double v : i_band.data()) m += v;
    m /= static_cast<double>(i_band.size());
    bool constant = true;
    for (double v : i_band.data()) constant = constant && v == m;
    if (constant || i_band.size() < 2) throw DegenerateInput("loss_spatial: constant intensity component");
  }
  const Tensor matched = to_tensor(histogram_match(pan_band, i_band));
  return ad::add_scalar(ad::scalar_mul(q_global(i_hat, fused.tape().constant(matched)), -1.0), 1.0);
}

// -log D(real) - log(1 - D(fake)), from logits.
inline Var discriminator_loss_logits(Var real_logit, Var fake_logit) {
  return ad::add(ad::softplus(ad::scalar_mul(real_logit, -1.0)), ad::softplus(fake_logit));
}

// Non-saturating generator term -log D(fake), from the logit.
inline Var generator_adversarial_logit(Var fake_logit) { return ad::softplus(ad::scalar_mul(fake_logit, -1.0)); }

namespace detail {

inline void require_score(double s, const char* what) {
  if (!(s > 0.0 && s < 1.0)) throw InvalidInput(std::string(what) + ": score must lie in (0,1), got " + std::to_string(s));
}

}  // namespace detail

inline double loss_discriminator(double real_score, double fake_score) {
  detail::require_score(real_score, "loss_D");
  detail::require_score(fake_score, "loss_D");
  return -std::log(real_score) - std::log(1.0 - fake_score);
}

// lambda_adv_spec * -log D_spec(fake) + lambda_adv_spat * -log D_spat(fake)
inline double loss_adversarial_generator(double spec_score, double spat_score, const TrainingConfig& cfg) {
  detail::require_score(spec_score, "loss_adversarial_G");
  detail::require_score(spat_score, "loss_adversarial_G");
  return cfg.lambda_adv_spec * -std::log(spec_score) + cfg.lambda_adv_spat * -std::log(spat_score);
}

inline double total_generator_loss(double l1, double l2, double spec_score, double spat_score, const TrainingConfig& cfg) {
  return cfg.lambda_spec * l1 + cfg.lambda_spat * l2 + loss_adversarial_generator(spec_score, spat_score, cfg);
}

inline void require_pan_scale(const FusionProduct& fused, const MultispectralImage& ms, int r) {
  if (r < 1 || fused.image.band_count() != ms.band_count() ||
      fused.image.width() != ms.width() * static_cast<std::size_t>(r) ||
      fused.image.height() != ms.height() * static_cast<std::size_t>(r))
    throw InvalidInput("fused image is not at PAN scale of the MS image for ratio " + std::to_string(r));
}

inline double loss_spectral(const FusionProduct& fused, const MultispectralImage& ms, int r) {
  require_pan_scale(fused, ms, r);
  Tape tape;
  return spectral_loss(tape.constant(to_tensor(fused.image)), to_tensor(ms), r).item();
}

inline double loss_spatial(const FusionProduct& fused, const RasterBand& pan, const IntensityWeights& w) {
  if (fused.image.width() != pan.width() || fused.image.height() != pan.height())
    throw InvalidInput("loss_spatial: fused image and PAN differ in dimensions");
  Tape tape;
  return spatial_loss(tape.constant(to_tensor(fused.image)), to_tensor(pan), w).item();
}

// ---------------------------------------------------------------- training

struct TrainingLogRow {
  long iteration = 0;
  double l1 = 0, l2 = 0, adv_g_spec = 0, adv_g_spat = 0, d_spec_loss = 0, d_spat_loss = 0, total_g = 0;
};

struct TrainingLog {
  std::vector<TrainingLogRow> rows;

  static constexpr const char* kHeader = "iteration,L1,L2,adv_G_spec,adv_G_spat,D_spec_loss,D_spat_loss,total_G";

  std::string to_csv() const {
    std::string out = std::string(kHeader) + "\n";
    for (const auto& r : rows) {
      out += std::to_string(r.iteration);
      for (double v : {r.l1, r.l2, r.adv_g_spec, r.adv_g_spat, r.d_spec_loss, r.d_spat_loss, r.total_g})
        out += "," + metrics::format_exact(v);
      out += "\n";
    }
    return out;
  }
};

struct TrainingResult {
  ParameterSet generator;
  ParameterSet spectral_discriminator;
  ParameterSet spatial_discriminator;
  IntensityWeights weights;
  TrainingLog log;
};

// Alternating updates per iteration: generator forward, spectral then spatial
// discriminator step on the detached output, then the generator step.
inline TrainingResult train(const MultispectralImage& ms, const RasterBand& pan, const TrainingConfig& cfg) {
  cfg.validate();
  const int r = cfg.ratio;
  const auto ur = static_cast<std::size_t>(r);
  if (pan.width() != ms.width() * ur || pan.height() != ms.height() * ur)
    throw InvalidInput("train: PAN " + std::to_string(pan.width()) + "x" + std::to_string(pan.height()) +
                       " is not MS " + std::to_string(ms.width()) + "x" + std::to_string(ms.height()) +
                       " times ratio " + std::to_string(r));
  if (ms.width() < 8 || ms.height() < 8) throw InvalidInput("train: MS image must be at least 8x8");

  const MultispectralImage ms_up = upsample(ms, r, Resample::bicubic);
  TrainingResult res;
  res.weights = estimate_weights(ms_up, pan);

  Rng rng(cfg.seed);
  res.generator = make_generator(ms.band_count(), rng);
  res.spectral_discriminator = make_discriminator(ms.band_count(), rng);
  res.spatial_discriminator = make_discriminator(1, rng);

  const Tensor input = generator_input(ms_up, pan);
  const Tensor ms_up_t = to_tensor(ms_up);
  const Tensor ms_t = to_tensor(ms);
  const Tensor pan_t = to_tensor(pan);
  const ad::AdamConfig adam_g{cfg.lr_g, 0.9, 0.999, 1e-8};
  const ad::AdamConfig adam_d{cfg.lr_d, 0.9, 0.999, 1e-8};

  auto step = [](ParameterSet& ps, const ad::AdamConfig& a, long it) {
    try {
      ad::adam_step(ps, a);
    } catch (const TrainingDivergence& e) {
      throw TrainingDivergence(e.what(), it);
    }
  };

  for (long it = 1; it <= cfg.iterations; ++it) {
    Tape tape;
    Var fused = generator_forward(tape, input, ms_up_t, res.generator, true);
    const Tensor fused_val = fused.value();

    TrainingLogRow row;
    row.iteration = it;
    {
      Tape td;
      Var fake = ad::avg_pool(td.constant(fused_val), r);
      Var loss = discriminator_loss_logits(discriminator_logit(td, td.constant(ms_t), res.spectral_discriminator, true),
                                           discriminator_logit(td, fake, res.spectral_discriminator, true));
      row.d_spec_loss = loss.item();
      td.backward(loss);
      step(res.spectral_discriminator, adam_d, it);
    }
    {
      Tape td;
      Var fake = intensity(td.constant(fused_val), res.weights);
      Var loss = discriminator_loss_logits(discriminator_logit(td, td.constant(pan_t), res.spatial_discriminator, true),
                                           discriminator_logit(td, fake, res.spatial_discriminator, true));
      row.d_spat_loss = loss.item();
      td.backward(loss);
      step(res.spatial_discriminator, adam_d, it);
    }

    Var l1 = spectral_loss(fused, ms_t, r);
    Var l2 = spatial_loss(fused, pan_t, res.weights);
    Var adv_spec = generator_adversarial_logit(
        discriminator_logit(tape, ad::avg_pool(fused, r), res.spectral_discriminator, false));
    Var adv_spat = generator_adversarial_logit(
        discriminator_logit(tape, intensity(fused, res.weights), res.spatial_discriminator, false));
    Var total = ad::add(ad::add(ad::scalar_mul(l1, cfg.lambda_spec), ad::scalar_mul(l2, cfg.lambda_spat)),
                        ad::add(ad::scalar_mul(adv_spec, cfg.lambda_adv_spec), ad::scalar_mul(adv_spat, cfg.lambda_adv_spat)));

    row.l1 = l1.item();
    row.l2 = l2.item();
    row.adv_g_spec = adv_spec.item();
    row.adv_g_spat = adv_spat.item();
    row.total_g = total.item();
    for (double v : {row.l1, row.l2, row.adv_g_spec, row.adv_g_spat, row.d_spec_loss, row.d_spat_loss, row.total_g})
      if (!std::isfinite(v)) throw TrainingDivergence("train: non-finite loss", it);
    res.log.rows.push_back(row);

    tape.backward(total);
    step(res.generator, adam_g, it);
  }
  return res;
}

// ---------------------------------------------------------------- inference

inline FusionProduct fuse(const ParameterSet& params, const MultispectralImage& ms, const RasterBand& pan, int r) {
  const std::size_t K = generator_bands(params);
  if (K != ms.band_count())
    throw InvalidInput("fuse: checkpoint expects " + std::to_string(K) + " bands, MS image has " +
                       std::to_string(ms.band_count()));
  for (const char* name : {"gen.conv1.weight", "gen.conv2.weight", "gen.head.weight"})
    if (!params.contains(name)) throw InvalidInput(std::string("fuse: checkpoint lacks ") + name);
  if (params.value("gen.conv1.weight").dim(1) != K + 1)
    throw InvalidInput("fuse: checkpoint input layer does not match " + std::to_string(K) + " bands + PAN");
  if (r < 1 || pan.width() != ms.width() * static_cast<std::size_t>(r) || pan.height() != ms.height() * static_cast<std::size_t>(r))
    throw InvalidInput("fuse: PAN is not MS times ratio " + std::to_string(r));

  const MultispectralImage ms_up = upsample(ms, r, Resample::bicubic);
  ParameterSet frozen = params;
  Tape tape;
  Var out = generator_forward(tape, generator_input(ms_up, pan), to_tensor(ms_up), frozen, false);
  return {to_image(out.value(), ms.scale_ratio()), "gan", ad::checkpoint_hash(params)};
}

}  // namespace panfuse::gan
