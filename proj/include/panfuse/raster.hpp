#pragma once

// Raster containers and the classical component-substitution operations:
// resampling, MTF-matched degradation, moment histogram matching, intensity
// synthesis, least-squares weights, covariance gains and detail injection.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "panfuse/error.hpp"

namespace panfuse {

class RasterBand {
 public:
  RasterBand() = default;

  RasterBand(std::size_t width, std::size_t height, std::vector<double> data)
      : width_(width), height_(height), data_(std::move(data)) {
    if (data_.size() != width_ * height_)
      throw InvalidInput("raster band: data length " + std::to_string(data_.size()) +
                         " != " + std::to_string(width_) + "x" + std::to_string(height_));
    for (double v : data_)
      if (!std::isfinite(v)) throw InvalidInput("raster band: non-finite value");
  }

  RasterBand(std::size_t width, std::size_t height, double fill = 0.0)
      : width_(width), height_(height), data_(width * height, fill) {
    if (!std::isfinite(fill)) throw InvalidInput("raster band: non-finite fill value");
  }

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double operator()(std::size_t x, std::size_t y) const { return data_[y * width_ + x]; }
  double& operator()(std::size_t x, std::size_t y) { return data_[y * width_ + x]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool same_shape(const RasterBand& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_;
  }

  friend bool operator==(const RasterBand&, const RasterBand&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<double> data_;
};

// K co-registered bands. scale_ratio is the PAN/MS pixel ratio of the
// acquisition the image belongs to; it is carried as metadata only.
class MultispectralImage {
 public:
  MultispectralImage() = default;

  explicit MultispectralImage(std::vector<RasterBand> bands, int scale_ratio = 1)
      : bands_(std::move(bands)), scale_ratio_(scale_ratio) {
    if (bands_.empty()) throw InvalidInput("multispectral image: no bands");
    if (scale_ratio_ < 1) throw InvalidInput("multispectral image: scale ratio must be >= 1");
    for (const auto& b : bands_)
      if (!b.same_shape(bands_.front()))
        throw InvalidInput("multispectral image: bands differ in dimensions");
  }

  std::size_t band_count() const noexcept { return bands_.size(); }
  std::size_t width() const noexcept { return bands_.empty() ? 0 : bands_.front().width(); }
  std::size_t height() const noexcept { return bands_.empty() ? 0 : bands_.front().height(); }
  int scale_ratio() const noexcept { return scale_ratio_; }

  const RasterBand& band(std::size_t k) const { return bands_.at(k); }
  RasterBand& band(std::size_t k) { return bands_.at(k); }
  const std::vector<RasterBand>& bands() const noexcept { return bands_; }

  bool same_shape(const MultispectralImage& o) const noexcept {
    return band_count() == o.band_count() && width() == o.width() && height() == o.height();
  }

  friend bool operator==(const MultispectralImage&, const MultispectralImage&) = default;

 private:
  std::vector<RasterBand> bands_;
  int scale_ratio_ = 1;
};

struct IntensityWeights {
  std::vector<double> w;
  double bias = 0.0;
};

struct InjectionGains {
  std::vector<double> g;
};

struct FusionProduct {
  MultispectralImage image;
  std::string method;
  std::string checkpoint_hash;  // empty unless produced from a checkpoint
};

enum class Resample { replicate, bicubic };

namespace detail {

inline void require_ratio(int r) {
  if (r < 1) throw InvalidInput("scale ratio must be >= 1, got " + std::to_string(r));
}

inline void require_nonempty(const RasterBand& b, const char* what) {
  if (b.empty()) throw InvalidInput(std::string(what) + ": zero-sized input");
}

// Half-sample symmetric reflection: ... c b a | a b c ... Works for any offset.
inline std::size_t reflect_index(long i, long n) {
  const long period = 2 * n;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - 1 - m);
}

inline double catmull_rom(double t) {
  t = std::abs(t);
  if (t < 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
  if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
  return 0.0;
}

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

inline RasterBand upsample(const RasterBand& band, int r, Resample mode) {
  detail::require_ratio(r);
  detail::require_nonempty(band, "upsample");
  const std::size_t w = band.width(), h = band.height();
  const std::size_t ur = static_cast<std::size_t>(r);
  RasterBand out(w * ur, h * ur);
  if (mode == Resample::replicate || r == 1) {
    for (std::size_t y = 0; y < h * ur; ++y)
      for (std::size_t x = 0; x < w * ur; ++x) out(x, y) = band(x / ur, y / ur);
    return out;
  }

  // Separable Catmull-Rom; taps per output coordinate are the same for rows and columns
  // up to the axis length, so precompute both.
  struct Taps {
    long base;
    double wt[4];
  };
  auto make_taps = [r](std::size_t n_out) {
    std::vector<Taps> taps(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double src = (static_cast<double>(o) + 0.5) / r - 0.5;
      const double fl = std::floor(src);
      taps[o].base = static_cast<long>(fl) - 1;
      for (int k = 0; k < 4; ++k) taps[o].wt[k] = detail::catmull_rom(src - (fl - 1 + k));
    }
    return taps;
  };
  auto clamp_idx = [](long i, long n) { return static_cast<std::size_t>(std::clamp(i, 0L, n - 1)); };

  const auto tx = make_taps(w * ur);
  const auto ty = make_taps(h * ur);
  // Horizontal pass into an intermediate of size (w*r) x h.
  std::vector<double> tmp(w * ur * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w * ur; ++x) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k)
        s += tx[x].wt[k] * band(clamp_idx(tx[x].base + k, static_cast<long>(w)), y);
      tmp[y * w * ur + x] = s;
    }
  for (std::size_t y = 0; y < h * ur; ++y)
    for (std::size_t x = 0; x < w * ur; ++x) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k)
        s += ty[y].wt[k] * tmp[clamp_idx(ty[y].base + k, static_cast<long>(h)) * w * ur + x];
      out(x, y) = s;
    }
  return out;
}

inline MultispectralImage upsample(const MultispectralImage& ms, int r, Resample mode) {
  detail::require_ratio(r);
  if (ms.band_count() == 0) throw InvalidInput("upsample: zero-sized input");
  std::vector<RasterBand> out;
  out.reserve(ms.band_count());
  for (const auto& b : ms.bands()) out.push_back(upsample(b, r, mode));
  return MultispectralImage(std::move(out), ms.scale_ratio());
}

// r x r block averaging decimation.
inline RasterBand block_average(const RasterBand& band, int r) {
  detail::require_ratio(r);
  detail::require_nonempty(band, "block_average");
  const std::size_t ur = static_cast<std::size_t>(r);
  if (band.width() % ur != 0 || band.height() % ur != 0)
    throw InvalidInput("block_average: dimensions " + std::to_string(band.width()) + "x" +
                       std::to_string(band.height()) + " not divisible by " + std::to_string(r));
  const std::size_t w = band.width() / ur, h = band.height() / ur;
  const double inv = 1.0 / static_cast<double>(ur * ur);
  RasterBand out(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::size_t dy = 0; dy < ur; ++dy)
        for (std::size_t dx = 0; dx < ur; ++dx) s += band(x * ur + dx, y * ur + dy);
      out(x, y) = s * inv;
    }
  return out;
}

// Spatial std-dev of the Gaussian whose frequency response equals `nyquist_gain`
// at the Nyquist frequency of a grid decimated by r, i.e. at pi/r rad/pixel.
inline double mtf_sigma(int r, double nyquist_gain) {
  return static_cast<double>(r) * std::sqrt(-2.0 * std::log(nyquist_gain)) / std::numbers::pi;
}

// Normalized 1-D Gaussian taps truncated at 4 sigma; index radius is the center.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw InvalidInput("gaussian_kernel: sigma must be positive");
  const long radius = static_cast<long>(std::ceil(4.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double s = 0.0;
  for (long i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    s += v;
  }
  for (double& v : k) v /= s;
  return k;
}

// Separable convolution with a symmetric odd-length kernel, reflective borders.
inline RasterBand separable_filter(const RasterBand& band, std::span<const double> kernel) {
  const long radius = static_cast<long>(kernel.size() / 2);
  const long w = static_cast<long>(band.width()), h = static_cast<long>(band.height());
  RasterBand tmp(band.width(), band.height());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double s = 0.0;
      for (long i = -radius; i <= radius; ++i)
        s += kernel[static_cast<std::size_t>(i + radius)] *
             band(detail::reflect_index(x + i, w), static_cast<std::size_t>(y));
      tmp(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = s;
    }
  RasterBand out(band.width(), band.height());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double s = 0.0;
      for (long i = -radius; i <= radius; ++i)
        s += kernel[static_cast<std::size_t>(i + radius)] *
             tmp(static_cast<std::size_t>(x), detail::reflect_index(y + i, h));
      out(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = s;
    }
  return out;
}

inline RasterBand gaussian_blur(const RasterBand& band, double sigma) {
  const auto k = gaussian_kernel(sigma);
  return separable_filter(band, k);
}

inline constexpr double kDefaultNyquistGain = 0.30;

// MTF-matched Gaussian lowpass followed by r x r block-average decimation.
inline RasterBand mtf_degrade(const RasterBand& band, int r, double nyquist_gain = kDefaultNyquistGain) {
  detail::require_ratio(r);
  detail::require_nonempty(band, "mtf_degrade");
  if (!(nyquist_gain > 0.0 && nyquist_gain < 1.0))
    throw InvalidInput("mtf_degrade: nyquist gain must lie in (0,1)");
  const auto ur = static_cast<std::size_t>(r);
  if (band.width() % ur != 0 || band.height() % ur != 0)
    throw InvalidInput("mtf_degrade: dimensions " + std::to_string(band.width()) + "x" +
                       std::to_string(band.height()) + " not divisible by " + std::to_string(r));
  auto blurred = gaussian_blur(band, mtf_sigma(r, nyquist_gain));
  return r == 1 ? blurred : block_average(blurred, r);
}

inline MultispectralImage mtf_degrade(const MultispectralImage& ms, int r,
                                      double nyquist_gain = kDefaultNyquistGain) {
  std::vector<RasterBand> out;
  out.reserve(ms.band_count());
  for (const auto& b : ms.bands()) out.push_back(mtf_degrade(b, r, nyquist_gain));
  return MultispectralImage(std::move(out), ms.scale_ratio());
}

// Moment matching: the output has the reference's mean and (population) std.
inline RasterBand histogram_match(const RasterBand& src, const RasterBand& ref) {
  detail::require_nonempty(src, "histogram_match");
  detail::require_nonempty(ref, "histogram_match");
  auto stats = [](std::span<const double> v) {
    const double mu = detail::mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - mu) * (x - mu);
    return std::pair{mu, std::sqrt(ss / static_cast<double>(v.size()))};
  };
  const auto [mu_s, sd_s] = stats(src.data());
  const auto [mu_r, sd_r] = stats(ref.data());
  RasterBand out(src.width(), src.height(), mu_r);
  // exact test: a rounded mean leaves a tiny nonzero spread on constant bands
  const bool constant = std::all_of(src.data().begin(), src.data().end(), [&](double x) { return x == src[0]; });
  if (constant || sd_s == 0.0) return out;
  const double gain = sd_r / sd_s;
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = (src[i] - mu_s) * gain + mu_r;
  return out;
}

// I = bias + sum_k w_k * M_k, pixelwise.
inline RasterBand intensity_component(const MultispectralImage& ms, const IntensityWeights& w) {
  if (w.w.size() != ms.band_count())
    throw InvalidInput("intensity_component: " + std::to_string(w.w.size()) + " weights for " +
                       std::to_string(ms.band_count()) + " bands");
  RasterBand out(ms.width(), ms.height(), w.bias);
  for (std::size_t k = 0; k < ms.band_count(); ++k) {
    const auto& b = ms.band(k);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w.w[k] * b[i];
  }
  return out;
}

inline constexpr double kWeightRidge = 1e-8;

// Affine least-squares fit of PAN on the upsampled MS bands (normal equations).
inline IntensityWeights estimate_weights(const MultispectralImage& ms_up, const RasterBand& pan) {
  const std::size_t K = ms_up.band_count();
  if (ms_up.width() != pan.width() || ms_up.height() != pan.height())
    throw InvalidInput("estimate_weights: MS and PAN dimensions differ");
  if (pan.size() < K + 1)
    throw InvalidInput("estimate_weights: need at least K+1 pixels");

  // Column 0 is the intercept.
  Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K + 1), static_cast<Eigen::Index>(K + 1));
  Eigen::VectorXd atb = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K + 1));
  Eigen::VectorXd row(static_cast<Eigen::Index>(K + 1));
  for (std::size_t i = 0; i < pan.size(); ++i) {
    row[0] = 1.0;
    for (std::size_t k = 0; k < K; ++k) row[static_cast<Eigen::Index>(k + 1)] = ms_up.band(k)[i];
    ata.selfadjointView<Eigen::Lower>().rankUpdate(row);
    atb += row * pan[i];
  }
  ata = ata.selfadjointView<Eigen::Lower>();
  ata.diagonal().array() += kWeightRidge;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(ata);
  if (!lu.isInvertible()) throw NumericalError("estimate_weights: singular normal equations");
  const Eigen::VectorXd sol = lu.solve(atb);
  if (!sol.allFinite()) throw NumericalError("estimate_weights: non-finite solution");

  IntensityWeights out;
  out.bias = sol[0];
  for (std::size_t k = 0; k < K; ++k) out.w.push_back(sol[static_cast<Eigen::Index>(k + 1)]);
  return out;
}

// Sample covariance with (n-1) normalization.
inline double covariance(std::span<const double> a, std::span<const double> b) {
  const double ma = detail::mean(a), mb = detail::mean(b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma) * (b[i] - mb);
  return s / static_cast<double>(a.size() - 1);
}

// g_k = cov(M_k, I) / var(I)
inline InjectionGains estimate_gains(const MultispectralImage& ms_up, const RasterBand& intensity) {
  if (ms_up.width() != intensity.width() || ms_up.height() != intensity.height())
    throw InvalidInput("estimate_gains: MS and intensity dimensions differ");
  if (intensity.size() < 2) throw InvalidInput("estimate_gains: need at least 2 pixels");
  const double var = covariance(intensity.data(), intensity.data());
  if (var == 0.0) throw DegenerateInput("estimate_gains: intensity has zero variance");
  InjectionGains out;
  for (const auto& b : ms_up.bands()) out.g.push_back(covariance(b.data(), intensity.data()) / var);
  return out;
}

// Unclamped M_k + g_k * (detail), exposed for bit-exact checks.
inline MultispectralImage inject(const MultispectralImage& ms_up, const RasterBand& detail_map,
                                 const InjectionGains& g) {
  if (g.g.size() != ms_up.band_count()) throw InvalidInput("inject: gain count != band count");
  if (ms_up.width() != detail_map.width() || ms_up.height() != detail_map.height())
    throw InvalidInput("inject: dimension mismatch between MS and detail map");
  std::vector<RasterBand> out;
  out.reserve(ms_up.band_count());
  for (std::size_t k = 0; k < ms_up.band_count(); ++k) {
    RasterBand b = ms_up.band(k);
    if (g.g[k] != 0.0)
      for (std::size_t i = 0; i < b.size(); ++i) b[i] += g.g[k] * detail_map[i];
    out.push_back(std::move(b));
  }
  return MultispectralImage(std::move(out), ms_up.scale_ratio());
}

inline MultispectralImage clamp01(MultispectralImage img) {
  for (std::size_t k = 0; k < img.band_count(); ++k)
    for (double& v : img.band(k).data()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

// Component-substitution injection: M_k + g_k (P - I), clamped to [0,1].
inline FusionProduct detail_inject(const MultispectralImage& ms_up, const RasterBand& pan,
                                   const InjectionGains& g, const IntensityWeights& w) {
  if (ms_up.width() != pan.width() || ms_up.height() != pan.height())
    throw InvalidInput("detail_inject: MS and PAN dimensions differ");
  const RasterBand intensity = intensity_component(ms_up, w);
  RasterBand detail_map(pan.width(), pan.height());
  for (std::size_t i = 0; i < pan.size(); ++i) detail_map[i] = pan[i] - intensity[i];
  return {clamp01(inject(ms_up, detail_map, g)), "cs", {}};
}

}  // namespace panfuse
