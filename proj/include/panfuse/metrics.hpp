#pragma once

// Reduced-resolution (SAM, CC, UIQI, Q4, ERGAS) and full-resolution
// (D_lambda, D_s, QNR) fusion quality metrics, plus QualityReport I/O.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "panfuse/error.hpp"
#include "panfuse/raster.hpp"

namespace panfuse::metrics {

struct MetricConfig {
  int window = 32;
  int stride = 32;
  double p = 1.0;
  double q = 1.0;
  double alpha = 1.0;
  double beta = 1.0;
  // d_h / d_l as a rational.
  int ratio_num = 1;
  int ratio_den = 4;

  double ratio() const { return static_cast<double>(ratio_num) / ratio_den; }

  void validate() const {
    if (window < 2) throw InvalidInput("metric config: window must be >= 2");
    if (stride < 1) throw InvalidInput("metric config: stride must be >= 1");
    if (!(p >= 1.0)) throw InvalidInput("metric config: p must be >= 1");
    if (!(q >= 1.0)) throw InvalidInput("metric config: q must be >= 1");
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw InvalidInput("metric config: alpha/beta must be >= 0");
    if (ratio_num <= 0 || ratio_den <= 0) throw InvalidInput("metric config: ratio must be positive");
  }

  // Same window geometry expressed on a grid r times coarser.
  MetricConfig at_coarse_scale(int r) const {
    MetricConfig c = *this;
    if (window % r != 0 || stride % r != 0)
      throw InvalidInput("metric config: window " + std::to_string(window) + " / stride " +
                         std::to_string(stride) + " not divisible by scale ratio " + std::to_string(r));
    c.window = window / r;
    c.stride = stride / r;
    if (c.window < 2) throw InvalidInput("metric config: coarse-scale window below 2 pixels");
    return c;
  }
};

namespace detail {

inline void require_same(const MultispectralImage& a, const MultispectralImage& b, const char* what) {
  if (!a.same_shape(b))
    throw InvalidInput(std::string(what) + ": images differ in dimensions or band count (" +
                       std::to_string(a.width()) + "x" + std::to_string(a.height()) + "x" +
                       std::to_string(a.band_count()) + " vs " + std::to_string(b.width()) + "x" +
                       std::to_string(b.height()) + "x" + std::to_string(b.band_count()) + ")");
}

inline void require_same(const RasterBand& a, const RasterBand& b, const char* what) {
  if (!a.same_shape(b))
    throw InvalidInput(std::string(what) + ": bands differ in dimensions");
}

inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

// Summed-area table with a zero guard row/column.
class SummedArea {
 public:
  SummedArea(std::size_t w, std::size_t h) : w_(w), table_((w + 1) * (h + 1), 0.0) {}

  template <typename F>
  void fill(std::size_t h, F&& value_at) {
    for (std::size_t y = 0; y < h; ++y) {
      double row = 0.0;
      for (std::size_t x = 0; x < w_; ++x) {
        row += value_at(y * w_ + x);
        at(x + 1, y + 1) = at(x + 1, y) + row;
      }
    }
  }

  double sum(std::size_t x0, std::size_t y0, std::size_t n) const {
    return at(x0 + n, y0 + n) - at(x0, y0 + n) - at(x0 + n, y0) + at(x0, y0);
  }

 private:
  double& at(std::size_t x, std::size_t y) { return table_[y * (w_ + 1) + x]; }
  double at(std::size_t x, std::size_t y) const { return table_[y * (w_ + 1) + x]; }

  std::size_t w_;
  std::vector<double> table_;
};

inline std::vector<std::pair<std::size_t, std::size_t>> window_origins(std::size_t w, std::size_t h,
                                                                       const MetricConfig& cfg) {
  const auto n = static_cast<std::size_t>(cfg.window), s = static_cast<std::size_t>(cfg.stride);
  if (w < n || h < n)
    throw InvalidInput("uiqi: image " + std::to_string(w) + "x" + std::to_string(h) +
                       " smaller than window " + std::to_string(n));
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t y = 0; y + n <= h; y += s)
    for (std::size_t x = 0; x + n <= w; x += s) out.emplace_back(x, y);
  return out;
}

// Relative variance below which a window is re-evaluated exactly so that
// genuinely constant tiles hit the constant-window conventions.
inline constexpr double kNearConstant = 1e-10;

}  // namespace detail

// Wang-Bovik index from window moments: correlation x luminance x contrast.
// Constant tiles: both constant and equal -> 1, otherwise 0.
inline double uiqi_from_moments(double mean_a, double mean_b, double var_a, double var_b, double cov) {
  if (var_a == 0.0 && var_b == 0.0) return mean_a == mean_b ? 1.0 : 0.0;
  if (var_a == 0.0 || var_b == 0.0) return 0.0;
  const double mm = mean_a * mean_a + mean_b * mean_b;
  const double luminance = mm == 0.0 ? 1.0 : 2.0 * mean_a * mean_b / mm;
  return 2.0 * cov / (var_a + var_b) * luminance;
}

// ---------------------------------------------------------------- SAM

// Per-pixel spectral angle in degrees; zero vectors give 0.
inline std::vector<double> sam_angles(const MultispectralImage& F, const MultispectralImage& M) {
  detail::require_same(F, M, "sam");
  if (F.band_count() < 2) throw InvalidInput("sam: needs at least 2 bands");
  const std::size_t n = F.width() * F.height(), K = F.band_count();
  // atan2(|f x m|, f.m) with the cross norm from the Lagrange identity summed
  // term by term; exact zero for parallel vectors, unlike acos near 1.
  std::vector<double> angle(n, 0.0), f(K), m(K);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0, nf = 0.0, nm = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      f[k] = F.band(k)[i];
      m[k] = M.band(k)[i];
      dot += f[k] * m[k];
      nf += f[k] * f[k];
      nm += m[k] * m[k];
    }
    if (nf == 0.0 || nm == 0.0) continue;
    double cross = 0.0;
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = a + 1; b < K; ++b) {
        const double t = f[a] * m[b] - f[b] * m[a];
        cross += t * t;
      }
    angle[i] = detail::rad2deg(std::atan2(std::sqrt(cross), dot));
  }
  return angle;
}

inline double sam_global(const MultispectralImage& F, const MultispectralImage& M) {
  const auto a = sam_angles(F, M);
  double s = 0.0;
  for (double v : a) s += v;
  return s / static_cast<double>(a.size());
}

// Angle map linearized to integers 0..255 (min -> 0, max -> 255, round half up).
inline RasterBand sam_map(const MultispectralImage& F, const MultispectralImage& M) {
  const auto a = sam_angles(F, M);
  RasterBand out(F.width(), F.height());
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  if (*hi == *lo) return out;
  const double scale = 255.0 / (*hi - *lo);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::floor((a[i] - *lo) * scale + 0.5);
  return out;
}

// ---------------------------------------------------------------- CC

inline double cc(const RasterBand& F, const RasterBand& M) {
  detail::require_same(F, M, "cc");
  if (F.empty()) throw InvalidInput("cc: empty input");
  const double n = static_cast<double>(F.size());
  double mf = 0.0, mm = 0.0;
  for (std::size_t i = 0; i < F.size(); ++i) {
    mf += F[i];
    mm += M[i];
  }
  mf /= n;
  mm /= n;
  double sfm = 0.0, sff = 0.0, smm = 0.0;
  for (std::size_t i = 0; i < F.size(); ++i) {
    const double df = F[i] - mf, dm = M[i] - mm;
    sfm += df * dm;
    sff += df * df;
    smm += dm * dm;
  }
  auto constant = [](const RasterBand& b) {
    return std::all_of(b.data().begin(), b.data().end(), [&](double v) { return v == b[0]; });
  };
  if (sff == 0.0 || smm == 0.0 || constant(F) || constant(M)) throw DegenerateInput("cc: constant input");
  return sfm / std::sqrt(sff * smm);
}

// Band-averaged correlation coefficient.
inline double cc(const MultispectralImage& F, const MultispectralImage& M) {
  detail::require_same(F, M, "cc");
  double s = 0.0;
  for (std::size_t k = 0; k < F.band_count(); ++k) s += cc(F.band(k), M.band(k));
  return s / static_cast<double>(F.band_count());
}

// ---------------------------------------------------------------- UIQI

inline double uiqi(const RasterBand& A, const RasterBand& B, const MetricConfig& cfg) {
  cfg.validate();
  detail::require_same(A, B, "uiqi");
  const std::size_t w = A.width(), h = A.height();
  const auto origins = detail::window_origins(w, h, cfg);
  const auto n = static_cast<std::size_t>(cfg.window);
  const double count = static_cast<double>(n * n);

  detail::SummedArea sa(w, h), sb(w, h), saa(w, h), sbb(w, h), sab(w, h);
  sa.fill(h, [&](std::size_t i) { return A[i]; });
  sb.fill(h, [&](std::size_t i) { return B[i]; });
  saa.fill(h, [&](std::size_t i) { return A[i] * A[i]; });
  sbb.fill(h, [&](std::size_t i) { return B[i] * B[i]; });
  sab.fill(h, [&](std::size_t i) { return A[i] * B[i]; });

  auto exact = [&](std::size_t x0, std::size_t y0) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t y = y0; y < y0 + n; ++y)
      for (std::size_t x = x0; x < x0 + n; ++x) {
        ma += A(x, y);
        mb += B(x, y);
      }
    ma /= count;
    mb /= count;
    double va = 0.0, vb = 0.0, cab = 0.0;
    for (std::size_t y = y0; y < y0 + n; ++y)
      for (std::size_t x = x0; x < x0 + n; ++x) {
        const double da = A(x, y) - ma, db = B(x, y) - mb;
        va += da * da;
        vb += db * db;
        cab += da * db;
      }
    return uiqi_from_moments(ma, mb, va / (count - 1), vb / (count - 1), cab / (count - 1));
  };

  double total = 0.0;
  for (const auto& [x0, y0] : origins) {
    const double suma = sa.sum(x0, y0, n), sumb = sb.sum(x0, y0, n);
    const double ma = suma / count, mb = sumb / count;
    const double va = (saa.sum(x0, y0, n) - suma * ma) / (count - 1);
    const double vb = (sbb.sum(x0, y0, n) - sumb * mb) / (count - 1);
    const double cab = (sab.sum(x0, y0, n) - suma * mb) / (count - 1);
    const bool near_const = va <= detail::kNearConstant * (ma * ma + 1e-300) ||
                            vb <= detail::kNearConstant * (mb * mb + 1e-300);
    total += near_const ? exact(x0, y0) : uiqi_from_moments(ma, mb, va, vb, cab);
  }
  return total / static_cast<double>(origins.size());
}

// Band-averaged UIQI.
inline double uiqi(const MultispectralImage& A, const MultispectralImage& B, const MetricConfig& cfg) {
  detail::require_same(A, B, "uiqi");
  double s = 0.0;
  for (std::size_t k = 0; k < A.band_count(); ++k) s += uiqi(A.band(k), B.band(k), cfg);
  return s / static_cast<double>(A.band_count());
}

// ---------------------------------------------------------------- Q4

using Quaternion = std::array<double, 4>;

inline Quaternion qmul(const Quaternion& a, const Quaternion& b) {
  return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
          a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
          a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
          a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

inline Quaternion qconj(const Quaternion& a) { return {a[0], -a[1], -a[2], -a[3]}; }

inline double qnorm2(const Quaternion& a) { return a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3]; }

// Quaternion UIQI from window moments; cov is E[(z - mz) conj(v - mv)].
inline double q4_from_moments(const Quaternion& mz, const Quaternion& mv, double var_z, double var_v,
                              const Quaternion& cov) {
  if (var_z == 0.0 && var_v == 0.0) return mz == mv ? 1.0 : 0.0;
  if (var_z == 0.0 || var_v == 0.0) return 0.0;
  const double nz = qnorm2(mz), nv = qnorm2(mv);
  const double luminance = nz + nv == 0.0 ? 1.0 : 2.0 * std::sqrt(nz) * std::sqrt(nv) / (nz + nv);
  return 2.0 * std::sqrt(qnorm2(cov)) / (var_z + var_v) * luminance;
}

inline double q4(const MultispectralImage& F, const MultispectralImage& M, const MetricConfig& cfg) {
  cfg.validate();
  detail::require_same(F, M, "q4");
  if (F.band_count() != 4)
    throw InvalidInput("q4: requires exactly 4 bands, got " + std::to_string(F.band_count()));
  const std::size_t w = F.width(), h = F.height();
  const auto origins = detail::window_origins(w, h, cfg);
  const auto n = static_cast<std::size_t>(cfg.window);
  const double count = static_cast<double>(n * n);

  auto z_at = [&](std::size_t i) { return Quaternion{F.band(0)[i], F.band(1)[i], F.band(2)[i], F.band(3)[i]}; };
  auto v_at = [&](std::size_t i) { return Quaternion{M.band(0)[i], M.band(1)[i], M.band(2)[i], M.band(3)[i]}; };

  std::vector<detail::SummedArea> sz(4, {w, h}), sv(4, {w, h}), szv(4, {w, h});
  detail::SummedArea szz(w, h), svv(w, h);
  for (int c = 0; c < 4; ++c) {
    sz[c].fill(h, [&](std::size_t i) { return F.band(c)[i]; });
    sv[c].fill(h, [&](std::size_t i) { return M.band(c)[i]; });
    szv[c].fill(h, [&](std::size_t i) { return qmul(z_at(i), qconj(v_at(i)))[c]; });
  }
  szz.fill(h, [&](std::size_t i) { return qnorm2(z_at(i)); });
  svv.fill(h, [&](std::size_t i) { return qnorm2(v_at(i)); });

  auto exact = [&](std::size_t x0, std::size_t y0) {
    Quaternion mz{}, mv{};
    for (std::size_t y = y0; y < y0 + n; ++y)
      for (std::size_t x = x0; x < x0 + n; ++x) {
        const auto z = z_at(y * w + x), v = v_at(y * w + x);
        for (int c = 0; c < 4; ++c) {
          mz[c] += z[c];
          mv[c] += v[c];
        }
      }
    for (int c = 0; c < 4; ++c) {
      mz[c] /= count;
      mv[c] /= count;
    }
    double vz = 0.0, vv = 0.0;
    Quaternion cov{};
    for (std::size_t y = y0; y < y0 + n; ++y)
      for (std::size_t x = x0; x < x0 + n; ++x) {
        auto dz = z_at(y * w + x), dv = v_at(y * w + x);
        for (int c = 0; c < 4; ++c) {
          dz[c] -= mz[c];
          dv[c] -= mv[c];
        }
        vz += qnorm2(dz);
        vv += qnorm2(dv);
        const auto p = qmul(dz, qconj(dv));
        for (int c = 0; c < 4; ++c) cov[c] += p[c];
      }
    for (double& c : cov) c /= count - 1;
    return q4_from_moments(mz, mv, vz / (count - 1), vv / (count - 1), cov);
  };

  double total = 0.0;
  for (const auto& [x0, y0] : origins) {
    Quaternion mz, mv;
    for (int c = 0; c < 4; ++c) {
      mz[c] = sz[c].sum(x0, y0, n) / count;
      mv[c] = sv[c].sum(x0, y0, n) / count;
    }
    const double vz = (szz.sum(x0, y0, n) - count * qnorm2(mz)) / (count - 1);
    const double vv = (svv.sum(x0, y0, n) - count * qnorm2(mv)) / (count - 1);
    // sum (z - mz) conj(v - mv) = sum z conj(v) - n mz conj(mv)
    const auto mm = qmul(mz, qconj(mv));
    Quaternion cov;
    for (int c = 0; c < 4; ++c) cov[c] = (szv[c].sum(x0, y0, n) - count * mm[c]) / (count - 1);
    const bool near_const = vz <= detail::kNearConstant * (qnorm2(mz) + 1e-300) ||
                            vv <= detail::kNearConstant * (qnorm2(mv) + 1e-300);
    total += near_const ? exact(x0, y0) : q4_from_moments(mz, mv, vz, vv, cov);
  }
  return total / static_cast<double>(origins.size());
}

// ---------------------------------------------------------------- ERGAS

// 100 (d_h/d_l) sqrt(mean_k (RMSE_k / mu_k)^2), mu_k from the reference M.
inline double ergas(const MultispectralImage& F, const MultispectralImage& M, const MetricConfig& cfg) {
  cfg.validate();
  detail::require_same(F, M, "ergas");
  double acc = 0.0;
  for (std::size_t k = 0; k < F.band_count(); ++k) {
    const auto& f = F.band(k);
    const auto& m = M.band(k);
    double se = 0.0, mu = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      se += (f[i] - m[i]) * (f[i] - m[i]);
      mu += m[i];
    }
    mu /= static_cast<double>(m.size());
    if (mu == 0.0) throw DegenerateInput("ergas: reference band " + std::to_string(k) + " has zero mean");
    const double rmse = std::sqrt(se / static_cast<double>(f.size()));
    acc += (rmse / mu) * (rmse / mu);
  }
  return 100.0 * cfg.ratio() * std::sqrt(acc / static_cast<double>(F.band_count()));
}

// ---------------------------------------------------------------- full resolution

namespace detail {

inline int scale_between(std::size_t fine, std::size_t coarse, const char* what) {
  if (coarse == 0 || fine % coarse != 0)
    throw InvalidInput(std::string(what) + ": fine size " + std::to_string(fine) +
                       " is not an integer multiple of coarse size " + std::to_string(coarse));
  return static_cast<int>(fine / coarse);
}

}  // namespace detail

// M at MS scale, F at PAN scale. cfg windows are PAN-scale; MS-scale terms use window/r.
inline double d_lambda(const MultispectralImage& M, const MultispectralImage& F, const MetricConfig& cfg) {
  cfg.validate();
  const std::size_t K = M.band_count();
  if (K < 2) throw InvalidInput("d_lambda: needs at least 2 bands");
  if (F.band_count() != K) throw InvalidInput("d_lambda: band count mismatch");
  const int r = detail::scale_between(F.width(), M.width(), "d_lambda");
  if (detail::scale_between(F.height(), M.height(), "d_lambda") != r)
    throw InvalidInput("d_lambda: anisotropic scale between fused and MS images");
  const MetricConfig coarse = cfg.at_coarse_scale(r);
  double acc = 0.0;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      if (i == j) continue;
      const double diff = uiqi(M.band(i), M.band(j), coarse) - uiqi(F.band(i), F.band(j), cfg);
      acc += std::pow(std::abs(diff), cfg.p);
    }
  return std::pow(acc / static_cast<double>(K * (K - 1)), 1.0 / cfg.p);
}

// P at PAN scale, P_L the degraded PAN at MS scale.
inline double d_s(const MultispectralImage& M, const MultispectralImage& F, const RasterBand& P,
                  const RasterBand& P_L, const MetricConfig& cfg) {
  cfg.validate();
  const std::size_t K = M.band_count();
  if (F.band_count() != K) throw InvalidInput("d_s: band count mismatch");
  if (F.width() != P.width() || F.height() != P.height())
    throw InvalidInput("d_s: fused image and PAN differ in dimensions");
  if (M.width() != P_L.width() || M.height() != P_L.height())
    throw InvalidInput("d_s: MS image and degraded PAN differ in dimensions");
  const int r = detail::scale_between(P.width(), P_L.width(), "d_s");
  if (detail::scale_between(P.height(), P_L.height(), "d_s") != r)
    throw InvalidInput("d_s: anisotropic scale between PAN and degraded PAN");
  const MetricConfig coarse = cfg.at_coarse_scale(r);
  double acc = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double diff = uiqi(M.band(k), P_L, coarse) - uiqi(F.band(k), P, cfg);
    acc += std::pow(std::abs(diff), cfg.q);
  }
  return std::pow(acc / static_cast<double>(K), 1.0 / cfg.q);
}

inline double qnr(double dl, double ds, const MetricConfig& cfg = {}) {
  if (!(dl >= 0.0 && dl <= 1.0) || !(ds >= 0.0 && ds <= 1.0))
    throw InvalidInput("qnr: D_lambda and D_s must lie in [0,1]");
  return std::pow(1.0 - dl, cfg.alpha) * std::pow(1.0 - ds, cfg.beta);
}

// ---------------------------------------------------------------- reports

enum class Mode { reduced, full };

inline std::string_view to_string(Mode m) { return m == Mode::reduced ? "reduced" : "full"; }

inline Mode parse_mode(std::string_view s) {
  if (s == "reduced") return Mode::reduced;
  if (s == "full") return Mode::full;
  throw InvalidInput("unknown mode '" + std::string(s) + "' (expected reduced|full)");
}

inline const std::vector<std::string>& metric_names(Mode m) {
  static const std::vector<std::string> reduced{"SAM", "ERGAS", "CC", "UIQI", "Q4"};
  static const std::vector<std::string> full{"D_lambda", "D_s", "QNR"};
  return m == Mode::reduced ? reduced : full;
}

// Shortest decimal that parses back to the same double.
inline std::string format_exact(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_6g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline double parse_double(std::string_view s, std::string_view what) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw InvalidInput("cannot parse '" + std::string(s) + "' as a number for " + std::string(what));
  return v;
}

struct QualityReport {
  Mode mode = Mode::reduced;
  std::vector<std::pair<std::string, double>> entries;
  MetricConfig config;

  double at(std::string_view name) const {
    for (const auto& [k, v] : entries)
      if (k == name) return v;
    throw InvalidInput("quality report has no metric '" + std::string(name) + "'");
  }

  // Header of metric names, then one row at 6 significant digits.
  std::string to_csv() const {
    std::string head, row;
    for (const auto& [k, v] : entries) {
      head += (head.empty() ? "" : ",") + k;
      row += (row.empty() ? "" : ",") + format_6g(v);
    }
    return head + "\n" + row + "\n";
  }

  // key = value block echoing the configuration; values round-trip exactly.
  std::string to_keyvalue() const {
    std::ostringstream os;
    os << "mode = " << to_string(mode) << "\n"
       << "window = " << config.window << "\n"
       << "stride = " << config.stride << "\n"
       << "p = " << format_exact(config.p) << "\n"
       << "q = " << format_exact(config.q) << "\n"
       << "alpha = " << format_exact(config.alpha) << "\n"
       << "beta = " << format_exact(config.beta) << "\n"
       << "ergas_ratio = " << config.ratio_num << "/" << config.ratio_den << "\n";
    for (const auto& [k, v] : entries) os << k << " = " << format_exact(v) << "\n";
    return os.str();
  }
};

inline void validate_report(const QualityReport& r) {
  const auto& names = metric_names(r.mode);
  if (r.entries.size() != names.size())
    throw InvalidInput("quality report: wrong metric count for mode " + std::string(to_string(r.mode)));
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (r.entries[i].first != names[i])
      throw InvalidInput("quality report: expected metric " + names[i] + ", found " + r.entries[i].first);
    if (!std::isfinite(r.entries[i].second))
      throw NumericalError("quality report: non-finite value for " + names[i]);
  }
}

inline std::pair<int, int> parse_ratio(std::string_view s) {
  const auto slash = s.find('/');
  if (slash == std::string_view::npos) throw InvalidInput("ratio must be written as N/D, got '" + std::string(s) + "'");
  const double n = parse_double(s.substr(0, slash), "ratio numerator");
  const double d = parse_double(s.substr(slash + 1), "ratio denominator");
  if (n != std::floor(n) || d != std::floor(d) || n <= 0 || d <= 0)
    throw InvalidInput("ratio must be a positive integer fraction, got '" + std::string(s) + "'");
  return {static_cast<int>(n), static_cast<int>(d)};
}

inline QualityReport parse_keyvalue_report(std::string_view text) {
  QualityReport r;
  std::map<std::string, std::string> kv;
  std::vector<std::string> order;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidInput("report: malformed line '" + line + "'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    kv[key] = trim(line.substr(eq + 1));
    order.push_back(key);
  }
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw InvalidInput("report: missing key '" + k + "'");
    return it->second;
  };
  r.mode = parse_mode(need("mode"));
  r.config.window = static_cast<int>(parse_double(need("window"), "window"));
  r.config.stride = static_cast<int>(parse_double(need("stride"), "stride"));
  r.config.p = parse_double(need("p"), "p");
  r.config.q = parse_double(need("q"), "q");
  r.config.alpha = parse_double(need("alpha"), "alpha");
  r.config.beta = parse_double(need("beta"), "beta");
  std::tie(r.config.ratio_num, r.config.ratio_den) = parse_ratio(need("ergas_ratio"));
  for (const auto& name : metric_names(r.mode)) r.entries.emplace_back(name, parse_double(need(name), name));
  validate_report(r);
  return r;
}

// ---------------------------------------------------------------- protocols

inline QualityReport evaluate_reduced(const MultispectralImage& F, const MultispectralImage& GT,
                                      const MetricConfig& cfg = {}) {
  cfg.validate();
  QualityReport r{Mode::reduced, {}, cfg};
  r.entries = {{"SAM", sam_global(F, GT)},
               {"ERGAS", ergas(F, GT, cfg)},
               {"CC", cc(F, GT)},
               {"UIQI", uiqi(F, GT, cfg)},
               {"Q4", q4(F, GT, cfg)}};
  validate_report(r);
  return r;
}

inline QualityReport evaluate_full(const MultispectralImage& F, const MultispectralImage& M, const RasterBand& P,
                                   const RasterBand& P_L, const MetricConfig& cfg = {}) {
  cfg.validate();
  const double dl = d_lambda(M, F, cfg);
  const double ds = d_s(M, F, P, P_L, cfg);
  QualityReport r{Mode::full, {}, cfg};
  r.entries = {{"D_lambda", dl}, {"D_s", ds}, {"QNR", qnr(dl, ds, cfg)}};
  validate_report(r);
  return r;
}

inline QualityReport ideal_report(Mode mode, const MetricConfig& cfg = {}) {
  QualityReport r{mode, {}, cfg};
  if (mode == Mode::reduced)
    r.entries = {{"SAM", 0.0}, {"ERGAS", 0.0}, {"CC", 1.0}, {"UIQI", 1.0}, {"Q4", 1.0}};
  else
    r.entries = {{"D_lambda", 0.0}, {"D_s", 0.0}, {"QNR", 1.0}};
  return r;
}

}  // namespace panfuse::metrics
