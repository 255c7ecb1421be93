#pragma once

// Synthetic scenes, Wald reduction, baseline fusers and experiment reports.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "panfuse/error.hpp"
#include "panfuse/metrics.hpp"
#include "panfuse/random.hpp"
#include "panfuse/raster.hpp"

namespace panfuse::harness {

using metrics::MetricConfig;
using metrics::Mode;
using metrics::QualityReport;

struct SyntheticScene {
  MultispectralImage gt_hrms;  // ground truth at PAN scale
  MultispectralImage ms;       // MTF-degraded gt
  RasterBand pan;
  std::vector<double> pan_weights;
  std::uint64_t seed = 0;
  int ratio = 1;
};

// 3x3 binomial blur ([1 2 1]/4 separable), reflective borders.
inline RasterBand mild_blur(const RasterBand& band) {
  static constexpr double k[3] = {0.25, 0.5, 0.25};
  return separable_filter(band, k);
}

// PAN response as weighted band sum followed by the mild blur.
inline RasterBand synthesize_pan(const MultispectralImage& gt, const std::vector<double>& weights) {
  return mild_blur(intensity_component(gt, IntensityWeights{weights, 0.0}));
}

inline SyntheticScene synth_scene(std::uint64_t seed, std::size_t width, std::size_t height, std::size_t bands, int r) {
  if (r < 1) throw InvalidInput("synth_scene: ratio must be >= 1");
  if (bands < 2) throw InvalidInput("synth_scene: needs at least 2 bands");
  const auto ur = static_cast<std::size_t>(r);
  if (width == 0 || height == 0 || width % ur != 0 || height % ur != 0)
    throw InvalidInput("synth_scene: " + std::to_string(width) + "x" + std::to_string(height) +
                       " not divisible by ratio " + std::to_string(r));
  Rng rng(seed);
  const double W = static_cast<double>(width), H = static_cast<double>(height);
  std::vector<RasterBand> gt(bands, RasterBand(width, height));

  for (auto& b : gt) {
    const double a0 = rng.uniform(0.25, 0.45), ax = rng.uniform(-0.12, 0.12), ay = rng.uniform(-0.12, 0.12);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) b(x, y) = a0 + ax * (x / W) + ay * (y / H);
  }

  // Gaussian blobs: shared geometry and amplitude, per-band gain.
  for (int i = 0; i < 6; ++i) {
    const double cx = rng.uniform(0.0, W), cy = rng.uniform(0.0, H);
    const double sigma = rng.uniform(W / 16.0, W / 6.0);
    const double amp = rng.uniform(-0.2, 0.25);
    for (auto& b : gt) {
      const double gain = rng.uniform(0.6, 1.4);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double dx = x - cx, dy = y - cy;
          b(x, y) += gain * amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
    }
  }

  // Sharp rectangles; spectra vary around a shared level.
  for (int i = 0; i < 10; ++i) {
    const auto rw = static_cast<std::size_t>(rng.uniform(W / 16.0, W / 4.0));
    const auto rh = static_cast<std::size_t>(rng.uniform(H / 16.0, H / 4.0));
    const auto x0 = static_cast<std::size_t>(rng.uniform(0.0, W - static_cast<double>(rw)));
    const auto y0 = static_cast<std::size_t>(rng.uniform(0.0, H - static_cast<double>(rh)));
    const double level = rng.uniform(-0.25, 0.25);
    for (auto& b : gt) {
      const double v = level * rng.uniform(0.85, 1.15);
      for (std::size_t y = y0; y < std::min(y0 + rh, height); ++y)
        for (std::size_t x = x0; x < std::min(x0 + rw, width); ++x) b(x, y) += v;
    }
  }

  // Small "buildings": dense high-frequency detail with distinct spectra.
  const std::size_t small = width * height / 400;
  for (std::size_t i = 0; i < small; ++i) {
    const auto rw = static_cast<std::size_t>(rng.uniform(2.0, 10.0));
    const auto rh = static_cast<std::size_t>(rng.uniform(2.0, 10.0));
    const auto x0 = static_cast<std::size_t>(rng.uniform(0.0, W));
    const auto y0 = static_cast<std::size_t>(rng.uniform(0.0, H));
    const double level = rng.uniform(-0.2, 0.2);
    for (auto& b : gt) {
      const double v = level * rng.uniform(0.9, 1.1);
      for (std::size_t y = y0; y < std::min(y0 + rh, height); ++y)
        for (std::size_t x = x0; x < std::min(x0 + rw, width); ++x) b(x, y) += v;
    }
  }

  // Band-correlated fine texture.
  {
    RasterBand tex(width, height);
    for (double& v : tex.data()) v = rng.uniform(-1.0, 1.0);
    tex = mild_blur(tex);
    for (auto& b : gt) {
      const double gain = rng.uniform(0.043, 0.047);
      for (std::size_t i = 0; i < b.size(); ++i) b[i] += gain * tex[i];
    }
  }

  for (auto& b : gt)
    for (double& v : b.data()) v = std::clamp(v, 0.02, 0.98);

  SyntheticScene s;
  s.gt_hrms = MultispectralImage(std::move(gt), r);
  s.ms = mtf_degrade(s.gt_hrms, r);
  s.pan_weights.assign(bands, 1.0 / static_cast<double>(bands));
  s.pan = synthesize_pan(s.gt_hrms, s.pan_weights);
  s.seed = seed;
  s.ratio = r;
  return s;
}

struct WaldReduced {
  MultispectralImage ms_lo;
  RasterBand pan_lo;
  MultispectralImage reference;
};

// Degrades both inputs by r; the original MS becomes the reference.
inline WaldReduced wald_reduce(const MultispectralImage& ms, const RasterBand& pan, int r) {
  const auto ur = static_cast<std::size_t>(std::max(r, 1));
  if (pan.width() != ms.width() * ur || pan.height() != ms.height() * ur)
    throw InvalidInput("wald_reduce: PAN is not MS times ratio " + std::to_string(r));
  return {mtf_degrade(ms, r), mtf_degrade(pan, r), ms};
}

// ---------------------------------------------------------------- baselines

inline FusionProduct baseline_fuse(const std::string& method, const MultispectralImage& ms, const RasterBand& pan, int r) {
  const auto ur = static_cast<std::size_t>(std::max(r, 1));
  if (pan.width() != ms.width() * ur || pan.height() != ms.height() * ur)
    throw InvalidInput("baseline_fuse: PAN is not MS times ratio " + std::to_string(r));
  MultispectralImage ms_up = upsample(ms, r, Resample::bicubic);
  if (method == "exp") return {std::move(ms_up), "exp", {}};
  if (method == "cs") {
    const IntensityWeights w = estimate_weights(ms_up, pan);
    const InjectionGains g = estimate_gains(ms_up, intensity_component(ms_up, w));
    return detail_inject(ms_up, pan, g, w);
  }
  if (method == "glp") {
    const RasterBand pan_low = upsample(mtf_degrade(pan, r), r, Resample::bicubic);
    const InjectionGains g = estimate_gains(ms_up, pan_low);
    RasterBand detail_map(pan.width(), pan.height());
    for (std::size_t i = 0; i < pan.size(); ++i) detail_map[i] = pan[i] - pan_low[i];
    return {clamp01(inject(ms_up, detail_map, g)), "glp", {}};
  }
  throw InvalidInput("unknown fusion method '" + method + "' (expected exp|cs|glp)");
}

// ---------------------------------------------------------------- experiments

using FuseFn = std::function<FusionProduct(const MultispectralImage&, const RasterBand&, int)>;

struct Method {
  std::string name;
  FuseFn fuse;
};

inline Method builtin_method(const std::string& name) {
  return {name, [name](const MultispectralImage& ms, const RasterBand& pan, int r) { return baseline_fuse(name, ms, pan, r); }};
}

struct ExperimentResult {
  std::string method;
  Mode mode = Mode::reduced;
  std::optional<QualityReport> report;  // empty when the method failed
  std::string error;
  double wall_seconds = 0.0;
};

// PANFUSE_THREADS caps worker threads; default is every core.
inline unsigned worker_count() {
  if (const char* env = std::getenv("PANFUSE_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace detail {

inline std::vector<ExperimentResult> score_method(const SyntheticScene& scene, const Method& m, const MetricConfig& cfg,
                                                  const RasterBand& pan_low) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult red{m.name, Mode::reduced, {}, {}, 0.0};
  ExperimentResult full{m.name, Mode::full, {}, {}, 0.0};
  try {
    const FusionProduct f = m.fuse(scene.ms, scene.pan, scene.ratio);
    try {
      red.report = metrics::evaluate_reduced(f.image, scene.gt_hrms, cfg);
    } catch (const std::exception& e) {
      red.error = e.what();
    }
    try {
      full.report = metrics::evaluate_full(f.image, scene.ms, scene.pan, pan_low, cfg);
    } catch (const std::exception& e) {
      full.error = e.what();
    }
  } catch (const std::exception& e) {
    red.error = full.error = e.what();
  }
  red.wall_seconds = full.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {red, full};
}

}  // namespace detail

inline std::vector<ExperimentResult> sorted_by_method(std::vector<ExperimentResult> rs) {
  std::stable_sort(rs.begin(), rs.end(), [](const auto& a, const auto& b) {
    return a.method != b.method ? a.method < b.method : a.mode < b.mode;
  });
  return rs;
}

// Comma-separated table for one mode: method, then metric names; values round
// trip exactly, failed methods show NA. The Ideal row closes the table.
inline std::string results_csv(const std::vector<ExperimentResult>& results, Mode mode) {
  std::string out = "method";
  for (const auto& n : metrics::metric_names(mode)) out += "," + n;
  out += "\n";
  for (const auto& r : sorted_by_method(results)) {
    if (r.mode != mode) continue;
    out += r.method;
    for (const auto& n : metrics::metric_names(mode))
      out += "," + (r.report ? metrics::format_exact(r.report->at(n)) : std::string("NA"));
    out += "\n";
  }
  out += "Ideal";
  for (const auto& [_, v] : metrics::ideal_report(mode).entries) out += "," + metrics::format_exact(v);
  return out + "\n";
}

// Inverse of results_csv; the Ideal row is returned like any other.
inline std::vector<ExperimentResult> parse_results_csv(const std::string& text, const MetricConfig& cfg = {}) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw InvalidInput("results table: empty");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.empty() || header[0] != "method") throw InvalidInput("results table: first column must be 'method'");
  const std::vector<std::string> names(header.begin() + 1, header.end());
  Mode mode;
  if (names == metrics::metric_names(Mode::reduced))
    mode = Mode::reduced;
  else if (names == metrics::metric_names(Mode::full))
    mode = Mode::full;
  else
    throw InvalidInput("results table: unrecognized metric columns");

  std::vector<ExperimentResult> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> cells;
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) throw InvalidInput("results table: row '" + line + "' has wrong column count");
    ExperimentResult r{cells[0], mode, {}, {}, 0.0};
    if (cells[1] == "NA") {
      r.error = "NA";
    } else {
      QualityReport rep{mode, {}, cfg};
      for (std::size_t i = 0; i < names.size(); ++i)
        rep.entries.emplace_back(names[i], metrics::parse_double(cells[i + 1], names[i]));
      r.report = rep;
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Human-readable aligned table of both modes.
inline std::string results_text(const std::vector<ExperimentResult>& results, const MetricConfig& cfg) {
  std::ostringstream os;
  os << "window=" << cfg.window << " stride=" << cfg.stride << " p=" << cfg.p << " q=" << cfg.q
     << " alpha=" << cfg.alpha << " beta=" << cfg.beta << " ergas_ratio=" << cfg.ratio_num << "/" << cfg.ratio_den
     << "\n";
  for (Mode mode : {Mode::reduced, Mode::full}) {
    os << "\n" << (mode == Mode::reduced ? "Reduced-resolution mode" : "Full-resolution mode") << "\n";
    os << std::left << std::setw(16) << "method";
    for (const auto& n : metrics::metric_names(mode)) os << std::right << std::setw(12) << n;
    os << "\n";
    auto sorted = sorted_by_method(results);
    ExperimentResult ideal{"Ideal", mode, metrics::ideal_report(mode, cfg), {}, 0.0};
    sorted.push_back(ideal);
    for (const auto& r : sorted) {
      if (r.mode != mode) continue;
      os << std::left << std::setw(16) << r.method;
      if (!r.report) {
        os << "  failed: " << r.error << "\n";
        continue;
      }
      for (const auto& [_, v] : r.report->entries) os << std::right << std::setw(12) << std::fixed << std::setprecision(4) << v;
      os << "\n";
    }
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
}

// Fuses and scores every method in both modes. Methods may run concurrently;
// results are ordered by method name. Report files go to out_dir when given.
inline std::vector<ExperimentResult> run_experiment(const SyntheticScene& scene, const std::vector<Method>& methods,
                                                    const MetricConfig& cfg,
                                                    const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  cfg.validate();
  const RasterBand pan_low = mtf_degrade(scene.pan, scene.ratio);
  std::vector<std::vector<ExperimentResult>> per_method(methods.size());
  const unsigned workers = std::min<unsigned>(worker_count(), static_cast<unsigned>(std::max<std::size_t>(methods.size(), 1)));
  for (std::size_t first = 0; first < methods.size(); first += workers) {
    std::vector<std::future<std::vector<ExperimentResult>>> jobs;
    const std::size_t last = std::min(methods.size(), first + workers);
    for (std::size_t i = first; i < last; ++i)
      jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, detail::score_method,
                                std::cref(scene), std::cref(methods[i]), std::cref(cfg), std::cref(pan_low)));
    for (std::size_t i = first; i < last; ++i) per_method[i] = jobs[i - first].get();
  }
  std::vector<ExperimentResult> all;
  for (auto& v : per_method) all.insert(all.end(), v.begin(), v.end());
  all = sorted_by_method(std::move(all));

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_text(*out_dir / "reduced.csv", results_csv(all, Mode::reduced));
    write_text(*out_dir / "full.csv", results_csv(all, Mode::full));
    write_text(*out_dir / "report.txt", results_text(all, cfg));
  }
  return all;
}

}  // namespace panfuse::harness
