#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "panfuse/harness.hpp"

using namespace panfuse;
namespace fs = std::filesystem;
using metrics::MetricConfig;
using metrics::Mode;

namespace {

const harness::SyntheticScene& scene() {
  static const auto s = harness::synth_scene(7, 128, 128, 4, 4);
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / "panfuse_test_harness" / name;
  fs::remove_all(d);
  return d;
}

harness::Method identity_method() {
  return {"truth", [](const MultispectralImage&, const RasterBand&, int) {
            return FusionProduct{scene().gt_hrms, "truth", {}};
          }};
}

harness::Method failing_method() {
  return {"broken", [](const MultispectralImage&, const RasterBand&, int) -> FusionProduct {
            throw NumericalError("always fails");
          }};
}

struct EnvGuard {
  explicit EnvGuard(const char* v) { setenv("PANFUSE_THREADS", v, 1); }
  ~EnvGuard() { unsetenv("PANFUSE_THREADS"); }
};

}  // namespace

TEST(SynthScene, ShapesAndDeterminism) {
  const auto& s = scene();
  EXPECT_EQ(s.gt_hrms.band_count(), 4u);
  EXPECT_EQ(s.gt_hrms.width(), 128u);
  EXPECT_EQ(s.ms.width(), 32u);
  EXPECT_EQ(s.ms.height(), 32u);
  EXPECT_EQ(s.pan.width(), 128u);
  EXPECT_EQ(s.ratio, 4);
  const auto again = harness::synth_scene(7, 128, 128, 4, 4);
  EXPECT_EQ(again.gt_hrms, s.gt_hrms);
  EXPECT_EQ(again.pan, s.pan);
  EXPECT_NE(harness::synth_scene(8, 128, 128, 4, 4).pan, s.pan);
  for (std::size_t k = 0; k < 4; ++k)
    for (double v : s.gt_hrms.band(k).data()) {
      EXPECT_GE(v, 0.02);
      EXPECT_LE(v, 0.98);
    }
}

TEST(SynthScene, PanIsBlurredWeightedSum) {
  const auto& s = scene();
  RasterBand sum(128, 128);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += s.pan_weights[k] * s.gt_hrms.band(k)[i];
  const auto expected = harness::mild_blur(sum);
  for (std::size_t i = 0; i < sum.size(); ++i) ASSERT_NEAR(s.pan[i], expected[i], 1e-10);
  EXPECT_EQ(s.ms, mtf_degrade(s.gt_hrms, 4));
}

TEST(SynthScene, InvalidArguments) {
  EXPECT_THROW(harness::synth_scene(1, 30, 32, 4, 4), InvalidInput);
  EXPECT_THROW(harness::synth_scene(1, 32, 32, 1, 4), InvalidInput);
  EXPECT_THROW(harness::synth_scene(1, 32, 32, 4, 0), InvalidInput);
}

TEST(WaldReduce, ProtocolSizes) {
  Rng rng(1);
  std::vector<RasterBand> bands(4, RasterBand(256, 256));
  for (auto& b : bands)
    for (double& v : b.data()) v = rng.uniform();
  RasterBand pan(1024, 1024, 0.5);
  const auto red = harness::wald_reduce(MultispectralImage(bands), pan, 4);
  EXPECT_EQ(red.ms_lo.width(), 64u);
  EXPECT_EQ(red.ms_lo.height(), 64u);
  EXPECT_EQ(red.pan_lo.width(), 256u);
  EXPECT_EQ(red.pan_lo.height(), 256u);
  EXPECT_EQ(red.reference.width(), 256u);
  for (double v : red.pan_lo.data()) EXPECT_NEAR(v, 0.5, 1e-12);
  EXPECT_THROW(harness::wald_reduce(MultispectralImage(bands), RasterBand(512, 512), 4), InvalidInput);
}

TEST(Baselines, ExpIsBicubicAndDetailHelps) {
  const auto& s = scene();
  EXPECT_EQ(harness::baseline_fuse("exp", s.ms, s.pan, 4).image, upsample(s.ms, 4, Resample::bicubic));
  const MetricConfig cfg;
  const double e_exp = metrics::ergas(harness::baseline_fuse("exp", s.ms, s.pan, 4).image, s.gt_hrms, cfg);
  for (const char* m : {"cs", "glp"}) {
    const auto f = harness::baseline_fuse(m, s.ms, s.pan, 4);
    EXPECT_EQ(f.method, m);
    EXPECT_LT(metrics::ergas(f.image, s.gt_hrms, cfg), e_exp) << m;
  }
  EXPECT_THROW(harness::baseline_fuse("ihs", s.ms, s.pan, 4), InvalidInput);
}

TEST(Experiment, IdentityMethodScoresIdeal) {
  const MetricConfig cfg;
  const auto rs = harness::run_experiment(scene(), {identity_method()}, cfg);
  ASSERT_EQ(rs.size(), 2u);
  const auto& red = rs[0];
  ASSERT_EQ(red.mode, Mode::reduced);
  ASSERT_TRUE(red.report);
  for (const auto& [name, v] : metrics::ideal_report(Mode::reduced).entries) EXPECT_NEAR(red.report->at(name), v, 1e-9) << name;
}

TEST(Experiment, QnrIsProductOfRow) {
  const MetricConfig cfg;
  const auto rs = harness::run_experiment(
      scene(), {harness::builtin_method("exp"), harness::builtin_method("cs"), harness::builtin_method("glp")}, cfg);
  ASSERT_EQ(rs.size(), 6u);
  int full_rows = 0;
  for (const auto& r : rs) {
    if (r.mode != Mode::full) continue;
    ++full_rows;
    ASSERT_TRUE(r.report);
    EXPECT_NEAR(r.report->at("QNR"), (1 - r.report->at("D_lambda")) * (1 - r.report->at("D_s")), 1e-12);
  }
  EXPECT_EQ(full_rows, 3);
  EXPECT_EQ(rs[0].method, "cs");
  EXPECT_EQ(rs[4].method, "glp");
}

TEST(Experiment, FailingMethodIsNa) {
  const MetricConfig cfg;
  const auto rs = harness::run_experiment(scene(), {failing_method(), harness::builtin_method("exp")}, cfg);
  ASSERT_EQ(rs.size(), 4u);
  EXPECT_EQ(rs[0].method, "broken");
  EXPECT_FALSE(rs[0].report);
  EXPECT_NE(rs[0].error.find("always fails"), std::string::npos);
  ASSERT_TRUE(rs[2].report);
  const auto csv = harness::results_csv(rs, Mode::reduced);
  EXPECT_NE(csv.find("broken,NA,NA,NA,NA,NA\n"), std::string::npos);
  EXPECT_EQ(csv.substr(csv.rfind("Ideal")), "Ideal,0,0,1,1,1\n");
}

TEST(Experiment, CsvRoundTripsExactly) {
  const MetricConfig cfg;
  const auto rs = harness::run_experiment(scene(), {harness::builtin_method("glp"), failing_method()}, cfg);
  for (Mode mode : {Mode::reduced, Mode::full}) {
    const auto csv = harness::results_csv(rs, mode);
    const auto back = harness::parse_results_csv(csv, cfg);
    ASSERT_EQ(back.size(), 3u);  // broken, glp, Ideal
    EXPECT_FALSE(back[0].report);
    for (const auto& r : rs)
      if (r.mode == mode && r.report)
        for (const auto& [name, v] : r.report->entries) EXPECT_EQ(back[1].report->at(name), v);
    EXPECT_EQ(back[2].method, "Ideal");
    // re-emitting the parsed rows reproduces the table
    std::vector<harness::ExperimentResult> rows(back.begin(), back.end() - 1);
    EXPECT_EQ(harness::results_csv(rows, mode), csv);
  }
  EXPECT_THROW(harness::parse_results_csv("name,SAM\nx,1\n"), InvalidInput);
  EXPECT_THROW(harness::parse_results_csv("method,D_lambda,D_s,QNR\nx,1,2\n"), InvalidInput);
}

TEST(Experiment, OutputsAreByteReproducible) {
  const MetricConfig cfg;
  const std::vector<harness::Method> methods{harness::builtin_method("exp"), harness::builtin_method("cs")};
  const auto a = temp_dir("a"), b = temp_dir("b");
  harness::run_experiment(scene(), methods, cfg, a);
  harness::run_experiment(scene(), methods, cfg, b);
  for (const char* f : {"reduced.csv", "full.csv", "report.txt"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  const auto report = slurp(a / "report.txt");
  EXPECT_NE(report.find("Reduced-resolution mode"), std::string::npos);
  EXPECT_NE(report.find("window=32"), std::string::npos);
}

TEST(Experiment, ThreadCountDoesNotChangeResults) {
  const MetricConfig cfg;
  const std::vector<harness::Method> methods{harness::builtin_method("exp"), harness::builtin_method("cs"),
                                             harness::builtin_method("glp")};
  std::string one, three;
  {
    EnvGuard g("1");
    EXPECT_EQ(harness::worker_count(), 1u);
    one = harness::results_csv(harness::run_experiment(scene(), methods, cfg), Mode::full);
  }
  {
    EnvGuard g("3");
    EXPECT_EQ(harness::worker_count(), 3u);
    three = harness::results_csv(harness::run_experiment(scene(), methods, cfg), Mode::full);
  }
  EXPECT_EQ(one, three);
}

TEST(Experiment, InvalidConfigRejected) {
  MetricConfig cfg;
  cfg.window = 0;
  EXPECT_THROW(harness::run_experiment(scene(), {harness::builtin_method("exp")}, cfg), InvalidInput);
}

TEST(WaldReduce, ReferenceIsInputAndExpRowReproduces) {
  const auto& s = scene();
  const auto red = harness::wald_reduce(s.ms, s.pan, 4);
  EXPECT_EQ(red.reference, s.ms);
  const MetricConfig cfg;
  const auto fused = harness::baseline_fuse("exp", red.ms_lo, red.pan_lo, 4);
  const auto a = metrics::evaluate_reduced(fused.image, red.reference, cfg);
  const auto b = metrics::evaluate_reduced(upsample(red.ms_lo, 4, Resample::bicubic), s.ms, cfg);
  EXPECT_EQ(a.entries, b.entries);
}

TEST(Baselines, CsWithoutDetailEqualsExp) {
  const auto& s = scene();
  const auto up = upsample(s.ms, 4, Resample::bicubic);
  const auto pan = intensity_component(up, estimate_weights(up, s.pan));
  const auto cs = harness::baseline_fuse("cs", s.ms, pan, 4).image;
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < pan.size(); ++i) ASSERT_NEAR(cs.band(k)[i], std::clamp(up.band(k)[i], 0.0, 1.0), 1e-9);
}
