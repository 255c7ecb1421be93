// panfuse command-line front end.
//
//   panfuse synth   --seed 7 --size 256 --bands 4 --ratio 4 --out scene
//   panfuse degrade --in scene --out reduced
//   panfuse fuse    --in reduced --method cs --out fused
//   panfuse train   --in reduced --out model
//   panfuse eval    --mode reduced --fused fused/fused.pfr --in reduced --out eval
//   panfuse report  --out table eval/eval_reduced.txt ...
//
// Exit status: 0 ok, 2 invalid input or configuration, 3 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "panfuse/gan.hpp"
#include "panfuse/harness.hpp"
#include "panfuse/raster_io.hpp"

namespace fs = std::filesystem;
using namespace panfuse;
using metrics::MetricConfig;
using metrics::Mode;

namespace {

struct RunConfig {
  MetricConfig metric;
  bool ergas_ratio_set = false;
  gan::TrainingConfig training;
  std::uint64_t seed = 7;
  int ratio = 4;
  std::size_t size = 256;
  std::size_t bands = 4;
  std::string in, out, method, mode = "reduced", checkpoint, fused, reference;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

long parse_int(const std::string& v, const std::string& key) {
  const double d = metrics::parse_double(v, key);
  if (d != std::floor(d) || std::abs(d) > 9.0e15) throw InvalidInput("config key '" + key + "': expected an integer, got '" + v + "'");
  return static_cast<long>(d);
}

std::uint64_t parse_u64(const std::string& v, const std::string& key) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw InvalidInput("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
  return out;
}

std::size_t parse_size(const std::string& v, const std::string& key) {
  const long n = parse_int(v, key);
  if (n < 1) throw InvalidInput("config key '" + key + "' must be >= 1");
  return static_cast<std::size_t>(n);
}

void apply_key(RunConfig& c, const std::string& key, const std::string& v) {
  auto& m = c.metric;
  auto& t = c.training;
  if (key == "window") m.window = static_cast<int>(parse_int(v, key));
  else if (key == "stride") m.stride = static_cast<int>(parse_int(v, key));
  else if (key == "p") m.p = metrics::parse_double(v, key);
  else if (key == "q") m.q = metrics::parse_double(v, key);
  else if (key == "alpha") m.alpha = metrics::parse_double(v, key);
  else if (key == "beta") m.beta = metrics::parse_double(v, key);
  else if (key == "ergas_ratio") {
    std::tie(m.ratio_num, m.ratio_den) = metrics::parse_ratio(v);
    c.ergas_ratio_set = true;
  } else if (key == "iterations") t.iterations = parse_int(v, key);
  else if (key == "lr_g") t.lr_g = metrics::parse_double(v, key);
  else if (key == "lr_d") t.lr_d = metrics::parse_double(v, key);
  else if (key == "lambda_spec") t.lambda_spec = metrics::parse_double(v, key);
  else if (key == "lambda_spat") t.lambda_spat = metrics::parse_double(v, key);
  else if (key == "lambda_adv_spec") t.lambda_adv_spec = metrics::parse_double(v, key);
  else if (key == "lambda_adv_spat") t.lambda_adv_spat = metrics::parse_double(v, key);
  else if (key == "seed") c.seed = parse_u64(v, key);
  else if (key == "ratio") c.ratio = static_cast<int>(parse_int(v, key));
  else if (key == "size") c.size = parse_size(v, key);
  else if (key == "bands") c.bands = parse_size(v, key);
  else if (key == "in") c.in = v;
  else if (key == "out") c.out = v;
  else if (key == "method") c.method = v;
  else if (key == "mode") c.mode = v;
  else if (key == "checkpoint") c.checkpoint = v;
  else if (key == "fused") c.fused = v;
  else if (key == "reference") c.reference = v;
  else throw InvalidInput("config: unknown key '" + key + "'");
}

void load_config(RunConfig& c, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open config " + path.string());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidInput("config " + path.string() + " line " + std::to_string(n) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    try {
      apply_key(c, key, trim(line.substr(eq + 1)));
    } catch (const InvalidInput& e) {
      throw InvalidInput(std::string(e.what()) + " (" + path.string() + " line " + std::to_string(n) + ")");
    }
  }
}

// Flags registered on a subcommand; only those given on the command line
// override the config file.
struct Flags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> opts;

  void add(CLI::App* app, const std::string& key, const std::string& help) {
    opts[key] = app->add_option("--" + key, values[key], help);
  }
  void apply(RunConfig& c) const {
    for (const auto& [key, opt] : opts)
      if (opt->count() > 0) apply_key(c, key, values.at(key));
  }
};

void require(const std::string& v, const char* key) {
  if (v.empty()) throw InvalidInput(std::string("missing required setting '") + key + "'");
}

void finalize(RunConfig& c) {
  if (c.ratio < 1) throw InvalidInput("config key 'ratio' must be >= 1");
  if (!c.ergas_ratio_set) {
    c.metric.ratio_num = 1;
    c.metric.ratio_den = c.ratio;
  }
  c.metric.validate();
  c.training.seed = c.seed;
  c.training.ratio = c.ratio;
  c.training.validate();
}

std::string config_echo(const RunConfig& c) {
  std::ostringstream os;
  const auto& m = c.metric;
  const auto& t = c.training;
  os << "seed = " << c.seed << "\nratio = " << c.ratio << "\nwindow = " << m.window << "\nstride = " << m.stride
     << "\np = " << metrics::format_exact(m.p) << "\nq = " << metrics::format_exact(m.q)
     << "\nalpha = " << metrics::format_exact(m.alpha) << "\nbeta = " << metrics::format_exact(m.beta)
     << "\nergas_ratio = " << m.ratio_num << "/" << m.ratio_den << "\niterations = " << t.iterations
     << "\nlr_g = " << metrics::format_exact(t.lr_g) << "\nlr_d = " << metrics::format_exact(t.lr_d)
     << "\nlambda_spec = " << metrics::format_exact(t.lambda_spec)
     << "\nlambda_spat = " << metrics::format_exact(t.lambda_spat)
     << "\nlambda_adv_spec = " << metrics::format_exact(t.lambda_adv_spec)
     << "\nlambda_adv_spat = " << metrics::format_exact(t.lambda_adv_spat) << "\n";
  return os.str();
}

// Outputs are collected in memory and written only after every stage has
// succeeded, so failures leave nothing behind.
struct Outputs {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> files;

  void text(const std::string& name, const std::string& s) { files.emplace_back(name, std::vector<std::uint8_t>(s.begin(), s.end())); }
  void raster(const std::string& name, const MultispectralImage& img) { files.emplace_back(name, io::encode_raster(img)); }
  void raster(const std::string& name, const RasterBand& b) { raster(name, MultispectralImage({b})); }

  void commit(const std::string& dir) const {
    fs::create_directories(dir);
    for (const auto& [name, bytes] : files) io::detail::write_file(fs::path(dir) / name, bytes);
  }
};

int infer_ratio(const MultispectralImage& ms, const RasterBand& pan) {
  if (pan.width() % ms.width() != 0 || pan.width() / ms.width() != pan.height() / ms.height() ||
      pan.height() % ms.height() != 0)
    throw InvalidInput("PAN " + std::to_string(pan.width()) + "x" + std::to_string(pan.height()) +
                       " is not an integer multiple of MS " + std::to_string(ms.width()) + "x" +
                       std::to_string(ms.height()));
  return static_cast<int>(pan.width() / ms.width());
}

int cmd_synth(RunConfig& c, Outputs& out) {
  const auto s = harness::synth_scene(c.seed, c.size, c.size, c.bands, c.ratio);
  out.raster("gt.pfr", s.gt_hrms);
  out.raster("ms.pfr", s.ms);
  out.raster("pan.pfr", s.pan);
  std::string weights;
  for (double w : s.pan_weights) weights += (weights.empty() ? "" : ",") + metrics::format_exact(w);
  out.text("scene.txt", "seed = " + std::to_string(c.seed) + "\nsize = " + std::to_string(c.size) +
                            "\nbands = " + std::to_string(c.bands) + "\nratio = " + std::to_string(c.ratio) +
                            "\npan_weights = " + weights + "\n");
  return 0;
}

int cmd_degrade(RunConfig& c, Outputs& out) {
  require(c.in, "in");
  const auto ms = io::load_raster(fs::path(c.in) / "ms.pfr");
  const auto pan = io::load_band(fs::path(c.in) / "pan.pfr");
  const auto red = harness::wald_reduce(ms, pan, c.ratio);
  out.raster("ms.pfr", red.ms_lo);
  out.raster("pan.pfr", red.pan_lo);
  out.raster("reference.pfr", red.reference);
  out.text("degrade.txt", "ratio = " + std::to_string(c.ratio) + "\n");
  return 0;
}

int cmd_fuse(RunConfig& c, Outputs& out) {
  require(c.in, "in");
  require(c.method, "method");
  const auto ms = io::load_raster(fs::path(c.in) / "ms.pfr");
  const auto pan = io::load_band(fs::path(c.in) / "pan.pfr");
  const int r = infer_ratio(ms, pan);
  FusionProduct f;
  if (c.method == "gan") {
    require(c.checkpoint, "checkpoint");
    f = gan::fuse(ad::load_checkpoint(c.checkpoint), ms, pan, r);
  } else {
    f = harness::baseline_fuse(c.method, ms, pan, r);
  }
  out.raster("fused.pfr", f.image);
  out.text("fuse.txt", "method = " + f.method + "\nratio = " + std::to_string(r) +
                           (f.checkpoint_hash.empty() ? "" : "\ncheckpoint_hash = " + f.checkpoint_hash) + "\n");
  return 0;
}

int cmd_train(RunConfig& c, Outputs& out) {
  require(c.in, "in");
  const auto ms = io::load_raster(fs::path(c.in) / "ms.pfr");
  const auto pan = io::load_band(fs::path(c.in) / "pan.pfr");
  c.training.ratio = infer_ratio(ms, pan);
  const auto res = gan::train(ms, pan, c.training);
  out.files.emplace_back("generator.pfck", ad::encode_checkpoint(res.generator));
  out.text("train_log.csv", res.log.to_csv());
  out.text("train.txt", config_echo(c) + "checkpoint_hash = " + ad::checkpoint_hash(res.generator) + "\n");
  return 0;
}

int cmd_eval(RunConfig& c, Outputs& out) {
  require(c.fused, "fused");
  const Mode mode = metrics::parse_mode(c.mode);
  const auto fused = io::load_raster(c.fused);
  metrics::QualityReport rep;
  if (mode == Mode::reduced) {
    std::string ref = c.reference;
    if (ref.empty() && !c.in.empty()) ref = (fs::path(c.in) / "reference.pfr").string();
    require(ref, "reference");
    rep = metrics::evaluate_reduced(fused, io::load_raster(ref), c.metric);
  } else {
    require(c.in, "in");
    const auto ms = io::load_raster(fs::path(c.in) / "ms.pfr");
    const auto pan = io::load_band(fs::path(c.in) / "pan.pfr");
    const int r = infer_ratio(ms, pan);
    rep = metrics::evaluate_full(fused, ms, pan, mtf_degrade(pan, r), c.metric);
  }
  const std::string stem = "eval_" + std::string(metrics::to_string(mode));
  const std::string label = c.method.empty() ? fs::path(c.fused).parent_path().filename().string() : c.method;
  out.text(stem + ".csv", rep.to_csv());
  out.text(stem + ".txt", "method = " + (label.empty() ? std::string("fused") : label) + "\nseed = " +
                              std::to_string(c.seed) + "\n" + rep.to_keyvalue());
  return 0;
}

int cmd_report(RunConfig& c, Outputs& out, const std::vector<std::string>& inputs) {
  if (inputs.empty()) throw InvalidInput("report: no input files");
  std::vector<harness::ExperimentResult> rows;
  std::optional<MetricConfig> cfg;
  for (const auto& path : inputs) {
    const auto bytes = io::detail::read_file(path);
    const std::string text(bytes.begin(), bytes.end());
    auto rep = metrics::parse_keyvalue_report(text);
    std::string label = fs::path(path).stem().string();
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);)
      if (const auto eq = line.find('='); eq != std::string::npos && trim(line.substr(0, eq)) == "method")
        label = trim(line.substr(eq + 1));
    const auto& m = rep.config;
    if (cfg && (cfg->window != m.window || cfg->stride != m.stride || cfg->p != m.p || cfg->q != m.q ||
                cfg->alpha != m.alpha || cfg->beta != m.beta || cfg->ratio_num != m.ratio_num ||
                cfg->ratio_den != m.ratio_den))
      throw InvalidInput("report: " + path + " was evaluated with a different metric configuration");
    cfg = m;
    rows.push_back({label, rep.mode, rep, {}, 0.0});
  }
  c.metric = *cfg;
  rows = harness::sorted_by_method(std::move(rows));
  bool any_reduced = false, any_full = false;
  for (const auto& r : rows) (r.mode == Mode::reduced ? any_reduced : any_full) = true;
  if (any_reduced) out.text("reduced.csv", harness::results_csv(rows, Mode::reduced));
  if (any_full) out.text("full.csv", harness::results_csv(rows, Mode::full));
  out.text("report.txt", harness::results_text(rows, c.metric));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pansharpening fusion, evaluation and training"};
  app.require_subcommand(1);

  std::string config_path;
  std::map<std::string, Flags> flags;
  auto sub = [&](const std::string& name, const std::string& help, std::initializer_list<const char*> keys) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("--config", config_path, "key = value configuration file");
    for (const char* k : keys) flags[name].add(s, k, std::string("overrides config key ") + k);
    return s;
  };
  sub("synth", "write a seeded synthetic scene", {"seed", "size", "bands", "ratio", "out"});
  sub("degrade", "reduce MS and PAN by the ratio (Wald protocol)", {"in", "ratio", "out"});
  sub("fuse", "fuse MS and PAN with exp|cs|glp|gan", {"in", "method", "checkpoint", "out"});
  sub("train", "train the adversarial generator on one scene",
      {"in", "seed", "iterations", "lr_g", "lr_d", "lambda_spec", "lambda_spat", "lambda_adv_spec", "lambda_adv_spat", "out"});
  sub("eval", "score a fused image", {"mode", "fused", "reference", "in", "method", "ratio", "out"});
  CLI::App* report = sub("report", "aggregate eval reports into one table", {"out"});
  std::vector<std::string> report_inputs;
  report->add_option("inputs", report_inputs, "eval_*.txt files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "panfuse: " << e.what() << "\n";
    return 2;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    RunConfig c;
    if (!config_path.empty()) load_config(c, config_path);
    flags[name].apply(c);
    finalize(c);
    require(c.out, "out");

    Outputs out;
    if (name == "synth") cmd_synth(c, out);
    else if (name == "degrade") cmd_degrade(c, out);
    else if (name == "fuse") cmd_fuse(c, out);
    else if (name == "train") cmd_train(c, out);
    else if (name == "eval") cmd_eval(c, out);
    else cmd_report(c, out, report_inputs);
    out.commit(c.out);
    return 0;
  } catch (const InvalidInput& e) {
    std::cerr << "panfuse: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "panfuse: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "panfuse: " << e.what() << "\n";
    return 1;
  }
}
