#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include <CLI11.hpp>

#include "cmco/error.hpp"
#include "cmco/pipeline.hpp"

namespace cmco {

namespace {

struct Options {
  std::string config;
  std::optional<std::string> preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> root, data, ckpt, calib, out;
  std::optional<double> alpha, z;
  std::optional<std::size_t> passes, epochs, n;
  bool dump_bounds = false;
};

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "JSON config; sections override the preset");
  sub->add_option("--preset", o.preset, "antiderivative (default), heat1d or proxy_field");
  sub->add_option("--seed", o.seed, "Seed for every stage");
  sub->add_option("--root", o.root, "Place data/, checkpoint/, calibration/, report/ under this directory");
  sub->add_option("--data", o.data, "Dataset directory");
  sub->add_option("--ckpt", o.ckpt, "Checkpoint directory");
  sub->add_option("--calib", o.calib, "Calibration artifact directory");
  sub->add_option("--out", o.out, "Report directory");
  sub->add_option("--alpha", o.alpha, "Miscoverage level");
  sub->add_option("--z", o.z, "Interval multiplier");
  sub->add_option("--passes", o.passes, "MC-dropout passes n_c");
  sub->add_option("--epochs", o.epochs, "Training epochs");
  sub->add_option("--n", o.n, "Number of generated samples");
}

PipelineConfig resolve(const Options& o) {
  io::json j = o.config.empty() ? io::json::object() : io::read_json(o.config);
  if (o.preset) j["preset"] = *o.preset;
  if (o.seed) j["seed"] = *o.seed;
  if (o.n) j["task"]["n"] = *o.n;
  if (o.epochs) j["train"]["epochs"] = *o.epochs;
  if (o.alpha) j["uq"]["alpha"] = *o.alpha;
  if (o.z) j["uq"]["z"] = *o.z;
  if (o.passes) j["uq"]["passes"] = *o.passes;
  PipelineConfig cfg = pipeline_config_from_json(j);
  if (o.root) cfg.paths = PipelinePaths::under(*o.root);
  if (o.data) cfg.paths.data = *o.data;
  if (o.ckpt) cfg.paths.checkpoint = *o.ckpt;
  if (o.calib) cfg.paths.calibration = *o.calib;
  if (o.out) cfg.paths.report = *o.out;
  cfg.dump_bounds = o.dump_bounds;
  if (const char* t = std::getenv("CMCO_THREADS")) cfg.train.threads = std::stoul(t);
  cfg.validate();
  return cfg;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Conformalized MC-dropout DeepONet pipeline"};
  app.require_subcommand(1);
  Options o;
  auto* gen = app.add_subcommand("gen", "Generate a task dataset and split it");
  auto* train = app.add_subcommand("train", "Fit the operator network on the train split");
  auto* calibrate = app.add_subcommand("calibrate", "Compute per-location conformal quantiles");
  auto* evaluate = app.add_subcommand("evaluate", "Coverage and error on the test split");
  auto* report = app.add_subcommand("report", "Histogram, scatter and best/worst sample tables");
  auto* run = app.add_subcommand("run", "All stages in order");
  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  for (auto* s : {gen, train, calibrate, evaluate, report, run, show}) add_common(s, o);
  for (auto* s : {evaluate, run}) s->add_flag("--dump-bounds", o.dump_bounds, "Write per-sample bound tables");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const PipelineConfig cfg = resolve(o);
    if (show->parsed()) {
      out << to_json(cfg).dump(2) << '\n';
    } else if (gen->parsed()) {
      cmd_gen(cfg, out);
    } else if (train->parsed()) {
      cmd_train(cfg, out);
    } else if (calibrate->parsed()) {
      cmd_calibrate(cfg, out);
    } else if (evaluate->parsed()) {
      cmd_evaluate(cfg, out);
    } else if (report->parsed()) {
      cmd_report(cfg, out);
    } else if (run->parsed()) {
      cmd_gen(cfg, out);
      cmd_train(cfg, out);
      cmd_calibrate(cfg, out);
      cmd_evaluate(cfg, out);
      cmd_report(cfg, out);
    }
  } catch (const ProvenanceMismatch& e) {
    err << "error: " << e.what() << '\n';
    return kExitProvenance;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitOk;
}

}  // namespace cmco
