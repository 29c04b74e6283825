#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cmco/deeponet.hpp"
#include "cmco/tasks.hpp"
#include "cmco/training.hpp"
#include "cmco/uq.hpp"

namespace cmco {

struct UqSettings {
  double alpha = kDefaultAlpha;
  double z = kDefaultZ;
  std::size_t passes = 10;
  double sigma_floor = kDefaultSigmaFloor;
  OutlierThresholds thresholds;
};

struct PipelinePaths {
  std::filesystem::path data = "run/data";
  std::filesystem::path checkpoint = "run/checkpoint";
  std::filesystem::path calibration = "run/calibration";
  std::filesystem::path report = "run/report";

  // data/, checkpoint/, calibration/ and report/ under `root`.
  static PipelinePaths under(const std::filesystem::path& root);
};

// One seed drives every stage: data generation, split, initialization,
// training and the MC-dropout ensemble.
struct PipelineConfig {
  std::string preset;
  std::uint64_t seed = 0;
  PipelinePaths paths;
  TaskSpec task;
  SplitSpec split;
  BranchConfig branch;
  TrunkConfig trunk;
  TrainConfig train;
  UqSettings uq;
  bool dump_bounds = false;

  // Propagates `seed` into task and train settings and checks every field.
  void finalize();
  void validate() const;
};

std::vector<std::string> preset_names();
// Desk-scale configurations: "antiderivative", "heat1d", "proxy_field".
PipelineConfig preset(const std::string& name);

// Config file layout: {"preset", "seed", "paths", "task", "split", "branch",
// "trunk", "train", "uq"}; sections override the preset field by field.
PipelineConfig pipeline_config_from_json(const io::json& j);
io::json to_json(const PipelineConfig& cfg);

// Seeds derived from the pipeline seed.
std::uint64_t init_seed(const PipelineConfig& cfg);
std::uint64_t ensemble_seed(const PipelineConfig& cfg);

struct TrainOutcome {
  LossHistory history;
  double train_relative_l2 = 0.0;
};

// Each command reads what earlier stages wrote under cfg.paths and logs
// progress lines to `log`.
void cmd_gen(const PipelineConfig& cfg, std::ostream& log);
TrainOutcome cmd_train(const PipelineConfig& cfg, std::ostream& log);
ConformalCalibration cmd_calibrate(const PipelineConfig& cfg, std::ostream& log);
io::json cmd_evaluate(const PipelineConfig& cfg, std::ostream& log);
io::json cmd_report(const PipelineConfig& cfg, std::ostream& log);

// Index of the highest (best) or lowest (worst) coverage row. Ties go to the
// lower mean relative error, then to the earlier row.
std::size_t best_sample(const std::vector<SampleReport>& rows);
std::size_t worst_sample(const std::vector<SampleReport>& rows);

// 20 equal bins on [0, 1]; the top bin is closed.
std::vector<std::size_t> coverage_histogram(const std::vector<double>& coverage, std::size_t bins = 20);

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitProvenance = 4;

}  // namespace cmco
