#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cmco/dataset.hpp"
#include "cmco/deeponet.hpp"
#include "cmco/nn/grad_check.hpp"

namespace cmco {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct PlateauConfig {
  double factor = 0.5;
  std::size_t patience = 10;
  double threshold = 1e-4;  // relative improvement that resets patience
  double min_lr = 1e-6;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  AdamConfig adam;
  PlateauConfig plateau;
  std::uint64_t seed = 0;
  // Data-parallel workers per batch. Above 1, results are reproducible to
  // about 1e-10 rather than bit-identical.
  std::size_t threads = 1;

  void validate() const;
};

io::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const io::json& j);

// Z-score statistics from the train split: per-channel input mean/std over
// all samples and steps, scalar output mean/std over all field values, and
// the coordinate range of the grid. Population stds, floored at kStdFloor;
// each floored quantity appends a message to `warnings`.
NormStats compute_norm_stats(const Dataset& train, std::vector<std::string>* warnings = nullptr);

struct LossResult {
  double loss = 0.0;
  nn::Matrix grad;  // d loss / d pred = 2 (pred - truth) / (B P)
};

LossResult mse_loss(const nn::Matrix& pred, const nn::Matrix& truth);

struct AdamState {
  std::vector<nn::Matrix> m;
  std::vector<nn::Matrix> v;
  std::size_t t = 0;  // steps taken
};

// One bias-corrected Adam update of every parameter; increments state.t.
// Non-finite gradients throw NumericError naming the parameter.
void adam_step(std::span<const nn::ParameterRef> params, std::span<const nn::ParameterRef> grads,
               AdamState& state, double lr, const AdamConfig& cfg);

struct PlateauState {
  double lr = 0.0;
  double best = 0.0;
  bool has_best = false;
  std::size_t bad_epochs = 0;
};

// Records one epoch loss and returns the learning rate for the next epoch.
// The rate decays once `patience` consecutive epochs fail to improve on the
// best loss by the relative threshold; the counter then restarts.
double plateau_step(PlateauState& state, double epoch_loss, const PlateauConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;  // rate used during the epoch
  double train_loss = 0.0;
};

using LossHistory = std::vector<EpochRecord>;

// Mini-batch training with dropout active. model.norm must already hold the
// train-split statistics. Batch order comes from (seed, epoch), dropout masks
// from (seed, epoch, batch, row) for the branch and (seed, epoch, batch) for
// the trunk.
LossHistory fit(DeepONetModel& model, const Dataset& train, const TrainConfig& cfg);

void write_loss_csv(const std::filesystem::path& path, const LossHistory& history);

// Dropout-free predictions [N x P] in physical units.
nn::Matrix predict_deterministic(const DeepONetModel& model, const Dataset& data,
                                 std::size_t batch_size = 128);

// Mean over samples of ||pred_i - y_i||_2 / ||y_i||_2.
double relative_l2(const nn::Matrix& pred, const Dataset& data);

}  // namespace cmco
