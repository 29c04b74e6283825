#include "cmco/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include "cmco/error.hpp"

namespace cmco {

using io::json;
using nn::Matrix;
using nn::RngStream;

namespace {

// Stream-id namespaces inside one training seed.
constexpr std::uint64_t kShuffleDomain = 1;
constexpr std::uint64_t kBranchDropDomain = 2;
constexpr std::uint64_t kTrunkDropDomain = 3;

double floored_std(double var, const std::string& what, std::vector<std::string>* warnings) {
  const double s = std::sqrt(std::max(var, 0.0));
  if (s < kStdFloor) {
    if (warnings) warnings->push_back(what + " is constant; std floored to 1e-12");
    return kStdFloor;
  }
  return s;
}

struct ShardResult {
  double sum_sq = 0.0;
  DeepONetParams grads;
};

// Forward and backward over rows [lo, hi) of a batch. Gradients are scaled
// by the full batch denominator so shard results add up to the batch result.
void run_shard(const DeepONetModel& model, const std::vector<Matrix>& inputs,
               const Matrix& targets, const Matrix& coords, std::vector<RngStream> branch_streams,
               RngStream trunk_stream, std::size_t lo, std::size_t hi, double denom,
               ShardResult& out) {
  const std::span<const Matrix> rows(inputs.data() + lo, hi - lo);
  const std::vector<Matrix> seq = to_sequence(rows);
  OperatorTrace trace;
  const bool drop = !branch_streams.empty();
  const Matrix pred = forward_normalized(model, seq, coords, branch_streams,
                                         drop ? &trunk_stream : nullptr, &trace);
  Matrix d_out(pred.rows(), pred.cols());
  double sum_sq = 0.0;
  for (std::size_t b = 0; b < pred.rows(); ++b) {
    for (std::size_t j = 0; j < pred.cols(); ++j) {
      const double r = pred(b, j) - targets(lo + b, j);
      sum_sq += r * r;
      d_out(b, j) = 2.0 * r / denom;
    }
  }
  out.sum_sq = sum_sq;
  out.grads = model.params.zeros_like();
  backward_normalized(model, trace, d_out, out.grads);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("Adam eps must be > 0");
  if (!(plateau.factor > 0.0 && plateau.factor < 1.0)) throw ConfigError("plateau factor must lie in (0, 1)");
  if (plateau.patience < 1) throw ConfigError("plateau patience must be >= 1");
  if (!(plateau.threshold >= 0.0)) throw ConfigError("plateau threshold must be >= 0");
  if (!(plateau.min_lr >= 0.0)) throw ConfigError("min_lr must be >= 0");
}

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"plateau",
           {{"factor", c.plateau.factor},
            {"patience", c.plateau.patience},
            {"threshold", c.plateau.threshold},
            {"min_lr", c.plateau.min_lr}}},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("adam")) {
      const json& a = j.at("adam");
      c.adam.beta1 = a.value("beta1", c.adam.beta1);
      c.adam.beta2 = a.value("beta2", c.adam.beta2);
      c.adam.eps = a.value("eps", c.adam.eps);
    }
    if (j.contains("plateau")) {
      const json& p = j.at("plateau");
      c.plateau.factor = p.value("factor", c.plateau.factor);
      c.plateau.patience = p.value("patience", c.plateau.patience);
      c.plateau.threshold = p.value("threshold", c.plateau.threshold);
      c.plateau.min_lr = p.value("min_lr", c.plateau.min_lr);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

NormStats compute_norm_stats(const Dataset& train, std::vector<std::string>* warnings) {
  require_role(train, Role::train, "compute_norm_stats");
  train.validate();
  const std::size_t n = train.size(), T = train.steps, C = train.channels;
  if (n == 0) throw ConfigError("compute_norm_stats: empty train split");

  NormStats s;
  s.input_mean.assign(C, 0.0);
  s.input_std.assign(C, 0.0);
  const double count = static_cast<double>(n * T);
  for (std::size_t r = 0; r < n * T; ++r)
    for (std::size_t c = 0; c < C; ++c) s.input_mean[c] += train.branch_inputs[r * C + c];
  for (double& m : s.input_mean) m /= count;
  std::vector<double> var(C, 0.0);
  for (std::size_t r = 0; r < n * T; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const double d = train.branch_inputs[r * C + c] - s.input_mean[c];
      var[c] += d * d;
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    s.input_std[c] = floored_std(var[c] / count, "input channel " + std::to_string(c), warnings);
  }

  double mean = 0.0;
  for (double y : train.fields) mean += y;
  mean /= static_cast<double>(train.fields.size());
  double v = 0.0;
  for (double y : train.fields) v += (y - mean) * (y - mean);
  s.output_mean = mean;
  s.output_std = floored_std(v / static_cast<double>(train.fields.size()), "output field", warnings);

  const std::size_t d = train.query_dim();
  s.coord_min.assign(d, 0.0);
  s.coord_max.assign(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    double lo = train.grid(0, k), hi = lo;
    for (std::size_t j = 1; j < train.points(); ++j) {
      lo = std::min(lo, train.grid(j, k));
      hi = std::max(hi, train.grid(j, k));
    }
    s.coord_min[k] = lo;
    s.coord_max[k] = hi;
  }
  return s;
}

LossResult mse_loss(const Matrix& pred, const Matrix& truth) {
  nn::require_shape(truth, pred.rows(), pred.cols(), "mse_loss truth");
  const double denom = static_cast<double>(pred.size());
  LossResult out{0.0, Matrix(pred.rows(), pred.cols())};
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = pred[i] - truth[i];
    sum_sq += r * r;
    out.grad[i] = 2.0 * r / denom;
  }
  out.loss = sum_sq / denom;
  return out;
}

void adam_step(std::span<const nn::ParameterRef> params, std::span<const nn::ParameterRef> grads,
               AdamState& state, double lr, const AdamConfig& cfg) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::require_shape(*grads[k].value, params[k].value->rows(), params[k].value->cols(),
                      params[k].name.c_str());
    for (double g : grads[k].value->values()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in " + params[k].name + " at Adam step " +
                           std::to_string(state.t + 1));
      }
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value->rows(), p.value->cols());
      state.v.emplace_back(p.value->rows(), p.value->cols());
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].value->values();
    const auto& g = grads[k].value->values();
    auto m = state.m[k].values();
    auto v = state.v[k].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

double plateau_step(PlateauState& state, double epoch_loss, const PlateauConfig& cfg) {
  if (!state.has_best || epoch_loss < state.best * (1.0 - cfg.threshold)) {
    state.best = epoch_loss;
    state.has_best = true;
    state.bad_epochs = 0;
    return state.lr;
  }
  state.bad_epochs += 1;
  if (state.bad_epochs >= cfg.patience) {
    state.lr = std::max(state.lr * cfg.factor, cfg.min_lr);
    state.bad_epochs = 0;
  }
  return state.lr;
}

LossHistory fit(DeepONetModel& model, const Dataset& train, const TrainConfig& cfg) {
  cfg.validate();
  require_role(train, Role::train, "fit");
  train.validate();
  model.norm.validate(model.branch.input_channels, model.trunk.query_dim());
  if (train.channels != model.branch.input_channels || train.query_dim() != model.trunk.query_dim()) {
    throw DimensionError("train split (C = " + std::to_string(train.channels) + ", d = " +
                         std::to_string(train.query_dim()) + ") does not match the model");
  }

  const std::size_t n = train.size(), P = train.points();
  const Matrix coords = model.norm.normalize_coords(train.grid);
  std::vector<Matrix> inputs;
  inputs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) inputs.push_back(model.norm.normalize_input(train.input(i)));
  Matrix targets(n, P);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = train.field(i);
    for (std::size_t j = 0; j < P; ++j) targets(i, j) = model.norm.normalize_output(y[j]);
  }

  LossHistory history;
  AdamState adam;
  PlateauState plateau{cfg.learning_rate};
  std::vector<std::size_t> order(n);
  DeepONetParams grads = model.params.zeros_like();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    RngStream shuffle(cfg.seed, RngStream::compose({kShuffleDomain, epoch}));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_index(i)]);

    const double lr = plateau.lr;
    double epoch_sum = 0.0;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch) {
      const std::size_t rows = std::min(cfg.batch_size, n - start);
      std::vector<Matrix> batch_inputs;
      Matrix batch_targets(rows, P);
      for (std::size_t b = 0; b < rows; ++b) {
        const std::size_t i = order[start + b];
        batch_inputs.push_back(inputs[i]);
        for (std::size_t j = 0; j < P; ++j) batch_targets(b, j) = targets(i, j);
      }
      std::vector<RngStream> streams;
      streams.reserve(rows);
      for (std::size_t b = 0; b < rows; ++b) {
        streams.emplace_back(cfg.seed, RngStream::compose({kBranchDropDomain, epoch, batch, b}));
      }
      const RngStream trunk_stream(cfg.seed, RngStream::compose({kTrunkDropDomain, epoch, batch}));
      const double denom = static_cast<double>(rows * P);

      const std::size_t workers = std::min(cfg.threads, rows);
      std::vector<ShardResult> shards(workers);
      auto shard_streams = [&](std::size_t lo, std::size_t hi) {
        return std::vector<RngStream>(streams.begin() + static_cast<std::ptrdiff_t>(lo),
                                      streams.begin() + static_cast<std::ptrdiff_t>(hi));
      };
      if (workers == 1) {
        run_shard(model, batch_inputs, batch_targets, coords, shard_streams(0, rows), trunk_stream, 0,
                  rows, denom, shards[0]);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
          const std::size_t lo = rows * w / workers, hi = rows * (w + 1) / workers;
          pool.emplace_back(run_shard, std::cref(model), std::cref(batch_inputs),
                            std::cref(batch_targets), std::cref(coords), shard_streams(lo, hi),
                            trunk_stream, lo, hi, denom, std::ref(shards[w]));
        }
        for (auto& t : pool) t.join();
      }

      double sum_sq = 0.0;
      grads.set_zero();
      for (auto& s : shards) {
        sum_sq += s.sum_sq;
        grads += s.grads;
      }
      const double loss = sum_sq / denom;
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch));
      }
      const auto param_refs = model.params.refs();
      const auto grad_refs = grads.refs();
      adam_step(param_refs, grad_refs, adam, lr, cfg.adam);
      epoch_sum += loss * static_cast<double>(rows);
    }
    const double epoch_loss = epoch_sum / static_cast<double>(n);
    history.push_back({epoch, lr, epoch_loss});
    plateau_step(plateau, epoch_loss, cfg.plateau);
  }
  return history;
}

void write_loss_csv(const std::filesystem::path& path, const LossHistory& history) {
  std::ostringstream out;
  out << "epoch,lr,train_loss\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << io::format_double(r.lr) << ',' << io::format_double(r.train_loss) << '\n';
  }
  io::write_text(path, out.str());
}

Matrix predict_deterministic(const DeepONetModel& model, const Dataset& data, std::size_t batch_size) {
  if (data.channels != model.branch.input_channels || data.query_dim() != model.trunk.query_dim()) {
    throw DimensionError("dataset does not match the model's input channels or query dimension");
  }
  const std::size_t n = data.size(), P = data.points();
  const Matrix coords = model.norm.normalize_coords(data.grid);
  const Matrix phi = trunk_forward(model, coords, nullptr);
  Matrix out(n, P);
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t rows = std::min(batch_size, n - start);
    std::vector<Matrix> inputs;
    for (std::size_t b = 0; b < rows; ++b) inputs.push_back(model.norm.normalize_input(data.input(start + b)));
    const Matrix psi = branch_forward(model, to_sequence(inputs), {});
    const Matrix z = combine(model, psi, phi);
    for (std::size_t b = 0; b < rows; ++b) {
      for (std::size_t j = 0; j < P; ++j) {
        const double y = model.norm.denormalize_output(z(b, j));
        if (!std::isfinite(y)) throw NumericError("non-finite prediction for sample " + std::to_string(start + b));
        out(start + b, j) = y;
      }
    }
  }
  return out;
}

double relative_l2(const Matrix& pred, const Dataset& data) {
  nn::require_shape(pred, data.size(), data.points(), "relative_l2 predictions");
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto y = data.field(i);
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) {
      num += (pred(i, j) - y[j]) * (pred(i, j) - y[j]);
      den += y[j] * y[j];
    }
    total += std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
  }
  return total / static_cast<double>(data.size());
}

}  // namespace cmco
