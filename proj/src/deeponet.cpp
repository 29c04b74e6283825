#include "cmco/deeponet.hpp"

#include <cmath>

#include "cmco/error.hpp"

namespace cmco {

using nn::Matrix;

void BranchConfig::validate() const {
  if (input_channels < 1) throw ConfigError("branch needs at least one input channel");
  if (hidden < 1) throw ConfigError("branch hidden size must be >= 1");
  if (layers < 1) throw ConfigError("branch needs at least one recurrent layer");
  nn::validate_dropout_rate(dropout);
}

void TrunkConfig::validate() const {
  if (widths.size() < 2) throw ConfigError("trunk needs at least an input and an output width");
  for (std::size_t w : widths)
    if (w < 1) throw ConfigError("trunk layer widths must be >= 1");
  nn::validate_dropout_rate(dropout);
}

std::vector<nn::ParameterRef> DeepONetParams::refs() {
  std::vector<nn::ParameterRef> out;
  for (std::size_t l = 0; l < branch.size(); ++l) {
    const std::string prefix = "branch." + std::to_string(l) + ".";
    out.push_back({prefix + "w_ih", &branch[l].w_ih});
    out.push_back({prefix + "w_hh", &branch[l].w_hh});
    out.push_back({prefix + "b_ih", &branch[l].b_ih});
    out.push_back({prefix + "b_hh", &branch[l].b_hh});
  }
  if (!norm_gain.empty()) {
    out.push_back({"branch.norm.gain", &norm_gain});
    out.push_back({"branch.norm.shift", &norm_shift});
  }
  for (std::size_t l = 0; l < trunk_weight.size(); ++l) {
    const std::string prefix = "trunk." + std::to_string(l) + ".";
    out.push_back({prefix + "weight", &trunk_weight[l]});
    out.push_back({prefix + "bias", &trunk_bias[l]});
  }
  out.push_back({"output.bias", &output_bias});
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> DeepONetParams::named() const {
  auto mutable_refs = const_cast<DeepONetParams*>(this)->refs();
  std::vector<std::pair<std::string, const Matrix*>> out;
  out.reserve(mutable_refs.size());
  for (auto& r : mutable_refs) out.emplace_back(std::move(r.name), r.value);
  return out;
}

DeepONetParams DeepONetParams::zeros_like() const {
  DeepONetParams z = *this;
  z.set_zero();
  return z;
}

std::size_t DeepONetParams::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, m] : named()) n += m->size();
  return n;
}

void DeepONetParams::set_zero() {
  for (auto& r : refs()) r.value->fill(0.0);
}

DeepONetParams& DeepONetParams::operator+=(const DeepONetParams& other) {
  auto mine = refs();
  auto theirs = other.named();
  if (mine.size() != theirs.size()) throw DimensionError("parameter sets differ in layout");
  for (std::size_t k = 0; k < mine.size(); ++k) *mine[k].value += *theirs[k].second;
  return *this;
}

Architecture lid_driven_cavity_architecture() {
  return {{nn::CellKind::lstm, 1, 256, 4, 0.1, true},
          {{2, 512, 512, 512, 256}, nn::Activation::relu, 0.1}};
}

Architecture plastic_deformation_architecture() {
  return {{nn::CellKind::gru, 1, 256, 4, 0.1, true},
          {{2, 128, 128, 128, 256}, nn::Activation::tanh, 0.1}};
}

Architecture cosmic_dose_architecture() {
  return {{nn::CellKind::gru, 12, 256, 4, 0.1, true},
          {{2, 256, 256, 256, 256}, nn::Activation::relu, 0.1}};
}

std::size_t closed_form_parameter_count(const BranchConfig& branch, const TrunkConfig& trunk) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < branch.layers; ++l) {
    const std::size_t in = l == 0 ? branch.input_channels : branch.hidden;
    n += nn::recurrent_parameter_count(branch.kind, in, branch.hidden);
  }
  if (branch.layer_norm) n += 2 * branch.hidden;
  for (std::size_t i = 0; i + 1 < trunk.widths.size(); ++i)
    n += trunk.widths[i] * trunk.widths[i + 1] + trunk.widths[i + 1];
  return n + 1;
}

std::size_t parameter_count(const DeepONetModel& model) { return model.params.total_size(); }

DeepONetModel build_model(const BranchConfig& branch, const TrunkConfig& trunk,
                          nn::RngStream& rng) {
  branch.validate();
  trunk.validate();
  if (branch.hidden != trunk.embedding_size()) {
    throw ConfigError("branch embedding size " + std::to_string(branch.hidden) +
                      " does not match trunk output size " +
                      std::to_string(trunk.embedding_size()));
  }
  DeepONetModel model;
  model.branch = branch;
  model.trunk = trunk;
  model.norm = NormStats::identity(branch.input_channels, trunk.query_dim());

  auto& p = model.params;
  for (std::size_t l = 0; l < branch.layers; ++l) {
    const std::size_t in = l == 0 ? branch.input_channels : branch.hidden;
    auto layer = nn::RecurrentParams::zeros(branch.kind, in, branch.hidden);
    nn::recurrent_uniform(layer, rng);
    p.branch.push_back(std::move(layer));
  }
  if (branch.layer_norm) {
    p.norm_gain = Matrix(1, branch.hidden, 1.0);
    p.norm_shift = Matrix(1, branch.hidden, 0.0);
  }
  for (std::size_t i = 0; i + 1 < trunk.widths.size(); ++i) {
    Matrix w(trunk.widths[i], trunk.widths[i + 1]);
    nn::glorot_uniform(w, rng);
    p.trunk_weight.push_back(std::move(w));
    p.trunk_bias.emplace_back(1, trunk.widths[i + 1]);
  }
  p.output_bias = Matrix(1, 1);

  const std::size_t expected = closed_form_parameter_count(branch, trunk);
  if (parameter_count(model) != expected) {
    throw std::logic_error("parameter count " + std::to_string(parameter_count(model)) +
                           " disagrees with closed form " + std::to_string(expected));
  }
  return model;
}

std::vector<Matrix> to_sequence(std::span<const Matrix> inputs) {
  std::vector<Matrix> seq;
  if (inputs.empty()) return seq;
  const std::size_t T = inputs.front().rows(), C = inputs.front().cols();
  for (const Matrix& u : inputs) nn::require_shape(u, T, C, "input function");
  seq.assign(T, Matrix(inputs.size(), C));
  for (std::size_t b = 0; b < inputs.size(); ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) seq[t](b, c) = inputs[b](t, c);
  return seq;
}

namespace {

Matrix draw_row_masks(std::size_t rows, std::size_t cols, double p,
                      std::span<nn::RngStream> streams) {
  if (streams.size() == 1) {
    const Matrix one = nn::draw_keep_mask(1, cols, p, streams[0]);
    Matrix keep(rows, cols);
    for (std::size_t b = 0; b < rows; ++b)
      for (std::size_t j = 0; j < cols; ++j) keep(b, j) = one[j];
    return keep;
  }
  if (streams.size() != rows) {
    throw DimensionError("branch dropout: " + std::to_string(streams.size()) +
                         " row streams for a batch of " + std::to_string(rows));
  }
  Matrix keep(rows, cols);
  for (std::size_t b = 0; b < rows; ++b) {
    const Matrix r = nn::draw_keep_mask(1, cols, p, streams[b]);
    for (std::size_t j = 0; j < cols; ++j) keep(b, j) = r[j];
  }
  return keep;
}

}  // namespace

Matrix branch_forward(const DeepONetModel& model, const std::vector<Matrix>& sequence,
                      std::span<nn::RngStream> row_streams, BranchTrace* trace) {
  const auto& cfg = model.branch;
  const auto& p = model.params;
  if (sequence.empty()) throw DimensionError("branch: empty input sequence");
  const bool drop = !row_streams.empty() && cfg.dropout > 0.0;
  if (trace) {
    *trace = BranchTrace{};
    trace->layers.resize(cfg.layers);
    trace->keep.resize(cfg.layers - 1);
  }

  std::vector<Matrix> current = sequence;
  Matrix final_hidden;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::vector<Matrix> outputs =
        nn::recurrent_forward(p.branch[l], current, trace ? &trace->layers[l] : nullptr);
    if (l + 1 == cfg.layers) {
      final_hidden = std::move(outputs.back());
      break;
    }
    if (drop) {
      for (std::size_t t = 0; t < outputs.size(); ++t) {
        Matrix keep = draw_row_masks(outputs[t].rows(), outputs[t].cols(), cfg.dropout,
                                     row_streams);
        outputs[t] = nn::apply_keep_mask(outputs[t], keep, cfg.dropout);
        if (trace) trace->keep[l].push_back(std::move(keep));
      }
    }
    current = std::move(outputs);
  }

  Matrix embedding = cfg.layer_norm
                         ? nn::layer_norm(final_hidden, p.norm_gain, p.norm_shift)
                         : final_hidden;
  if (trace) trace->final_hidden = std::move(final_hidden);
  return embedding;
}

Matrix trunk_forward(const DeepONetModel& model, const Matrix& coords, nn::RngStream* stream,
                     TrunkTrace* trace) {
  const auto& cfg = model.trunk;
  const auto& p = model.params;
  const std::size_t n_layers = p.trunk_weight.size();
  const bool drop = stream != nullptr && cfg.dropout > 0.0;
  if (trace) *trace = TrunkTrace{};

  Matrix x = coords;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const bool last = i + 1 == n_layers;
    Matrix y = nn::dense_forward(x, p.trunk_weight[i], p.trunk_bias[i],
                                 last ? nn::Activation::none : cfg.activation);
    if (trace) {
      trace->inputs.push_back(std::move(x));
      trace->outputs.push_back(y);
    }
    if (!last && drop) {
      Matrix keep = nn::draw_keep_mask(y.rows(), y.cols(), cfg.dropout, *stream);
      y = nn::apply_keep_mask(y, keep, cfg.dropout);
      if (trace) trace->keep.push_back(std::move(keep));
    }
    x = std::move(y);
  }
  return x;
}

Matrix combine(const DeepONetModel& model, const Matrix& branch_embedding,
               const Matrix& trunk_embedding) {
  Matrix out = nn::matmul_nt(branch_embedding, trunk_embedding);
  const double bias = model.bias();
  for (double& v : out.values()) v += bias;
  return out;
}

Matrix forward_normalized(const DeepONetModel& model, const std::vector<Matrix>& sequence,
                          const Matrix& coords, std::span<nn::RngStream> branch_streams,
                          nn::RngStream* trunk_stream, OperatorTrace* trace) {
  Matrix phi = trunk_forward(model, coords, trunk_stream, trace ? &trace->trunk : nullptr);
  Matrix psi = branch_forward(model, sequence, branch_streams, trace ? &trace->branch : nullptr);
  Matrix out = combine(model, psi, phi);
  if (trace) {
    trace->branch_embedding = std::move(psi);
    trace->trunk_embedding = std::move(phi);
  }
  return out;
}

void backward_normalized(const DeepONetModel& model, const OperatorTrace& trace,
                         const Matrix& d_output, DeepONetParams& grads) {
  const auto& p = model.params;
  nn::require_shape(d_output, trace.branch_embedding.rows(), trace.trunk_embedding.rows(),
                    "d_output");

  double d_bias = 0.0;
  for (double v : d_output.values()) d_bias += v;
  grads.output_bias[0] += d_bias;

  // Trunk
  Matrix d = nn::matmul_tn(d_output, trace.branch_embedding);
  const std::size_t n_layers = p.trunk_weight.size();
  for (std::size_t i = n_layers; i-- > 0;) {
    const bool last = i + 1 == n_layers;
    if (!last && i < trace.trunk.keep.size()) {
      d = nn::apply_keep_mask(d, trace.trunk.keep[i], model.trunk.dropout);
    }
    d = nn::dense_backward(trace.trunk.inputs[i], trace.trunk.outputs[i], p.trunk_weight[i],
                           last ? nn::Activation::none : model.trunk.activation, d,
                           grads.trunk_weight[i], grads.trunk_bias[i]);
  }

  // Branch
  Matrix d_psi = nn::matmul(d_output, trace.trunk_embedding);
  Matrix d_final = model.branch.layer_norm
                       ? nn::layer_norm_backward(trace.branch.final_hidden, p.norm_gain,
                                                 nn::kLayerNormEps, d_psi, grads.norm_gain,
                                                 grads.norm_shift)
                       : d_psi;
  const std::size_t L = model.branch.layers;
  const std::size_t T = trace.branch.layers.front().inputs.size();
  std::vector<Matrix> d_hidden(T);
  d_hidden.back() = std::move(d_final);
  for (std::size_t l = L; l-- > 0;) {
    std::vector<Matrix> d_in =
        nn::recurrent_backward(p.branch[l], trace.branch.layers[l], d_hidden, grads.branch[l]);
    if (l == 0) break;
    const auto& keep = trace.branch.keep[l - 1];
    if (!keep.empty()) {
      for (std::size_t t = 0; t < T; ++t)
        d_in[t] = nn::apply_keep_mask(d_in[t], keep[t], model.branch.dropout);
    }
    d_hidden = std::move(d_in);
  }
}

FieldPrediction forward(const DeepONetModel& model, const Matrix& u, const Matrix& grid,
                        bool dropout_active, nn::RngStream& rng) {
  if (u.cols() != model.branch.input_channels || u.rows() == 0) {
    throw DimensionError("input function " + u.shape_string() + " does not match " +
                         std::to_string(model.branch.input_channels) + " branch channels");
  }
  if (grid.cols() != model.trunk.query_dim()) {
    throw DimensionError("query grid " + grid.shape_string() + " does not match trunk input " +
                         std::to_string(model.trunk.query_dim()));
  }
  const Matrix un = model.norm.normalize_input(u);
  const Matrix coords = model.norm.normalize_coords(grid);
  const std::vector<Matrix> seq = to_sequence(std::span<const Matrix>(&un, 1));

  Matrix out;
  if (dropout_active) {
    nn::RngStream trunk_stream = rng.split();
    nn::RngStream branch_stream = rng.split();
    out = forward_normalized(model, seq, coords, std::span<nn::RngStream>(&branch_stream, 1),
                             &trunk_stream);
  } else {
    out = forward_normalized(model, seq, coords, {}, nullptr);
  }

  FieldPrediction field(out.cols());
  for (std::size_t j = 0; j < field.size(); ++j) {
    field[j] = model.norm.denormalize_output(out(0, j));
    if (!std::isfinite(field[j])) {
      throw NumericError("non-finite operator output at query point " + std::to_string(j));
    }
  }
  return field;
}

}  // namespace cmco
