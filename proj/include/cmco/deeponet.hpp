#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cmco/nn/grad_check.hpp"
#include "cmco/nn/layers.hpp"
#include "cmco/nn/matrix.hpp"
#include "cmco/nn/rng.hpp"
#include "cmco/normalization.hpp"

namespace cmco {

// Recurrent encoder for the input sequence. Dropout sits between stacked
// recurrent layers; layer normalization acts on the top layer's final state.
struct BranchConfig {
  nn::CellKind kind = nn::CellKind::gru;
  std::size_t input_channels = 1;
  std::size_t hidden = 256;
  std::size_t layers = 4;
  double dropout = 0.1;
  bool layer_norm = true;

  void validate() const;
  bool operator==(const BranchConfig&) const = default;
};

// Dense encoder for query coordinates: widths [d, w1, ..., wk, q]. Hidden
// layers use `activation` followed by dropout; the last layer is linear.
struct TrunkConfig {
  std::vector<std::size_t> widths{2, 128, 128, 128, 256};
  nn::Activation activation = nn::Activation::tanh;
  double dropout = 0.1;

  std::size_t query_dim() const { return widths.front(); }
  std::size_t embedding_size() const { return widths.back(); }
  void validate() const;
  bool operator==(const TrunkConfig&) const = default;
};

struct DeepONetParams {
  std::vector<nn::RecurrentParams> branch;
  nn::Matrix norm_gain;   // [1 x H], empty without layer norm
  nn::Matrix norm_shift;  // [1 x H]
  std::vector<nn::Matrix> trunk_weight;
  std::vector<nn::Matrix> trunk_bias;
  nn::Matrix output_bias{1, 1};

  // Named views in serialization order.
  std::vector<nn::ParameterRef> refs();
  std::vector<std::pair<std::string, const nn::Matrix*>> named() const;

  DeepONetParams zeros_like() const;
  std::size_t total_size() const;
  void set_zero();
  DeepONetParams& operator+=(const DeepONetParams& other);
};

struct DeepONetModel {
  BranchConfig branch;
  TrunkConfig trunk;
  DeepONetParams params;
  NormStats norm;

  double bias() const { return params.output_bias[0]; }
};

// Field values at each query point, in physical units.
using FieldPrediction = std::vector<double>;

struct Architecture {
  BranchConfig branch;
  TrunkConfig trunk;
};

// Full-size architectures of the three reference cases.
Architecture lid_driven_cavity_architecture();  // LSTM branch, ReLU trunk [2,512,512,512,256]
Architecture plastic_deformation_architecture();  // GRU branch, tanh trunk [2,128,128,128,256]
Architecture cosmic_dose_architecture();  // 12-channel GRU branch, ReLU trunk [2,256,256,256,256]

// Sum over parameter arrays derived from the configs alone.
std::size_t closed_form_parameter_count(const BranchConfig& branch, const TrunkConfig& trunk);
std::size_t parameter_count(const DeepONetModel& model);

// Allocates and initializes every parameter. Dense weights are Glorot
// uniform with zero biases, recurrent arrays uniform in +-1/sqrt(H), layer
// norm gain 1 and shift 0, output bias 0.
DeepONetModel build_model(const BranchConfig& branch, const TrunkConfig& trunk,
                          nn::RngStream& rng);

// Operator evaluation G(u)(r_j) for one input function u [T x C] on the
// query grid [P x d]. With dropout active, masks come from two children split
// off `rng` (trunk first, then branch), so each call draws fresh masks.
FieldPrediction forward(const DeepONetModel& model, const nn::Matrix& u, const nn::Matrix& grid,
                        bool dropout_active, nn::RngStream& rng);

// ---------------------------------------------------------------------------
// Batched machinery in normalized units, shared by training and inference.

struct BranchTrace {
  std::vector<nn::RecurrentTrace> layers;
  std::vector<std::vector<nn::Matrix>> keep;  // [gap][t] keep masks, empty if inactive
  nn::Matrix final_hidden;                    // top layer h_T before layer norm
};

struct TrunkTrace {
  std::vector<nn::Matrix> inputs;   // input to each dense layer
  std::vector<nn::Matrix> outputs;  // post-activation output of each dense layer
  std::vector<nn::Matrix> keep;     // keep mask per hidden layer, empty if inactive
};

struct OperatorTrace {
  BranchTrace branch;
  TrunkTrace trunk;
  nn::Matrix branch_embedding;  // psi [B x q]
  nn::Matrix trunk_embedding;   // phi [P x q]
};

// Branch encoder over a sequence of [B x C] steps. `row_streams` drives the
// dropout masks: empty means inactive, one stream is shared by every row,
// otherwise one stream per row.
nn::Matrix branch_forward(const DeepONetModel& model, const std::vector<nn::Matrix>& sequence,
                          std::span<nn::RngStream> row_streams, BranchTrace* trace = nullptr);

// Trunk encoder over normalized coordinates [P x d]; null stream = inactive.
nn::Matrix trunk_forward(const DeepONetModel& model, const nn::Matrix& coords,
                         nn::RngStream* stream, TrunkTrace* trace = nullptr);

// Normalized output [B x P] = psi phi^T + bias.
nn::Matrix combine(const DeepONetModel& model, const nn::Matrix& branch_embedding,
                   const nn::Matrix& trunk_embedding);

nn::Matrix forward_normalized(const DeepONetModel& model, const std::vector<nn::Matrix>& sequence,
                              const nn::Matrix& coords, std::span<nn::RngStream> branch_streams,
                              nn::RngStream* trunk_stream, OperatorTrace* trace = nullptr);

// Accumulates d loss / d params given d loss / d normalized output [B x P].
void backward_normalized(const DeepONetModel& model, const OperatorTrace& trace,
                         const nn::Matrix& d_output, DeepONetParams& grads);

// Splits normalized inputs u_b [T x C] into per-step batch matrices [B x C].
std::vector<nn::Matrix> to_sequence(std::span<const nn::Matrix> inputs);

}  // namespace cmco
