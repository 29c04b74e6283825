#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cmco/nn/matrix.hpp"
#include "cmco/nn/rng.hpp"

namespace cmco::nn {

enum class Activation { none, tanh, relu };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

// ---------------------------------------------------------------------------
// Dense layer: y = act(x W + b), x [B x I], W [I x O], b [1 x O].

Matrix dense_forward(const Matrix& x, const Matrix& weight, const Matrix& bias,
                     Activation activation);

// Backward through a dense layer given its input and (post-activation)
// output. Accumulates into d_weight/d_bias and returns d_input.
Matrix dense_backward(const Matrix& input, const Matrix& output, const Matrix& weight,
                      Activation activation, const Matrix& d_output, Matrix& d_weight,
                      Matrix& d_bias);

// ---------------------------------------------------------------------------
// Recurrent cells.
//
// Gate blocks are stacked along columns: GRU [r | z | n], LSTM [i | f | g | o].
// Each block carries an input-side and a hidden-side bias, so one layer holds
// gates * (I*H + H*H + 2H) values.

enum class CellKind { gru, lstm };

CellKind parse_cell_kind(const std::string& name);
std::string to_string(CellKind k);
std::size_t gate_count(CellKind k);

struct RecurrentParams {
  CellKind kind = CellKind::gru;
  Matrix w_ih;  // [I x G*H]
  Matrix w_hh;  // [H x G*H]
  Matrix b_ih;  // [1 x G*H]
  Matrix b_hh;  // [1 x G*H]

  static RecurrentParams zeros(CellKind kind, std::size_t input_size, std::size_t hidden_size);

  std::size_t input_size() const { return w_ih.rows(); }
  std::size_t hidden_size() const { return w_hh.rows(); }
  std::size_t parameter_count() const {
    return w_ih.size() + w_hh.size() + b_ih.size() + b_hh.size();
  }
  void validate() const;
};

std::size_t recurrent_parameter_count(CellKind kind, std::size_t input_size,
                                      std::size_t hidden_size);

// One GRU step on a batch: x [B x I], h_prev [B x H] -> h [B x H].
Matrix gru_step(const RecurrentParams& params, const Matrix& x, const Matrix& h_prev);

struct LstmState {
  Matrix h;
  Matrix c;
};

// One LSTM step on a batch.
LstmState lstm_step(const RecurrentParams& params, const Matrix& x, const LstmState& state);

// Everything backward() needs from a sequence forward pass.
struct RecurrentTrace {
  std::vector<Matrix> inputs;     // x_t, t = 0..T-1
  std::vector<Matrix> hidden;     // h_t, t = 0..T (h_0 = 0)
  std::vector<Matrix> cell;       // LSTM c_t, t = 0..T
  std::vector<Matrix> gates;      // post-activation gates per step
  std::vector<Matrix> hidden_n;   // GRU: h_{t-1} W_hn + b_hn per step
};

// Runs the cell over a sequence from zero initial state. Returns h_1..h_T.
std::vector<Matrix> recurrent_forward(const RecurrentParams& params,
                                      const std::vector<Matrix>& inputs,
                                      RecurrentTrace* trace = nullptr);

// Backpropagation through time. d_hidden[t] is the loss gradient w.r.t. the
// output h_{t+1}; an empty matrix means zero. Returns gradients w.r.t. inputs.
std::vector<Matrix> recurrent_backward(const RecurrentParams& params,
                                       const RecurrentTrace& trace,
                                       const std::vector<Matrix>& d_hidden,
                                       RecurrentParams& grads);

// ---------------------------------------------------------------------------
// Layer normalization over each row (population variance).

inline constexpr double kLayerNormEps = 1e-5;

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& shift,
                  double eps = kLayerNormEps);

Matrix layer_norm_backward(const Matrix& x, const Matrix& gain, double eps,
                           const Matrix& d_output, Matrix& d_gain, Matrix& d_shift);

// ---------------------------------------------------------------------------
// Inverted dropout.

void validate_dropout_rate(double p);

// Keep-indicator (1 kept, 0 dropped); each entry dropped with probability p.
Matrix draw_keep_mask(std::size_t rows, std::size_t cols, double p, RngStream& rng);

// Survivors scaled by 1/(1-p).
Matrix apply_keep_mask(const Matrix& x, const Matrix& keep, double p);

struct DropoutResult {
  Matrix output;
  Matrix mask;  // keep indicator
};

DropoutResult dropout_apply(const Matrix& x, double p, RngStream& rng, bool active);

// ---------------------------------------------------------------------------
// Initialization.

// Uniform in +-sqrt(6/(fan_in+fan_out)).
void glorot_uniform(Matrix& w, RngStream& rng);
// Uniform in +-1/sqrt(hidden) on every recurrent array.
void recurrent_uniform(RecurrentParams& p, RngStream& rng);

}  // namespace cmco::nn
