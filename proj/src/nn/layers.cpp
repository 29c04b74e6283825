#include "cmco/nn/layers.hpp"

#include <cmath>

#include "cmco/error.hpp"

namespace cmco::nn {

namespace {

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

void apply_activation(Matrix& m, Activation a) {
  switch (a) {
    case Activation::none:
      return;
    case Activation::tanh:
      for (double& v : m.values()) v = std::tanh(v);
      return;
    case Activation::relu:
      for (double& v : m.values()) v = v > 0.0 ? v : 0.0;
      return;
  }
}

// Gradient through the activation expressed in terms of its output.
void activation_backward(const Matrix& output, Activation a, Matrix& grad) {
  switch (a) {
    case Activation::none:
      return;
    case Activation::tanh:
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= 1.0 - output[i] * output[i];
      return;
    case Activation::relu:
      for (std::size_t i = 0; i < grad.size(); ++i)
        if (output[i] <= 0.0) grad[i] = 0.0;
      return;
  }
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out = matmul(x, w);
  add_row_broadcast(out, b);
  return out;
}

void check_step_inputs(const RecurrentParams& p, const Matrix& x, const Matrix& h) {
  if (x.cols() != p.input_size()) {
    throw DimensionError("recurrent step: input has " + std::to_string(x.cols()) +
                         " features, cell expects " + std::to_string(p.input_size()));
  }
  if (h.cols() != p.hidden_size() || h.rows() != x.rows()) {
    throw DimensionError("recurrent step: hidden state " + h.shape_string() +
                         " does not match batch " + std::to_string(x.rows()) + " x " +
                         std::to_string(p.hidden_size()));
  }
}

// GRU step that optionally records gates [r|z|n] and the hidden-side
// candidate term h W_hn + b_hn.
Matrix gru_step_impl(const RecurrentParams& p, const Matrix& x, const Matrix& h,
                     Matrix* gates_out, Matrix* hn_out) {
  check_step_inputs(p, x, h);
  const std::size_t B = x.rows(), H = p.hidden_size();
  const Matrix gx = affine(x, p.w_ih, p.b_ih);
  const Matrix gh = affine(h, p.w_hh, p.b_hh);
  Matrix gates(B, 3 * H);
  Matrix hn(B, H);
  Matrix out(B, H);
  for (std::size_t b = 0; b < B; ++b) {
    const auto gxr = gx.row(b);
    const auto ghr = gh.row(b);
    auto g = gates.row(b);
    for (std::size_t j = 0; j < H; ++j) {
      const double r = sigmoid(gxr[j] + ghr[j]);
      const double z = sigmoid(gxr[H + j] + ghr[H + j]);
      const double hnj = ghr[2 * H + j];
      const double n = std::tanh(gxr[2 * H + j] + r * hnj);
      g[j] = r;
      g[H + j] = z;
      g[2 * H + j] = n;
      hn(b, j) = hnj;
      out(b, j) = (1.0 - z) * n + z * h(b, j);
    }
  }
  if (gates_out) *gates_out = std::move(gates);
  if (hn_out) *hn_out = std::move(hn);
  return out;
}

LstmState lstm_step_impl(const RecurrentParams& p, const Matrix& x, const LstmState& s,
                         Matrix* gates_out) {
  check_step_inputs(p, x, s.h);
  require_shape(s.c, s.h.rows(), s.h.cols(), "lstm cell state");
  const std::size_t B = x.rows(), H = p.hidden_size();
  Matrix a = affine(x, p.w_ih, p.b_ih);
  a += affine(s.h, p.w_hh, p.b_hh);
  LstmState next{Matrix(B, H), Matrix(B, H)};
  for (std::size_t b = 0; b < B; ++b) {
    auto g = a.row(b);
    for (std::size_t j = 0; j < H; ++j) {
      const double i = sigmoid(g[j]);
      const double f = sigmoid(g[H + j]);
      const double cand = std::tanh(g[2 * H + j]);
      const double o = sigmoid(g[3 * H + j]);
      g[j] = i;
      g[H + j] = f;
      g[2 * H + j] = cand;
      g[3 * H + j] = o;
      const double c = f * s.c(b, j) + i * cand;
      next.c(b, j) = c;
      next.h(b, j) = o * std::tanh(c);
    }
  }
  if (gates_out) *gates_out = std::move(a);
  return next;
}

}  // namespace

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  if (name == "none" || name == "linear") return Activation::none;
  throw ConfigError("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh:
      return "tanh";
    case Activation::relu:
      return "relu";
    case Activation::none:
      break;
  }
  return "none";
}

Matrix dense_forward(const Matrix& x, const Matrix& weight, const Matrix& bias,
                     Activation activation) {
  if (x.cols() != weight.rows()) {
    throw DimensionError("dense: input " + x.shape_string() + " vs weight " +
                         weight.shape_string());
  }
  require_shape(bias, 1, weight.cols(), "dense bias");
  Matrix y = affine(x, weight, bias);
  apply_activation(y, activation);
  return y;
}

Matrix dense_backward(const Matrix& input, const Matrix& output, const Matrix& weight,
                      Activation activation, const Matrix& d_output, Matrix& d_weight,
                      Matrix& d_bias) {
  require_shape(d_output, output.rows(), output.cols(), "dense d_output");
  Matrix grad = d_output;
  activation_backward(output, activation, grad);
  matmul_tn_accumulate(input, grad, d_weight);
  accumulate_column_sums(grad, d_bias);
  return matmul_nt(grad, weight);
}

CellKind parse_cell_kind(const std::string& name) {
  if (name == "gru") return CellKind::gru;
  if (name == "lstm") return CellKind::lstm;
  throw ConfigError("unknown recurrent cell '" + name + "'");
}

std::string to_string(CellKind k) { return k == CellKind::gru ? "gru" : "lstm"; }

std::size_t gate_count(CellKind k) { return k == CellKind::gru ? 3 : 4; }

RecurrentParams RecurrentParams::zeros(CellKind kind, std::size_t input_size,
                                       std::size_t hidden_size) {
  const std::size_t g = gate_count(kind) * hidden_size;
  RecurrentParams p;
  p.kind = kind;
  p.w_ih = Matrix(input_size, g);
  p.w_hh = Matrix(hidden_size, g);
  p.b_ih = Matrix(1, g);
  p.b_hh = Matrix(1, g);
  return p;
}

void RecurrentParams::validate() const {
  const std::size_t H = hidden_size();
  const std::size_t g = gate_count(kind) * H;
  require_shape(w_ih, w_ih.rows(), g, "recurrent w_ih");
  require_shape(w_hh, H, g, "recurrent w_hh");
  require_shape(b_ih, 1, g, "recurrent b_ih");
  require_shape(b_hh, 1, g, "recurrent b_hh");
}

std::size_t recurrent_parameter_count(CellKind kind, std::size_t input_size,
                                      std::size_t hidden_size) {
  const std::size_t H = hidden_size;
  return gate_count(kind) * (input_size * H + H * H + 2 * H);
}

Matrix gru_step(const RecurrentParams& params, const Matrix& x, const Matrix& h_prev) {
  if (params.kind != CellKind::gru) throw ConfigError("gru_step on a non-GRU cell");
  params.validate();
  return gru_step_impl(params, x, h_prev, nullptr, nullptr);
}

LstmState lstm_step(const RecurrentParams& params, const Matrix& x, const LstmState& state) {
  if (params.kind != CellKind::lstm) throw ConfigError("lstm_step on a non-LSTM cell");
  params.validate();
  return lstm_step_impl(params, x, state, nullptr);
}

std::vector<Matrix> recurrent_forward(const RecurrentParams& params,
                                      const std::vector<Matrix>& inputs,
                                      RecurrentTrace* trace) {
  params.validate();
  std::vector<Matrix> outputs;
  if (inputs.empty()) return outputs;
  const std::size_t B = inputs.front().rows(), H = params.hidden_size();
  outputs.reserve(inputs.size());

  if (trace) {
    *trace = RecurrentTrace{};
    trace->inputs = inputs;
    trace->hidden.reserve(inputs.size() + 1);
    trace->gates.reserve(inputs.size());
    trace->hidden.emplace_back(B, H);
  }

  if (params.kind == CellKind::gru) {
    Matrix h(B, H);
    if (trace) trace->hidden_n.reserve(inputs.size());
    for (const Matrix& x : inputs) {
      Matrix gates, hn;
      h = gru_step_impl(params, x, h, trace ? &gates : nullptr, trace ? &hn : nullptr);
      if (trace) {
        trace->gates.push_back(std::move(gates));
        trace->hidden_n.push_back(std::move(hn));
        trace->hidden.push_back(h);
      }
      outputs.push_back(h);
    }
  } else {
    LstmState s{Matrix(B, H), Matrix(B, H)};
    if (trace) {
      trace->cell.reserve(inputs.size() + 1);
      trace->cell.push_back(s.c);
    }
    for (const Matrix& x : inputs) {
      Matrix gates;
      s = lstm_step_impl(params, x, s, trace ? &gates : nullptr);
      if (trace) {
        trace->gates.push_back(std::move(gates));
        trace->hidden.push_back(s.h);
        trace->cell.push_back(s.c);
      }
      outputs.push_back(s.h);
    }
  }
  return outputs;
}

std::vector<Matrix> recurrent_backward(const RecurrentParams& params,
                                       const RecurrentTrace& trace,
                                       const std::vector<Matrix>& d_hidden,
                                       RecurrentParams& grads) {
  const std::size_t T = trace.inputs.size();
  if (d_hidden.size() != T) {
    throw DimensionError("recurrent backward: " + std::to_string(d_hidden.size()) +
                         " output gradients for " + std::to_string(T) + " steps");
  }
  std::vector<Matrix> d_inputs(T);
  if (T == 0) return d_inputs;
  const std::size_t B = trace.inputs.front().rows(), H = params.hidden_size();
  const std::size_t G = gate_count(params.kind);
  const Matrix w_ih_t = transpose(params.w_ih);
  const Matrix w_hh_t = transpose(params.w_hh);

  Matrix dh(B, H);       // gradient flowing into h_t from later steps
  Matrix dc_next(B, H);  // LSTM cell-state carry
  Matrix dgx(B, G * H);
  Matrix dgh(B, G * H);

  for (std::size_t step = T; step-- > 0;) {
    if (!d_hidden[step].empty()) dh += d_hidden[step];
    const Matrix& h_prev = trace.hidden[step];
    const Matrix& gates = trace.gates[step];

    Matrix dh_prev(B, H);
    if (params.kind == CellKind::gru) {
      const Matrix& hn = trace.hidden_n[step];
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < H; ++j) {
          const double r = gates(b, j), z = gates(b, H + j), n = gates(b, 2 * H + j);
          const double g = dh(b, j);
          const double dn = g * (1.0 - z);
          const double dz = g * (h_prev(b, j) - n);
          dh_prev(b, j) = g * z;
          const double da_n = dn * (1.0 - n * n);
          const double dr = da_n * hn(b, j);
          const double da_z = dz * z * (1.0 - z);
          const double da_r = dr * r * (1.0 - r);
          dgx(b, j) = da_r;
          dgx(b, H + j) = da_z;
          dgx(b, 2 * H + j) = da_n;
          dgh(b, j) = da_r;
          dgh(b, H + j) = da_z;
          dgh(b, 2 * H + j) = da_n * r;
        }
      }
    } else {
      const Matrix& c_prev = trace.cell[step];
      const Matrix& c_cur = trace.cell[step + 1];
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < H; ++j) {
          const double i = gates(b, j), f = gates(b, H + j), cand = gates(b, 2 * H + j),
                       o = gates(b, 3 * H + j);
          const double tc = std::tanh(c_cur(b, j));
          const double g = dh(b, j);
          const double d_o = g * tc;
          const double dc = dc_next(b, j) + g * o * (1.0 - tc * tc);
          const double di = dc * cand;
          const double dcand = dc * i;
          const double df = dc * c_prev(b, j);
          dc_next(b, j) = dc * f;
          dgx(b, j) = di * i * (1.0 - i);
          dgx(b, H + j) = df * f * (1.0 - f);
          dgx(b, 2 * H + j) = dcand * (1.0 - cand * cand);
          dgx(b, 3 * H + j) = d_o * o * (1.0 - o);
        }
      }
      dgh = dgx;
    }

    matmul_tn_accumulate(trace.inputs[step], dgx, grads.w_ih);
    accumulate_column_sums(dgx, grads.b_ih);
    d_inputs[step] = matmul(dgx, w_ih_t);

    matmul_tn_accumulate(h_prev, dgh, grads.w_hh);
    accumulate_column_sums(dgh, grads.b_hh);
    matmul_accumulate(dgh, w_hh_t, dh_prev);
    dh = std::move(dh_prev);
  }
  return d_inputs;
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& shift, double eps) {
  require_shape(gain, 1, x.cols(), "layer_norm gain");
  require_shape(shift, 1, x.cols(), "layer_norm shift");
  const std::size_t H = x.cols();
  Matrix out(x.rows(), H);
  for (std::size_t b = 0; b < x.rows(); ++b) {
    const auto r = x.row(b);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(H);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(H);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < H; ++j) out(b, j) = gain[j] * (r[j] - mean) * inv + shift[j];
  }
  return out;
}

Matrix layer_norm_backward(const Matrix& x, const Matrix& gain, double eps,
                           const Matrix& d_output, Matrix& d_gain, Matrix& d_shift) {
  require_shape(d_output, x.rows(), x.cols(), "layer_norm d_output");
  const std::size_t H = x.cols();
  const double inv_h = 1.0 / static_cast<double>(H);
  Matrix dx(x.rows(), H);
  std::vector<double> xhat(H), dxhat(H);
  for (std::size_t b = 0; b < x.rows(); ++b) {
    const auto r = x.row(b);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean *= inv_h;
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var *= inv_h;
    const double inv = 1.0 / std::sqrt(var + eps);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < H; ++j) {
      xhat[j] = (r[j] - mean) * inv;
      const double dy = d_output(b, j);
      d_gain[j] += dy * xhat[j];
      d_shift[j] += dy;
      dxhat[j] = dy * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
    }
    mean_dxhat *= inv_h;
    mean_dxhat_xhat *= inv_h;
    for (std::size_t j = 0; j < H; ++j)
      dx(b, j) = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
  }
  return dx;
}

void validate_dropout_rate(double p) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(p));
  }
}

Matrix draw_keep_mask(std::size_t rows, std::size_t cols, double p, RngStream& rng) {
  validate_dropout_rate(p);
  Matrix keep(rows, cols, 1.0);
  if (p == 0.0) return keep;
  for (double& v : keep.values()) v = rng.uniform() < p ? 0.0 : 1.0;
  return keep;
}

Matrix apply_keep_mask(const Matrix& x, const Matrix& keep, double p) {
  if (!x.same_shape(keep)) {
    throw DimensionError("dropout mask " + keep.shape_string() + " vs input " +
                         x.shape_string());
  }
  const double scale = 1.0 / (1.0 - p);
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = keep[i] != 0.0 ? x[i] * scale : 0.0;
  return out;
}

DropoutResult dropout_apply(const Matrix& x, double p, RngStream& rng, bool active) {
  validate_dropout_rate(p);
  if (!active) return {x, Matrix(x.rows(), x.cols(), 1.0)};
  Matrix keep = draw_keep_mask(x.rows(), x.cols(), p, rng);
  Matrix out = apply_keep_mask(x, keep, p);
  return {std::move(out), std::move(keep)};
}

void glorot_uniform(Matrix& w, RngStream& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  for (double& v : w.values()) v = rng.uniform(-limit, limit);
}

void recurrent_uniform(RecurrentParams& p, RngStream& rng) {
  const double limit = 1.0 / std::sqrt(static_cast<double>(p.hidden_size()));
  for (Matrix* m : {&p.w_ih, &p.w_hh, &p.b_ih, &p.b_hh})
    for (double& v : m->values()) v = rng.uniform(-limit, limit);
}

}  // namespace cmco::nn
