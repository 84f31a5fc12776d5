#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "capgen/tensor.hpp"

namespace capgen {

using TokenId = std::int32_t;

namespace nn {

// Target value that excludes a row from softmax_xent (used for padding).
inline constexpr TokenId kIgnoreTarget = -1;

template <typename Real>
struct Parameter {
  std::string name;
  Tensor<Real> value;
  Tensor<Real> grad;
  // Adam first and second moments.
  Tensor<Real> m;
  Tensor<Real> v;

  Parameter() = default;
  Parameter(std::string param_name, Tensor<Real> initial)
      : name(std::move(param_name)),
        value(std::move(initial)),
        grad(value.shape()),
        m(value.shape()),
        v(value.shape()) {}

  void zero_grad() { grad.fill(Real(0)); }
};

template <typename Real>
struct Node {
  Tensor<Real> value;
  Tensor<Real> grad;  // empty until something flows into it
};

template <typename Real>
using Var = std::shared_ptr<Node<Real>>;

template <typename Real>
Var<Real> constant(Tensor<Real> value) {
  auto node = std::make_shared<Node<Real>>();
  node->value = std::move(value);
  return node;
}

// Reverse-mode tape. Ops append a backward closure as they run; backward()
// replays them in reverse recording order, which is a reverse topological
// order of the computation, so accumulation order is fixed run to run.
//
// Parameter gradients live on the tape (keyed by parameter address) so that
// forward passes only need const access to parameters; flush() adds them
// into Parameter::grad.
template <typename Real>
class Tape {
 public:
  void record(std::function<void()> backward_op) { ops_.push_back(std::move(backward_op)); }

  Tensor<Real>& grad(const Var<Real>& var) {
    if (var->grad.size() != var->value.size() || var->grad.shape() != var->value.shape()) {
      var->grad = Tensor<Real>(var->value.shape());
    }
    return var->grad;
  }

  Tensor<Real>& grad(const Parameter<Real>& param) {
    auto it = param_grads_.find(&param);
    if (it == param_grads_.end()) {
      it = param_grads_.emplace(&param, Tensor<Real>(param.value.shape())).first;
    }
    return it->second;
  }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded op once.
  void backward(const Var<Real>& loss);

  // Adds accumulated parameter gradients into each Parameter::grad and
  // drops them from the tape.
  void flush(std::span<Parameter<Real>* const> params);

  std::size_t size() const noexcept { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
  std::unordered_map<const Parameter<Real>*, Tensor<Real>> param_grads_;
};

// Keeps the tape out of template argument deduction so `nullptr` works.
template <typename Real>
using TapePtr = Tape<std::type_identity_t<Real>>*;

// ---------------------------------------------------------------------------
// Layers. Every op accepts a nullable tape; without one it is a pure forward
// computation and records nothing.

// y = x W + b for x of shape (B, in) or (in).
template <typename Real>
Var<Real> dense(const Var<Real>& x, const Parameter<Real>& weights, const Parameter<Real>& bias,
                TapePtr<Real> tape);

// Gathers rows of `table`; the gradient scatters back into touched rows only.
template <typename Real>
Var<Real> embedding(std::span<const TokenId> indices, const Parameter<Real>& table,
                    TapePtr<Real> tape);

// Column-wise concatenation of two (B, p) and (B, q) arrays.
template <typename Real>
Var<Real> concat(const Var<Real>& left, const Var<Real>& right, TapePtr<Real> tape);

template <typename Real>
Var<Real> sum(std::span<const Var<Real>> terms, TapePtr<Real> tape);

template <typename Real>
struct LstmState {
  Var<Real> hidden;
  Var<Real> cell;

  static LstmState zeros(std::size_t batch, std::size_t state_size) {
    return {constant(Tensor<Real>({batch, state_size})), constant(Tensor<Real>({batch, state_size}))};
  }
};

template <typename Real>
struct LstmCellParams {
  // Input weights (input_size x s) and recurrent weights (s x s) per gate.
  Parameter<Real> w_xi, w_si, w_xf, w_sf, w_xo, w_so, w_xc, w_sc;
  Parameter<Real> b_i, b_f, b_o, b_c;

  static LstmCellParams zeros(std::size_t input_size, std::size_t state_size,
                              const std::string& prefix = "lstm");

  std::size_t input_size() const { return w_xi.value.extent(0); }
  std::size_t state_size() const { return w_si.value.extent(0); }

  std::vector<Parameter<Real>*> parameters();
  std::vector<const Parameter<Real>*> parameters() const;
};

// One LSTM step over a batch:
//   i = sig(x Wxi + s Wsi + bi)   f = sig(x Wxf + s Wsf + bf)
//   o = sig(x Wxo + s Wso + bo)   g = tanh(x Wxc + s Wsc + bc)
//   c' = f * c + i * g            s' = o * tanh(c')
template <typename Real>
LstmState<Real> lstm_step(const Var<Real>& x, const LstmState<Real>& prev,
                          const LstmCellParams<Real>& params, TapePtr<Real> tape);

// Sum over rows of -log softmax(logits[r])[targets[r]]; rows whose target is
// kIgnoreTarget contribute nothing. Returns a one-element array.
template <typename Real>
Var<Real> softmax_xent(const Var<Real>& logits, std::span<const TokenId> targets, TapePtr<Real> tape);

// Single-row convenience form.
template <typename Real>
double softmax_xent(std::span<const Real> logits, TokenId target);

template <typename Real>
std::vector<double> log_softmax(std::span<const Real> logits);

// ---------------------------------------------------------------------------
// Initialization and optimization.

// Uniform Glorot draw in +-sqrt(6 / (fan_in + fan_out)) for a 2-D shape.
template <typename Real>
Tensor<Real> xavier_init(const Shape& shape, std::uint64_t seed);

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam update in place; gradients are cleared afterwards.
// `step` is 1-based.
template <typename Real>
void adam_step(std::span<Parameter<Real>* const> params, long long step, const AdamConfig& config = {});

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (64-bit only).

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  double max_rel_error() const;
  bool passed() const { return max_rel_error() < tolerance; }
};

// Builds the loss on a tape (or without one, for the perturbed evaluations).
using LossClosure = std::function<Var<double>(Tape<double>*)>;

// |a - n| / max(|a|, |n|, floor). The floor keeps gradients that are zero up to
// round-off from reporting spurious relative errors.
double relative_error(double analytic, double numeric, double floor = 1e-6);

GradCheckReport grad_check(const LossClosure& loss, std::span<Parameter<double>* const> params,
                           double tolerance, double step = 1e-5);

}  // namespace nn
}  // namespace capgen
