#include "capgen/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "kernels.hpp"

namespace capgen {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

namespace nn {
namespace {

template <typename Real>
Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

void require(bool ok, const std::string& what, const Shape& a, const Shape& b) {
  if (!ok) throw DimensionError(what + ": " + shape_to_string(a) + " vs " + shape_to_string(b));
}

template <typename Real>
Var<Real> make_var(Tensor<Real> value) {
  auto node = std::make_shared<Node<Real>>();
  node->value = std::move(value);
  return node;
}

// Output shape of a row-wise op: keeps rank-1 inputs rank-1.
Shape row_shape(const Shape& like, std::size_t cols) {
  if (like.size() == 1) return {cols};
  return {like.at(0), cols};
}

}  // namespace

template <typename Real>
void Tape<Real>::backward(const Var<Real>& loss) {
  if (loss->value.size() != 1) {
    throw UsageError("backward needs a one-element loss, got shape " + shape_to_string(loss->value.shape()));
  }
  grad(loss)[0] += Real(1);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

template <typename Real>
void Tape<Real>::flush(std::span<Parameter<Real>* const> params) {
  for (Parameter<Real>* p : params) {
    auto it = param_grads_.find(p);
    if (it == param_grads_.end()) continue;
    auto& dst = p->grad;
    const auto& src = it->second;
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
  }
  param_grads_.clear();
}

template <typename Real>
Var<Real> dense(const Var<Real>& x, const Parameter<Real>& weights, const Parameter<Real>& bias,
                TapePtr<Real> tape) {
  const auto& w = weights.value;
  require(w.rank() == 2 && x->value.rank() >= 1 && x->value.rank() <= 2 && x->value.cols() == w.extent(0),
          "dense input/weight mismatch", x->value.shape(), w.shape());
  require(bias.value.size() == w.extent(1), "dense bias mismatch", bias.value.shape(), w.shape());

  const std::size_t rows = x->value.rows();
  const std::size_t in = w.extent(0);
  const std::size_t out = w.extent(1);
  Tensor<Real> y(row_shape(x->value.shape(), out));
  kernels::add_rows(bias.value.data(), y.data(), rows, out);
  kernels::gemm_acc(x->value.data(), w.data(), y.data(), rows, in, out);
  auto result = make_var(std::move(y));

  if (tape) {
    tape->record([tape, x, result, &weights, &bias, rows, in, out] {
      if (result->grad.empty()) return;
      const auto& dy = result->grad;
      kernels::gemm_acc_at(x->value.data(), dy.data(), tape->grad(weights).data(), rows, in, out);
      kernels::sum_rows(dy.data(), tape->grad(bias).data(), rows, out);
      kernels::gemm_acc_bt(dy.data(), weights.value.data(), tape->grad(x).data(), rows, out, in);
    });
  }
  return result;
}

template <typename Real>
Var<Real> embedding(std::span<const TokenId> indices, const Parameter<Real>& table, TapePtr<Real> tape) {
  const auto& t = table.value;
  if (t.rank() != 2) throw DimensionError("embedding table must be 2-D, got " + shape_to_string(t.shape()));
  const std::size_t v = t.extent(0);
  const std::size_t d = t.extent(1);
  for (TokenId idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= v) {
      throw VocabularyError("token index " + std::to_string(idx) + " outside vocabulary of size " +
                                std::to_string(v),
                            idx);
    }
  }
  Tensor<Real> out({indices.size(), d});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto src = t.row(static_cast<std::size_t>(indices[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  auto result = make_var(std::move(out));
  if (tape) {
    std::vector<TokenId> rows(indices.begin(), indices.end());
    tape->record([tape, result, &table, rows = std::move(rows), d] {
      if (result->grad.empty()) return;
      auto& g = tape->grad(table);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        Real* dst = g.data() + static_cast<std::size_t>(rows[r]) * d;
        const Real* src = result->grad.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return result;
}

template <typename Real>
Var<Real> concat(const Var<Real>& left, const Var<Real>& right, TapePtr<Real> tape) {
  const auto& a = left->value;
  const auto& b = right->value;
  require(a.rank() == b.rank() && a.rank() >= 1 && a.rank() <= 2 && a.rows() == b.rows(), "concat row mismatch",
          a.shape(), b.shape());
  const std::size_t rows = a.rows();
  const std::size_t p = a.cols();
  const std::size_t q = b.cols();
  Tensor<Real> out(row_shape(a.shape(), p + q));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(a.row(r).begin(), a.row(r).end(), out.row(r).begin());
    std::copy(b.row(r).begin(), b.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(p));
  }
  auto result = make_var(std::move(out));
  if (tape) {
    tape->record([tape, left, right, result, rows, p, q] {
      if (result->grad.empty()) return;
      auto& ga = tape->grad(left);
      auto& gb = tape->grad(right);
      const auto& g = result->grad;
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* src = g.data() + r * (p + q);
        for (std::size_t j = 0; j < p; ++j) ga.data()[r * p + j] += src[j];
        for (std::size_t j = 0; j < q; ++j) gb.data()[r * q + j] += src[p + j];
      }
    });
  }
  return result;
}

template <typename Real>
Var<Real> sum(std::span<const Var<Real>> terms, TapePtr<Real> tape) {
  Real total = 0;
  for (const auto& t : terms) {
    if (t->value.size() != 1) throw DimensionError("sum expects one-element terms, got " + shape_to_string(t->value.shape()));
    total += t->value[0];
  }
  auto result = make_var(Tensor<Real>({1}, {total}));
  if (tape) {
    std::vector<Var<Real>> inputs(terms.begin(), terms.end());
    tape->record([tape, result, inputs = std::move(inputs)] {
      if (result->grad.empty()) return;
      const Real g = result->grad[0];
      for (const auto& t : inputs) tape->grad(t)[0] += g;
    });
  }
  return result;
}

template <typename Real>
LstmCellParams<Real> LstmCellParams<Real>::zeros(std::size_t input_size, std::size_t state_size,
                                                 const std::string& prefix) {
  auto in_w = [&](const char* n) { return Parameter<Real>(prefix + "." + n, Tensor<Real>({input_size, state_size})); };
  auto rec_w = [&](const char* n) { return Parameter<Real>(prefix + "." + n, Tensor<Real>({state_size, state_size})); };
  auto b = [&](const char* n) { return Parameter<Real>(prefix + "." + n, Tensor<Real>({state_size})); };
  return {in_w("W_xi"), rec_w("W_si"), in_w("W_xf"), rec_w("W_sf"), in_w("W_xo"), rec_w("W_so"),
          in_w("W_xc"), rec_w("W_sc"), b("b_i"),     b("b_f"),      b("b_o"),     b("b_c")};
}

template <typename Real>
std::vector<Parameter<Real>*> LstmCellParams<Real>::parameters() {
  return {&w_xi, &w_si, &w_xf, &w_sf, &w_xo, &w_so, &w_xc, &w_sc, &b_i, &b_f, &b_o, &b_c};
}

template <typename Real>
std::vector<const Parameter<Real>*> LstmCellParams<Real>::parameters() const {
  return {&w_xi, &w_si, &w_xf, &w_sf, &w_xo, &w_so, &w_xc, &w_sc, &b_i, &b_f, &b_o, &b_c};
}

template <typename Real>
LstmState<Real> lstm_step(const Var<Real>& x, const LstmState<Real>& prev, const LstmCellParams<Real>& params,
                          TapePtr<Real> tape) {
  const std::size_t in = params.input_size();
  const std::size_t s = params.state_size();
  const auto& xv = x->value;
  const auto& hv = prev.hidden->value;
  const auto& cv = prev.cell->value;
  require(xv.rank() >= 1 && xv.rank() <= 2 && xv.cols() == in, "lstm input mismatch", xv.shape(),
          params.w_xi.value.shape());
  require(hv.shape() == cv.shape() && hv.cols() == s && hv.rows() == xv.rows(), "lstm state mismatch", hv.shape(),
          cv.shape());
  const std::size_t rows = xv.rows();

  auto gate = [&](const Parameter<Real>& wx, const Parameter<Real>& ws, const Parameter<Real>& b) {
    Tensor<Real> pre(hv.shape());
    kernels::add_rows(b.value.data(), pre.data(), rows, s);
    kernels::gemm_acc(xv.data(), wx.value.data(), pre.data(), rows, in, s);
    kernels::gemm_acc(hv.data(), ws.value.data(), pre.data(), rows, s, s);
    return pre;
  };
  Tensor<Real> gi = gate(params.w_xi, params.w_si, params.b_i);
  Tensor<Real> gf = gate(params.w_xf, params.w_sf, params.b_f);
  Tensor<Real> go = gate(params.w_xo, params.w_so, params.b_o);
  Tensor<Real> gg = gate(params.w_xc, params.w_sc, params.b_c);
  Tensor<Real> c_new(hv.shape());
  Tensor<Real> h_new(hv.shape());
  Tensor<Real> tanh_c(hv.shape());
  for (std::size_t k = 0; k < gi.size(); ++k) {
    gi[k] = sigmoid(gi[k]);
    gf[k] = sigmoid(gf[k]);
    go[k] = sigmoid(go[k]);
    gg[k] = std::tanh(gg[k]);
    c_new[k] = gf[k] * cv[k] + gi[k] * gg[k];
    tanh_c[k] = std::tanh(c_new[k]);
    h_new[k] = go[k] * tanh_c[k];
  }
  LstmState<Real> next{make_var(std::move(h_new)), make_var(std::move(c_new))};

  if (tape) {
    tape->record([tape, x, prev, next, &params, gi = std::move(gi), gf = std::move(gf), go = std::move(go),
                  gg = std::move(gg), tanh_c = std::move(tanh_c), rows, in, s] {
      const bool has_h = !next.hidden->grad.empty();
      const bool has_c = !next.cell->grad.empty();
      if (!has_h && !has_c) return;
      const std::size_t n = rows * s;
      const auto& cprev = prev.cell->value;
      // Pre-activation gradients for the four gates.
      std::vector<Real> d_i(n), d_f(n), d_o(n), d_g(n);
      auto& dc_prev = tape->grad(prev.cell);
      for (std::size_t k = 0; k < n; ++k) {
        const Real dh = has_h ? next.hidden->grad[k] : Real(0);
        Real dc = has_c ? next.cell->grad[k] : Real(0);
        dc += dh * go[k] * (Real(1) - tanh_c[k] * tanh_c[k]);
        const Real do_ = dh * tanh_c[k];
        const Real di = dc * gg[k];
        const Real df = dc * cprev[k];
        const Real dg = dc * gi[k];
        dc_prev[k] += dc * gf[k];
        d_i[k] = di * gi[k] * (Real(1) - gi[k]);
        d_f[k] = df * gf[k] * (Real(1) - gf[k]);
        d_o[k] = do_ * go[k] * (Real(1) - go[k]);
        d_g[k] = dg * (Real(1) - gg[k] * gg[k]);
      }
      auto& dx = tape->grad(x);
      auto& dh_prev = tape->grad(prev.hidden);
      const auto& xv = x->value;
      const auto& hv = prev.hidden->value;
      auto back = [&](const std::vector<Real>& d, const Parameter<Real>& wx, const Parameter<Real>& ws,
                      const Parameter<Real>& b) {
        kernels::gemm_acc_at(xv.data(), d.data(), tape->grad(wx).data(), rows, in, s);
        kernels::gemm_acc_at(hv.data(), d.data(), tape->grad(ws).data(), rows, s, s);
        kernels::sum_rows(d.data(), tape->grad(b).data(), rows, s);
        kernels::gemm_acc_bt(d.data(), wx.value.data(), dx.data(), rows, s, in);
        kernels::gemm_acc_bt(d.data(), ws.value.data(), dh_prev.data(), rows, s, s);
      };
      back(d_i, params.w_xi, params.w_si, params.b_i);
      back(d_f, params.w_xf, params.w_sf, params.b_f);
      back(d_o, params.w_xo, params.w_so, params.b_o);
      back(d_g, params.w_xc, params.w_sc, params.b_c);
    });
  }
  return next;
}

template <typename Real>
Var<Real> softmax_xent(const Var<Real>& logits, std::span<const TokenId> targets, TapePtr<Real> tape) {
  const auto& z = logits->value;
  if (z.rank() < 1 || z.rank() > 2 || z.rows() != targets.size()) {
    throw DimensionError("softmax_xent logits " + shape_to_string(z.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = z.rows();
  const std::size_t v = z.cols();
  for (TokenId t : targets) {
    if (t != kIgnoreTarget && (t < 0 || static_cast<std::size_t>(t) >= v)) {
      throw VocabularyError("target " + std::to_string(t) + " outside vocabulary of size " + std::to_string(v), t);
    }
  }
  // Softmax rows are kept for the backward pass.
  Tensor<Real> probs(z.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == kIgnoreTarget) continue;
    auto zr = z.row(r);
    const Real mx = *std::max_element(zr.begin(), zr.end());
    double denom = 0.0;
    for (Real value : zr) denom += std::exp(static_cast<double>(value - mx));
    const double lse = static_cast<double>(mx) + std::log(denom);
    total += lse - static_cast<double>(zr[static_cast<std::size_t>(targets[r])]);
    auto pr = probs.row(r);
    for (std::size_t j = 0; j < v; ++j) pr[j] = static_cast<Real>(std::exp(static_cast<double>(zr[j]) - lse));
  }
  auto result = make_var(Tensor<Real>({1}, {static_cast<Real>(total)}));
  if (tape) {
    std::vector<TokenId> tgt(targets.begin(), targets.end());
    tape->record([tape, logits, result, probs = std::move(probs), tgt = std::move(tgt), rows, v] {
      if (result->grad.empty()) return;
      const Real g = result->grad[0];
      auto& dz = tape->grad(logits);
      for (std::size_t r = 0; r < rows; ++r) {
        if (tgt[r] == kIgnoreTarget) continue;
        Real* dst = dz.data() + r * v;
        const Real* p = probs.data() + r * v;
        for (std::size_t j = 0; j < v; ++j) dst[j] += g * p[j];
        dst[static_cast<std::size_t>(tgt[r])] -= g;
      }
    });
  }
  return result;
}

template <typename Real>
double softmax_xent(std::span<const Real> logits, TokenId target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw VocabularyError("target " + std::to_string(target) + " outside vocabulary of size " +
                              std::to_string(logits.size()),
                          target);
  }
  return -log_softmax(logits)[static_cast<std::size_t>(target)];
}

template <typename Real>
std::vector<double> log_softmax(std::span<const Real> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  double denom = 0.0;
  for (Real z : logits) denom += std::exp(static_cast<double>(z) - mx);
  const double lse = mx + std::log(denom);
  for (std::size_t j = 0; j < logits.size(); ++j) out[j] = static_cast<double>(logits[j]) - lse;
  return out;
}

template <typename Real>
Tensor<Real> xavier_init(const Shape& shape, std::uint64_t seed) {
  if (shape.size() != 2) throw UsageError("xavier_init needs a 2-D shape, got " + shape_to_string(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
  std::mt19937_64 rng(seed);
  Tensor<Real> out(shape);
  for (auto& value : out.values()) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
    value = static_cast<Real>((2.0 * u - 1.0) * limit);
  }
  return out;
}

template <typename Real>
void adam_step(std::span<Parameter<Real>* const> params, long long step, const AdamConfig& config) {
  if (step < 1) throw UsageError("adam step count must be >= 1, got " + std::to_string(step));
  const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (Parameter<Real>* p : params) {
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double g = p->grad[k];
      const double m = config.beta1 * p->m[k] + (1.0 - config.beta1) * g;
      const double v = config.beta2 * p->v[k] + (1.0 - config.beta2) * g * g;
      p->m[k] = static_cast<Real>(m);
      p->v[k] = static_cast<Real>(v);
      const double m_hat = m / correction1;
      const double v_hat = v / correction2;
      p->value[k] = static_cast<Real>(p->value[k] - config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon));
    }
    p->zero_grad();
  }
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const LossClosure& loss, std::span<Parameter<double>* const> params, double tolerance,
                           double step) {
  auto evaluate = [&] {
    const double value = loss(nullptr)->value[0];
    if (!std::isfinite(value)) throw NumericError("grad_check: loss is not finite");
    return value;
  };

  for (auto* p : params) p->zero_grad();
  Tape<double> tape;
  auto root = loss(&tape);
  if (root->value.size() != 1 || !std::isfinite(root->value[0])) {
    throw NumericError("grad_check: loss is not a finite scalar");
  }
  tape.backward(root);
  tape.flush(params);

  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto* p : params) {
    GradCheckEntry entry;
    entry.name = p->name;
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double original = p->value[k];
      p->value[k] = original + step;
      const double plus = evaluate();
      p->value[k] = original - step;
      const double minus = evaluate();
      p->value[k] = original;
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = relative_error(p->grad[k], numeric);
      if (k == 0 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = k;
        entry.analytic = p->grad[k];
        entry.numeric = numeric;
      }
    }
    report.entries.push_back(std::move(entry));
  }
  for (auto* p : params) p->zero_grad();
  return report;
}

#define CAPGEN_INSTANTIATE_NN(Real)                                                                          \
  template class Tape<Real>;                                                                                 \
  template struct LstmCellParams<Real>;                                                                      \
  template Var<Real> dense(const Var<Real>&, const Parameter<Real>&, const Parameter<Real>&, Tape<Real>*);   \
  template Var<Real> embedding(std::span<const TokenId>, const Parameter<Real>&, Tape<Real>*);              \
  template Var<Real> concat(const Var<Real>&, const Var<Real>&, Tape<Real>*);                               \
  template Var<Real> sum(std::span<const Var<Real>>, Tape<Real>*);                                          \
  template LstmState<Real> lstm_step(const Var<Real>&, const LstmState<Real>&, const LstmCellParams<Real>&, \
                                     Tape<Real>*);                                                           \
  template Var<Real> softmax_xent(const Var<Real>&, std::span<const TokenId>, Tape<Real>*);                 \
  template double softmax_xent(std::span<const Real>, TokenId);                                              \
  template std::vector<double> log_softmax(std::span<const Real>);                                           \
  template Tensor<Real> xavier_init(const Shape&, std::uint64_t);                                            \
  template void adam_step(std::span<Parameter<Real>* const>, long long, const AdamConfig&);

CAPGEN_INSTANTIATE_NN(float)
CAPGEN_INSTANTIATE_NN(double)

#undef CAPGEN_INSTANTIATE_NN

}  // namespace nn
}  // namespace capgen
