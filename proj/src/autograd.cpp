#include "ldgm/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <numbers>
#include <string>

#include "ldgm/error.hpp"

namespace ldgm::nn {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

MapC view(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
Map view(Tensor& t) { return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())}; }

void require_shape(bool ok, const char* op) {
  if (!ok) throw Error(ErrorCode::Shape, std::string("shape mismatch in ") + op);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

}  // namespace

// ---------------------------------------------------------------------------

Parameter& ParameterStore::add(std::string name, Tensor init) {
  if (contains(name)) throw Error(ErrorCode::Shape, "duplicate parameter '" + name + "'");
  Tensor grad(init.rows(), init.cols());
  params_.push_back({std::move(name), std::move(init), std::move(grad)});
  return params_.back();
}

Parameter& ParameterStore::get(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw Error(ErrorCode::Shape, "unknown parameter '" + std::string(name) + "'");
}

const Parameter& ParameterStore::get(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw Error(ErrorCode::Shape, "unknown parameter '" + std::string(name) + "'");
}

bool ParameterStore::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

double ParameterStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_)
    for (double g : p.grad.values()) s += g * g;
  return std::sqrt(s);
}

Tensor random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t(rows, cols);
  for (auto& x : t.values()) x = stddev * rng.normal();
  return t;
}

// ---------------------------------------------------------------------------

Var Graph::push(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  value.round_to(precision_);
  assert(value.all_finite() && "non-finite value produced by an op");
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (auto v : inputs) {
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant(Tensor value) { return push(std::move(value), {}, nullptr); }

Var Graph::param(Parameter& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Graph::value(Var v) const {
  const auto& n = node(v);
  return n.external ? *n.external : n.value;
}

Var Graph::custom(std::vector<Var> inputs, Tensor value, BackwardFn backward) {
  return push(std::move(value), std::move(inputs), std::move(backward));
}

Var Graph::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_shape(A.cols() == B.rows(), "matmul");
  Tensor out(A.rows(), B.cols());
  view(out).noalias() = view(A) * view(B);
  return push(std::move(out), {a, b}, [this, a, b](const Tensor& g, std::span<Tensor* const> grads) {
    if (grads[0]) view(*grads[0]).noalias() += view(g) * view(value(b)).transpose();
    if (grads[1]) view(*grads[1]).noalias() += view(value(a)).transpose() * view(g);
  });
}

Var Graph::add(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_shape(A.same_shape(B), "add");
  Tensor out = A;
  view(out) += view(B);
  return push(std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> grads) {
    for (auto* gi : grads)
      if (gi) view(*gi) += view(g);
  });
}

Var Graph::add_row(Var a, Var row) {
  const auto& A = value(a);
  const auto& R = value(row);
  require_shape(R.rows() == 1 && R.cols() == A.cols(), "add_row");
  Tensor out = A;
  view(out).rowwise() += view(R).row(0);
  return push(std::move(out), {a, row}, [](const Tensor& g, std::span<Tensor* const> grads) {
    if (grads[0]) view(*grads[0]) += view(g);
    if (grads[1]) view(*grads[1]).row(0) += view(g).colwise().sum();
  });
}

Var Graph::mul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_shape(A.same_shape(B), "mul");
  Tensor out = A;
  view(out).array() *= view(B).array();
  return push(std::move(out), {a, b}, [this, a, b](const Tensor& g, std::span<Tensor* const> grads) {
    if (grads[0]) view(*grads[0]).array() += view(g).array() * view(value(b)).array();
    if (grads[1]) view(*grads[1]).array() += view(g).array() * view(value(a)).array();
  });
}

Var Graph::scale(Var a, double s) {
  Tensor out = value(a);
  view(out) *= s;
  return push(std::move(out), {a}, [s](const Tensor& g, std::span<Tensor* const> grads) {
    if (grads[0]) view(*grads[0]) += s * view(g);
  });
}

Var Graph::gelu(Var a) {
  const auto& A = value(a);
  Tensor out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) {
    const double x = A[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
  }
  return push(std::move(out), {a}, [this, a](const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    const auto& X = value(a);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double x = X[i];
      const double u = kGeluC * (x + 0.044715 * x * x * x);
      const double th = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
      (*grads[0])[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
    }
  });
}

Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
  const auto& X = value(x);
  const auto& G = value(gain);
  const auto& B = value(bias);
  require_shape(G.rows() == 1 && G.cols() == X.cols() && B.same_shape(G), "layer_norm");
  const std::size_t m = X.rows();
  const std::size_t n = X.cols();
  Tensor normalized(m, n);
  std::vector<double> inv_std(m);
  Tensor out(m, n);
  for (std::size_t r = 0; r < m; ++r) {
    const auto row = X.row(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      normalized(r, c) = (row[c] - mu) * inv_std[r];
      out(r, c) = normalized(r, c) * G[c] + B[c];
    }
  }
  return push(std::move(out), {x, gain, bias},
              [this, gain, normalized = std::move(normalized), inv_std = std::move(inv_std)](
                  const Tensor& g, std::span<Tensor* const> grads) {
                const auto& G = value(gain);
                const std::size_t m = g.rows();
                const std::size_t n = g.cols();
                std::vector<double> dxhat(n);
                for (std::size_t r = 0; r < m; ++r) {
                  double mean_d = 0.0;
                  double mean_dx = 0.0;
                  for (std::size_t c = 0; c < n; ++c) {
                    dxhat[c] = g(r, c) * G[c];
                    mean_d += dxhat[c];
                    mean_dx += dxhat[c] * normalized(r, c);
                    if (grads[1]) (*grads[1])[c] += g(r, c) * normalized(r, c);
                    if (grads[2]) (*grads[2])[c] += g(r, c);
                  }
                  if (!grads[0]) continue;
                  mean_d /= static_cast<double>(n);
                  mean_dx /= static_cast<double>(n);
                  for (std::size_t c = 0; c < n; ++c)
                    (*grads[0])(r, c) += inv_std[r] * (dxhat[c] - mean_d - normalized(r, c) * mean_dx);
                }
              });
}

Var Graph::softmax_rows(Var a) {
  const auto& A = value(a);
  Tensor out(A.rows(), A.cols());
  for (std::size_t r = 0; r < A.rows(); ++r) {
    const auto row = A.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t c = 0; c < A.cols(); ++c) s += out(r, c) = std::exp(row[c] - mx);
    for (std::size_t c = 0; c < A.cols(); ++c) out(r, c) /= s;
  }
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), {a}, [this, self](const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    const auto& S = value(self);
    for (std::size_t r = 0; r < S.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < S.cols(); ++c) dot += g(r, c) * S(r, c);
      for (std::size_t c = 0; c < S.cols(); ++c) (*grads[0])(r, c) += S(r, c) * (g(r, c) - dot);
    }
  });
}

Var Graph::log_softmax_rows(Var a) {
  const auto& A = value(a);
  Tensor out(A.rows(), A.cols());
  for (std::size_t r = 0; r < A.rows(); ++r) {
    const auto row = A.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < A.cols(); ++c) out(r, c) = row[c] - lse;
  }
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), {a}, [this, self](const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    const auto& L = value(self);
    for (std::size_t r = 0; r < L.rows(); ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < L.cols(); ++c) total += g(r, c);
      for (std::size_t c = 0; c < L.cols(); ++c) (*grads[0])(r, c) += g(r, c) - std::exp(L(r, c)) * total;
    }
  });
}

Var Graph::gather_rows(Var table, std::vector<int> index) {
  const auto& T = value(table);
  Tensor out(index.size(), T.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const int r = index[i];
    if (r < 0 || static_cast<std::size_t>(r) >= T.rows()) throw Error(ErrorCode::Shape, "gather_rows index out of range");
    std::copy_n(T.row(static_cast<std::size_t>(r)).begin(), T.cols(), out.row(i).begin());
  }
  return push(std::move(out), {table}, [index = std::move(index)](const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t i = 0; i < index.size(); ++i) {
      auto dst = grads[0]->row(static_cast<std::size_t>(index[i]));
      const auto src = g.row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

Var Graph::sum(Var a) {
  double s = 0.0;
  for (double v : value(a).values()) s += v;
  return push(Tensor(1, 1, s), {a}, [](const Tensor& g, std::span<Tensor* const> grads) {
    if (grads[0]) view(*grads[0]).array() += g[0];
  });
}

Var Graph::mean(Var a) {
  const double n = static_cast<double>(value(a).size());
  return scale(sum(a), 1.0 / n);
}

Var Graph::mean_rows(Var a) {
  const auto& A = value(a);
  Tensor out(1, A.cols());
  view(out).row(0) = view(A).colwise().mean();
  const double inv = 1.0 / static_cast<double>(A.rows());
  return push(std::move(out), {a}, [inv](const Tensor& g, std::span<Tensor* const> grads) {
    if (grads[0]) view(*grads[0]).rowwise() += inv * view(g).row(0);
  });
}

Var Graph::nll(Var log_probs, std::vector<int> targets) {
  const auto& L = value(log_probs);
  require_shape(targets.size() == L.rows() && !targets.empty(), "nll");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) s -= L(i, static_cast<std::size_t>(targets[i]));
  const double inv = 1.0 / static_cast<double>(targets.size());
  return push(Tensor(1, 1, s * inv), {log_probs},
              [targets = std::move(targets), inv](const Tensor& g, std::span<Tensor* const> grads) {
                if (!grads[0]) return;
                for (std::size_t i = 0; i < targets.size(); ++i)
                  (*grads[0])(i, static_cast<std::size_t>(targets[i])) -= g[0] * inv;
              });
}

Var Graph::kl_divergence(Var log_probs, Tensor target) {
  const auto& L = value(log_probs);
  require_shape(L.same_shape(target), "kl_divergence");
  double s = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i)
    if (target[i] > 0.0) s += target[i] * (std::log(target[i]) - L[i]);
  return push(Tensor(1, 1, s), {log_probs}, [target = std::move(target)](const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t i = 0; i < target.size(); ++i) (*grads[0])[i] -= g[0] * target[i];
  });
}

void Graph::backward(Var loss) {
  const auto& L = value(loss);
  if (L.rows() != 1 || L.cols() != 1) throw Error(ErrorCode::Shape, "backward requires a scalar loss");
  if (!grad_enabled_) throw Error(ErrorCode::Shape, "backward on a graph built without gradients");
  auto& root = nodes_[static_cast<std::size_t>(loss.id)];
  if (!root.requires_grad) return;
  root.grad = Tensor(1, 1, 1.0);

  std::vector<Tensor*> input_grads;
  for (int id = loss.id; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param) {
      view(n.param->grad) += view(n.grad);
      continue;
    }
    if (!n.backward) continue;
    input_grads.clear();
    for (int in : n.inputs) {
      auto& src = nodes_[static_cast<std::size_t>(in)];
      if (!src.requires_grad) {
        input_grads.push_back(nullptr);
        continue;
      }
      if (src.grad.size() == 0) {
        const auto& v = src.external ? *src.external : src.value;
        src.grad = Tensor(v.rows(), v.cols());
      }
      input_grads.push_back(&src.grad);
    }
    n.backward(n.grad, input_grads);
  }
}

}  // namespace ldgm::nn
