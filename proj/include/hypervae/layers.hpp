#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "hypervae/error.hpp"
#include "hypervae/tensor.hpp"

namespace hypervae {

enum class Activation { identity, relu, sigmoid };

inline double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

inline double activate(Activation act, double a) {
  switch (act) {
    case Activation::relu:
      return a > 0.0 ? a : 0.0;
    case Activation::sigmoid:
      return sigmoid(a);
    case Activation::identity:
      break;
  }
  return a;
}

/// d out / d pre, given both the pre-activation and the activation output.
inline double activation_slope(Activation act, double pre, double out) {
  switch (act) {
    case Activation::relu:
      return pre > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid:
      return out * (1.0 - out);
    case Activation::identity:
      break;
  }
  return 1.0;
}

namespace kernel {

// Raw row-major kernels over spans. Callers own shape checking.

/// y = W x + b, W is m x n.
inline void affine(std::span<const double> w, std::span<const double> b, std::span<const double> x,
                   std::span<double> y) {
  const std::size_t m = y.size();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = w.data() + i * n;
    double acc = b.empty() ? 0.0 : b[i];
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
}

/// Accumulates gw += gy x^T and gb += gy; writes gx = W^T gy when gx is non-empty.
inline void affine_backward(std::span<const double> w, std::span<const double> x,
                            std::span<const double> gy, std::span<double> gw, std::span<double> gb,
                            std::span<double> gx) {
  const std::size_t m = gy.size();
  const std::size_t n = x.size();
  if (!gx.empty()) std::fill(gx.begin(), gx.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double g = gy[i];
    if (!gb.empty()) gb[i] += g;
    if (g == 0.0) continue;
    if (!gw.empty()) {
      double* grow = gw.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) grow[j] += g * x[j];
    }
    if (!gx.empty()) {
      const double* row = w.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) gx[j] += g * row[j];
    }
  }
}

/// c (m x n) = a (m x k) * b (k x n), overwriting c.
inline void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c.begin(), c.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a[i * k + l];
      if (av == 0.0) continue;
      const double* brow = b.data() + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// c (m x n) += a (m x k) * b^T where b is n x k.
inline void matmul_add_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
      c[i * n + j] += acc;
    }
  }
}

/// c (m x n) += a^T * b where a is k x m and b is k x n.
inline void matmul_add_at(std::span<const double> a, std::span<const double> b, std::span<double> c,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t l = 0; l < k; ++l) {
    const double* arow = a.data() + l * m;
    const double* brow = b.data() + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void apply_activation(Activation act, std::span<double> values) {
  if (act == Activation::identity) return;
  for (double& v : values) v = activate(act, v);
}

/// Scales an upstream gradient in place by the activation slope.
inline void activation_backward(Activation act, std::span<const double> pre,
                                std::span<const double> out, std::span<double> grad) {
  if (act == Activation::identity) return;
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= activation_slope(act, pre[i], out[i]);
}

/// Cached intermediates of a matrix layer W = act(U H V + B).
struct MatrixLayerCache {
  std::vector<double> uh;   // m x q
  std::vector<double> hv;   // p x n
  std::vector<double> pre;  // m x n
};

/// out = act(U H V + B) with U m x p, H p x q, V q x n, B m x n.
inline void matrix_layer(std::span<const double> u, std::span<const double> h,
                         std::span<const double> v, std::span<const double> b, std::size_t m,
                         std::size_t p, std::size_t q, std::size_t n, Activation act,
                         std::span<double> out, MatrixLayerCache* cache) {
  std::vector<double> uh(m * q);
  matmul(u, h, uh, m, p, q);
  matmul(uh, v, out, m, q, n);
  for (std::size_t i = 0; i < m * n; ++i) out[i] += b[i];
  if (cache) {
    cache->hv.assign(p * n, 0.0);
    matmul(h, v, cache->hv, p, q, n);
    cache->pre.assign(out.begin(), out.end());
    cache->uh = std::move(uh);
  }
  apply_activation(act, out);
}

/// Backward of matrix_layer given d loss / d pre-activation (m x n).
/// Accumulates into gu, gv, gb and gh (any may be empty to skip).
inline void matrix_layer_backward(std::span<const double> u, std::span<const double> v,
                                  const MatrixLayerCache& cache, std::span<const double> gpre,
                                  std::size_t m, std::size_t p, std::size_t q, std::size_t n,
                                  std::span<double> gu, std::span<double> gv, std::span<double> gb,
                                  std::span<double> gh) {
  if (!gb.empty()) {
    for (std::size_t i = 0; i < m * n; ++i) gb[i] += gpre[i];
  }
  if (!gu.empty()) matmul_add_bt(gpre, cache.hv, gu, m, n, p);  // gpre (HV)^T
  if (!gv.empty()) matmul_add_at(cache.uh, gpre, gv, q, m, n);  // (UH)^T gpre
  if (!gh.empty()) {
    std::vector<double> gvt(m * q, 0.0);
    matmul_add_bt(gpre, v, gvt, m, n, q);  // gpre V^T
    matmul_add_at(u, gvt, gh, p, m, q);    // U^T (gpre V^T)
  }
}

}  // namespace kernel

inline Tensor dense_forward(const Tensor& input, const Tensor& weight, const Tensor& bias,
                            Activation act) {
  if (weight.rank() != 2 || bias.size() != weight.rows() || input.size() != weight.cols()) {
    throw ShapeError("dense_forward: weight " + Tensor::shape_string(weight.shape()) + ", bias " +
                     Tensor::shape_string(bias.shape()) + ", input " +
                     Tensor::shape_string(input.shape()) + " do not conform");
  }
  require_finite(input.span(), "dense_forward input");
  Tensor out({weight.rows()});
  kernel::affine(weight.span(), bias.span(), input.span(), out.span());
  kernel::apply_activation(act, out.span());
  return out;
}

inline Tensor matrix_layer_forward(const Tensor& h, const Tensor& u, const Tensor& v,
                                   const Tensor& b, Activation act) {
  if (h.rank() != 2 || u.rank() != 2 || v.rank() != 2 || b.rank() != 2 || u.cols() != h.rows() ||
      h.cols() != v.rows() || b.rows() != u.rows() || b.cols() != v.cols()) {
    throw ShapeError("matrix_layer_forward: U " + Tensor::shape_string(u.shape()) + ", H " +
                     Tensor::shape_string(h.shape()) + ", V " + Tensor::shape_string(v.shape()) +
                     ", B " + Tensor::shape_string(b.shape()) + " do not conform");
  }
  const std::size_t m = u.rows(), p = h.rows(), q = h.cols(), n = v.cols();
  Tensor out({m, n});
  kernel::matrix_layer(u.span(), h.span(), v.span(), b.span(), m, p, q, n, act, out.span(), nullptr);
  return out;
}

/// Parameters of W = act(U H V + B) for H p x q and W m x n: sizes of U, V and B.
constexpr std::size_t matrix_layer_param_count(std::size_t p, std::size_t q, std::size_t m,
                                               std::size_t n) {
  return m * p + q * n + m * n;
}

/// Parameters of a fully connected layer mapping `inputs` values to `outputs` values.
constexpr std::size_t dense_layer_param_count(std::size_t inputs, std::size_t outputs) {
  return inputs * outputs + outputs;
}

/// Gradients produced by Graph::backward, keyed "<layer>.<param>".
struct LayerGrads {
  std::map<std::string, Tensor> params;
  Tensor input;
};

/// A small sequential graph of dense, matrix, reshape and square nodes with
/// an exact reverse pass. Used for gradient checks of the layer primitives;
/// the model code runs the same kernels on flat parameter slices.
class Graph {
 public:
  void add_dense(std::string name, Tensor weight, Tensor bias, Activation act) {
    if (weight.rank() != 2 || bias.size() != weight.rows()) {
      throw ShapeError("graph: dense layer '" + name + "' has inconsistent weight/bias");
    }
    nodes_.push_back(Dense{std::move(name), std::move(weight), std::move(bias), act});
    recorded_ = false;
  }

  void add_matrix(std::string name, Tensor u, Tensor v, Tensor b, Activation act) {
    if (u.rank() != 2 || v.rank() != 2 || b.rank() != 2 || b.rows() != u.rows() ||
        b.cols() != v.cols()) {
      throw ShapeError("graph: matrix layer '" + name + "' has inconsistent U/V/B");
    }
    nodes_.push_back(Matrix{std::move(name), std::move(u), std::move(v), std::move(b), act});
    recorded_ = false;
  }

  void add_reshape(std::size_t rows, std::size_t cols) {
    nodes_.push_back(Reshape{rows, cols});
    recorded_ = false;
  }

  void add_square() {
    nodes_.push_back(Square{});
    recorded_ = false;
  }

  /// Mutable access to a parameter tensor, e.g. "hidden.weight".
  Tensor& parameter(const std::string& key) {
    for (auto& node : nodes_) {
      if (Tensor* t = std::visit([&](auto& n) { return find_param(n, key); }, node)) {
        recorded_ = false;
        return *t;
      }
    }
    throw StateError("graph: no parameter '" + key + "'");
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const auto& node : nodes_) {
      if (const auto* d = std::get_if<Dense>(&node)) {
        names.push_back(d->name + ".weight");
        names.push_back(d->name + ".bias");
      } else if (const auto* mx = std::get_if<Matrix>(&node)) {
        names.push_back(mx->name + ".U");
        names.push_back(mx->name + ".V");
        names.push_back(mx->name + ".B");
      }
    }
    return names;
  }

  Tensor forward(const Tensor& input) {
    require_finite(input.span(), "graph forward input");
    inputs_.clear();
    pre_.clear();
    caches_.clear();
    Tensor x = input;
    for (const auto& node : nodes_) {
      inputs_.push_back(x);
      pre_.emplace_back();
      caches_.emplace_back();
      if (const auto* d = std::get_if<Dense>(&node)) {
        if (x.size() != d->weight.cols()) throw ShapeError("graph: dense '" + d->name + "' input size");
        Tensor y({d->weight.rows()});
        kernel::affine(d->weight.span(), d->bias.span(), x.span(), y.span());
        pre_.back() = y;
        kernel::apply_activation(d->act, y.span());
        x = std::move(y);
      } else if (const auto* mx = std::get_if<Matrix>(&node)) {
        if (x.rank() != 2 || x.rows() != mx->u.cols() || x.cols() != mx->v.rows()) {
          throw ShapeError("graph: matrix '" + mx->name + "' input shape " +
                           Tensor::shape_string(x.shape()));
        }
        const std::size_t m = mx->u.rows(), p = x.rows(), q = x.cols(), n = mx->v.cols();
        Tensor y({m, n});
        kernel::matrix_layer(mx->u.span(), x.span(), mx->v.span(), mx->b.span(), m, p, q, n, mx->act,
                             y.span(), &caches_.back());
        x = std::move(y);
      } else if (const auto* r = std::get_if<Reshape>(&node)) {
        x = x.reshaped({r->rows, r->cols});
      } else {
        for (double& v : x.span()) v = v * v;
      }
    }
    output_ = x;
    recorded_ = true;
    return x;
  }

  LayerGrads backward(const Tensor& upstream) const {
    if (!recorded_) throw StateError("graph: backward called before forward");
    if (upstream.size() != output_.size()) throw ShapeError("graph: upstream gradient shape");
    LayerGrads grads;
    std::vector<double> g(upstream.values());
    for (std::size_t idx = nodes_.size(); idx-- > 0;) {
      const auto& node = nodes_[idx];
      const Tensor& x = inputs_[idx];
      if (const auto* d = std::get_if<Dense>(&node)) {
        std::vector<double> out(pre_[idx].values());
        kernel::apply_activation(d->act, out);
        kernel::activation_backward(d->act, pre_[idx].span(), out, g);
        Tensor gw(d->weight.shape()), gb(d->bias.shape());
        std::vector<double> gx(x.size());
        kernel::affine_backward(d->weight.span(), x.span(), g, gw.span(), gb.span(), gx);
        grads.params[d->name + ".weight"] = std::move(gw);
        grads.params[d->name + ".bias"] = std::move(gb);
        g = std::move(gx);
      } else if (const auto* mx = std::get_if<Matrix>(&node)) {
        const auto& cache = caches_[idx];
        const std::size_t m = mx->u.rows(), p = x.rows(), q = x.cols(), n = mx->v.cols();
        std::vector<double> out(cache.pre);
        kernel::apply_activation(mx->act, out);
        kernel::activation_backward(mx->act, cache.pre, out, g);
        Tensor gu(mx->u.shape()), gv(mx->v.shape()), gb(mx->b.shape());
        std::vector<double> gh(p * q, 0.0);
        kernel::matrix_layer_backward(mx->u.span(), mx->v.span(), cache, g, m, p, q, n, gu.span(),
                                      gv.span(), gb.span(), gh);
        grads.params[mx->name + ".U"] = std::move(gu);
        grads.params[mx->name + ".V"] = std::move(gv);
        grads.params[mx->name + ".B"] = std::move(gb);
        g = std::move(gh);
      } else if (std::holds_alternative<Square>(node)) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 2.0 * x[i];
      }
    }
    grads.input = Tensor(inputs_.empty() ? upstream.shape() : inputs_.front().shape(), std::move(g));
    return grads;
  }

 private:
  struct Dense {
    std::string name;
    Tensor weight, bias;
    Activation act;
  };
  struct Matrix {
    std::string name;
    Tensor u, v, b;
    Activation act;
  };
  struct Reshape {
    std::size_t rows, cols;
  };
  struct Square {};
  using Node = std::variant<Dense, Matrix, Reshape, Square>;

  static Tensor* find_param(Dense& d, const std::string& key) {
    if (key == d.name + ".weight") return &d.weight;
    if (key == d.name + ".bias") return &d.bias;
    return nullptr;
  }
  static Tensor* find_param(Matrix& m, const std::string& key) {
    if (key == m.name + ".U") return &m.u;
    if (key == m.name + ".V") return &m.v;
    if (key == m.name + ".B") return &m.b;
    return nullptr;
  }
  static Tensor* find_param(Reshape&, const std::string&) { return nullptr; }
  static Tensor* find_param(Square&, const std::string&) { return nullptr; }

  std::vector<Node> nodes_;
  std::vector<Tensor> inputs_;
  std::vector<Tensor> pre_;
  std::vector<kernel::MatrixLayerCache> caches_;
  Tensor output_;
  bool recorded_ = false;
};

}  // namespace hypervae
