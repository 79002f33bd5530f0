#pragma once

// Dense row-major matrices and a small tape-based reverse-mode differentiator.
// Everything is float64 and accumulates sequentially, so results are
// bit-reproducible for a fixed sequence of operations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace abas {

using Rng = std::mt19937_64;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("Matrix: data length does not match shape");
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw std::invalid_argument("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: dimension mismatch " + shape_str(a) + " * " +
                                shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* br = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_tn: dimension mismatch " + shape_str(a) + "^T * " +
                                shape_str(b));
  }
  Matrix out(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* br = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += aki * br[j];
    }
  }
  return out;
}

// a * b^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: dimension mismatch " + shape_str(a) + " * " +
                                shape_str(b) + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ar = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* br = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += ar[k] * br[k];
      out(i, j) = s;
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

inline Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto in = m.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (double& v : o) v /= s;
  }
  return out;
}

inline Matrix log_softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto in = m.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (double v : in) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] - lse;
  }
  return out;
}

// Lowest index wins ties.
inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = m.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
inline double softplus(double z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

/// Records primitive operations in creation order; backward() replays them in
/// reverse, which is a valid topological order because every node's inputs
/// are created before it.
class Tape {
 public:
  Var leaf(Matrix value) { return push(std::move(value), true, {}); }
  Var constant(Matrix value) { return push(std::move(value), false, {}); }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b) {
    Matrix out = abas::matmul(value(a), value(b));
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
      if (t.needs(a)) t.accumulate(a, matmul_nt(g, t.value(b)));
      if (t.needs(b)) t.accumulate(b, matmul_tn(t.value(a), g));
    });
  }

  // x (n x m) + bias (1 x m) broadcast over rows.
  Var add_row(Var x, Var bias) {
    const Matrix& xv = value(x);
    const Matrix& bv = value(bias);
    if (bv.rows() != 1 || bv.cols() != xv.cols()) {
      throw std::invalid_argument("add_row: bias must be 1x" + std::to_string(xv.cols()));
    }
    Matrix out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
    return push(std::move(out), needs(x) || needs(bias), [x, bias](Tape& t, const Matrix& g) {
      if (t.needs(x)) t.accumulate(x, g);
      if (t.needs(bias)) {
        Matrix gb(1, g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
        t.accumulate(bias, gb);
      }
    });
  }

  Var add(Var a, Var b) {
    require_same(a, b, "add");
    Matrix out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += value(b).data()[i];
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
      if (t.needs(a)) t.accumulate(a, g);
      if (t.needs(b)) t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    require_same(a, b, "sub");
    Matrix out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= value(b).data()[i];
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
      if (t.needs(a)) t.accumulate(a, g);
      if (t.needs(b)) t.accumulate(b, scaled(g, -1.0));
    });
  }

  // Elementwise product.
  Var mul(Var a, Var b) {
    require_same(a, b, "mul");
    Matrix out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= value(b).data()[i];
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
      if (t.needs(a)) t.accumulate(a, hadamard(g, t.value(b)));
      if (t.needs(b)) t.accumulate(b, hadamard(g, t.value(a)));
    });
  }

  Var scale(Var x, double s) {
    return push(scaled(value(x), s), needs(x),
                [x, s](Tape& t, const Matrix& g) { t.accumulate(x, scaled(g, s)); });
  }

  /// Gradient reversal: identity forward, upstream gradient times -rho backward.
  Var grl(Var x, double rho) {
    if (!(rho >= 0.0)) throw std::invalid_argument("grl: rho must be >= 0");
    return push(value(x), needs(x),
                [x, rho](Tape& t, const Matrix& g) { t.accumulate(x, scaled(g, -rho)); });
  }

  Var relu(Var x) {
    Matrix out = value(x);
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), needs(x), [x](Tape& t, const Matrix& g) {
      Matrix gx = g;
      const Matrix& xv = t.value(x);
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (!(xv.data()[i] > 0.0)) gx.data()[i] = 0.0;
      t.accumulate(x, gx);
    });
  }

  Var sigmoid(Var x) {
    Matrix out = value(x);
    for (double& v : out.data()) v = abas::sigmoid(v);
    const std::size_t self = nodes_.size();
    return push(std::move(out), needs(x), [x, self](Tape& t, const Matrix& g) {
      const Matrix& y = t.nodes_[self].value;
      Matrix gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] *= y.data()[i] * (1 - y.data()[i]);
      t.accumulate(x, gx);
    });
  }

  Var log(Var x) {
    Matrix out = value(x);
    for (double& v : out.data()) v = std::log(v);
    return push(std::move(out), needs(x), [x](Tape& t, const Matrix& g) {
      Matrix gx = g;
      const Matrix& xv = t.value(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] /= xv.data()[i];
      t.accumulate(x, gx);
    });
  }

  Var softmax_rows(Var x) {
    Matrix out = abas::softmax_rows(value(x));
    const std::size_t self = nodes_.size();
    return push(std::move(out), needs(x), [x, self](Tape& t, const Matrix& g) {
      const Matrix& y = t.nodes_[self].value;
      Matrix gx(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) = y(i, j) * (g(i, j) - dot);
      }
      t.accumulate(x, gx);
    });
  }

  Var log_softmax_rows(Var x) {
    Matrix out = abas::log_softmax_rows(value(x));
    const std::size_t self = nodes_.size();
    return push(std::move(out), needs(x), [x, self](Tape& t, const Matrix& g) {
      const Matrix& y = t.nodes_[self].value;
      Matrix gx(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < g.cols(); ++j) s += g(i, j);
        for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) = g(i, j) - std::exp(y(i, j)) * s;
      }
      t.accumulate(x, gx);
    });
  }

  // Stack a on top of b.
  Var concat_rows(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.cols() != bv.cols()) throw std::invalid_argument("concat_rows: column mismatch");
    Matrix out(av.rows() + bv.rows(), av.cols());
    std::copy(av.data().begin(), av.data().end(), out.data().begin());
    std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + av.size());
    const std::size_t na = av.rows();
    return push(std::move(out), needs(a) || needs(b), [a, b, na](Tape& t, const Matrix& g) {
      if (t.needs(a)) t.accumulate(a, row_block(g, 0, na));
      if (t.needs(b)) t.accumulate(b, row_block(g, na, g.rows()));
    });
  }

  Var slice_rows(Var x, std::size_t begin, std::size_t end) {
    const Matrix& xv = value(x);
    if (begin > end || end > xv.rows()) throw std::invalid_argument("slice_rows: out of range");
    const std::size_t n = xv.rows();
    return push(row_block(xv, begin, end), needs(x), [x, begin, n](Tape& t, const Matrix& g) {
      Matrix gx(n, g.cols());
      std::copy(g.data().begin(), g.data().end(), gx.data().begin() + begin * g.cols());
      t.accumulate(x, gx);
    });
  }

  Var sum(Var x) {
    double s = 0.0;
    for (double v : value(x).data()) s += v;
    const std::size_t r = value(x).rows(), c = value(x).cols();
    return push(Matrix(1, 1, s), needs(x),
                [x, r, c](Tape& t, const Matrix& g) { t.accumulate(x, Matrix(r, c, g(0, 0))); });
  }

  Var mean(Var x) {
    const double n = static_cast<double>(value(x).size());
    if (n == 0) throw std::invalid_argument("mean: empty input");
    return scale(sum(x), 1.0 / n);
  }

  /// Registers a custom primitive. `backprop` receives the upstream gradient
  /// of the new node and must accumulate into its inputs via accumulate().
  Var custom(Matrix value, bool requires_grad, std::function<void(Tape&, const Matrix&)> backprop) {
    return push(std::move(value), requires_grad, std::move(backprop));
  }

  bool needs(Var v) const { return nodes_.at(v.id).requires_grad; }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    if (!g.same_shape(n.value)) {
      throw std::logic_error("Tape::accumulate: gradient shape " + shape_str(g) +
                             " does not match value " + shape_str(n.value));
    }
    if (n.grad.empty() && !n.value.empty()) {
      n.grad = g;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad.data()[i] += g.data()[i];
  }

  /// Reverse sweep from a 1x1 output. Each node is visited once.
  void backward(Var out) {
    const Matrix& ov = value(out);
    if (ov.rows() != 1 || ov.cols() != 1) {
      throw std::invalid_argument("backward: output must be scalar, got " + shape_str(ov));
    }
    for (auto& n : nodes_) n.grad = Matrix(n.value.rows(), n.value.cols());
    nodes_[out.id].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backprop) continue;
      n.backprop(*this, n.grad);
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(Tape&, const Matrix&)> backprop;
  };

  static Matrix scaled(const Matrix& m, double s) {
    Matrix out = m;
    for (double& v : out.data()) v *= s;
    return out;
  }
  static Matrix hadamard(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
    return out;
  }
  static Matrix row_block(const Matrix& m, std::size_t begin, std::size_t end) {
    Matrix out(end - begin, m.cols());
    std::copy(m.data().begin() + begin * m.cols(), m.data().begin() + end * m.cols(),
              out.data().begin());
    return out;
  }

  void require_same(Var a, Var b, const char* op) const {
    if (!value(a).same_shape(value(b))) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(value(a)) +
                                  " vs " + shape_str(value(b)));
    }
  }

  Var push(Matrix value, bool requires_grad, std::function<void(Tape&, const Matrix&)> backprop) {
    nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, std::move(backprop)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace abas
