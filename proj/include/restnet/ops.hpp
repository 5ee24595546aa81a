#pragma once

// Differentiable operations over Tensor<Scalar>.
//
// Binary elementwise operations broadcast under trailing-dimension rules:
// shapes are right-aligned and each pair of dimensions must be equal or one
// of them must be 1. Anything else raises ShapeError.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "restnet/errors.hpp"
#include "restnet/tensor.hpp"

namespace restnet {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// Maps each flat index of `out` to the flat index of the broadcast input.
// Empty result means the identity map.
inline std::vector<Index> broadcast_map(const Shape& out, const Shape& in) {
  if (in == out) return {};
  const Index n_out = numel(out);
  const Index n_in = numel(in);
  std::vector<Index> map(static_cast<std::size_t>(n_out));
  if (n_in == 1) {
    std::fill(map.begin(), map.end(), 0);
    return map;
  }
  const std::size_t rank = out.size();
  Shape padded(rank, 1);
  std::copy(in.begin(), in.end(), padded.begin() + static_cast<std::ptrdiff_t>(rank - in.size()));
  // Leading broadcast over an otherwise identical suffix: index modulo.
  std::size_t lead = 0;
  while (lead < rank && padded[lead] == 1) ++lead;
  if (std::equal(padded.begin() + static_cast<std::ptrdiff_t>(lead), padded.end(),
                 out.begin() + static_cast<std::ptrdiff_t>(lead))) {
    for (Index i = 0; i < n_out; ++i) map[static_cast<std::size_t>(i)] = i % n_in;
    return map;
  }
  std::vector<Index> in_stride(rank, 0);
  Index stride = 1;
  for (std::size_t d = rank; d-- > 0;) {
    in_stride[d] = padded[d] == 1 ? 0 : stride;
    stride *= padded[d];
  }
  std::vector<Index> counter(rank, 0);
  Index pos = 0;
  for (Index i = 0; i < n_out; ++i) {
    map[static_cast<std::size_t>(i)] = pos;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      pos += in_stride[d];
      if (counter[d] < out[d]) break;
      pos -= in_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return map;
}

template <typename Scalar, typename Fwd, typename GradA, typename GradB>
Tensor<Scalar> binary(const char* name, const Tensor<Scalar>& a, const Tensor<Scalar>& b, Fwd fwd, GradA grad_a,
                      GradB grad_b) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const Index n = numel(out_shape);
  auto map_a = std::make_shared<std::vector<Index>>(broadcast_map(out_shape, a.shape()));
  auto map_b = std::make_shared<std::vector<Index>>(broadcast_map(out_shape, b.shape()));
  const auto& da = a.data();
  const auto& db = b.data();
  Buffer<Scalar> out(n);
  if (map_a->empty() && map_b->empty()) {
    for (Index i = 0; i < n; ++i) out[i] = fwd(da[i], db[i]);
  } else {
    for (Index i = 0; i < n; ++i) {
      const Index ia = map_a->empty() ? i : (*map_a)[static_cast<std::size_t>(i)];
      const Index ib = map_b->empty() ? i : (*map_b)[static_cast<std::size_t>(i)];
      out[i] = fwd(da[ia], db[ib]);
    }
  }
  return Tensor<Scalar>::record(
      name, std::move(out_shape), std::move(out), {a, b},
      [a, b, map_a, map_b, grad_a, grad_b](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
        const auto& da = a.data();
        const auto& db = b.data();
        for (Index i = 0; i < g.size(); ++i) {
          const Index ia = map_a->empty() ? i : (*map_a)[static_cast<std::size_t>(i)];
          const Index ib = map_b->empty() ? i : (*map_b)[static_cast<std::size_t>(i)];
          if (gin[0]) (*gin[0])[ia] += grad_a(g[i], da[ia], db[ib]);
          if (gin[1]) (*gin[1])[ib] += grad_b(g[i], da[ia], db[ib]);
        }
      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary<Scalar>(
      "add", a, b, [](Scalar x, Scalar y) { return x + y; }, [](Scalar g, Scalar, Scalar) { return g; },
      [](Scalar g, Scalar, Scalar) { return g; });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary<Scalar>(
      "sub", a, b, [](Scalar x, Scalar y) { return x - y; }, [](Scalar g, Scalar, Scalar) { return g; },
      [](Scalar g, Scalar, Scalar) { return -g; });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary<Scalar>(
      "mul", a, b, [](Scalar x, Scalar y) { return x * y; }, [](Scalar g, Scalar, Scalar y) { return g * y; },
      [](Scalar g, Scalar x, Scalar) { return g * x; });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary<Scalar>(
      "div", a, b, [](Scalar x, Scalar y) { return x / y; }, [](Scalar g, Scalar, Scalar y) { return g / y; },
      [](Scalar g, Scalar x, Scalar y) { return -g * x / (y * y); });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return div(a, b); }

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, Scalar s) { return add(a, Tensor<Scalar>::scalar(s)); }
template <typename Scalar>
Tensor<Scalar> operator-(Scalar s, const Tensor<Scalar>& a) { return sub(Tensor<Scalar>::scalar(s), a); }
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) { return mul(Tensor<Scalar>::scalar(s), a); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar s) { return mul(a, Tensor<Scalar>::scalar(s)); }
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, Scalar s) { return div(a, Tensor<Scalar>::scalar(s)); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) { return mul(Tensor<Scalar>::scalar(Scalar(-1)), a); }

// Fingerprint of every branch taken by the piecewise operations (relu,
// clamp, max_last) on the current thread while a BranchTrace is active. Two
// evaluations with equal fingerprints lie on the same smooth piece.
class BranchTrace {
 public:
  BranchTrace() : previous_(active()) { active() = this; }
  ~BranchTrace() { active() = previous_; }
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t fingerprint() const { return hash_; }

  static void record(std::uint64_t branch) {
    if (BranchTrace* t = active()) t->hash_ = (t->hash_ ^ branch) * 0x100000001b3ULL;
  }
  static bool enabled() { return active() != nullptr; }

 private:
  static BranchTrace*& active() {
    thread_local BranchTrace* current = nullptr;
    return current;
  }

  BranchTrace* previous_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

namespace detail {

// Unary op whose derivative is expressed through input x and output y.
template <typename Scalar, typename Fwd, typename Deriv>
Tensor<Scalar> unary(const char* name, const Tensor<Scalar>& x, Fwd fwd, Deriv deriv) {
  Buffer<Scalar> y = x.data().unaryExpr(fwd);
  auto saved = std::make_shared<Buffer<Scalar>>(y);
  return Tensor<Scalar>::record(name, x.shape(), std::move(y), {x},
                                [x, saved, deriv](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
                                  const auto& xd = x.data();
                                  for (Index i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * deriv(xd[i], (*saved)[i]);
                                });
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  if (BranchTrace::enabled()) {
    for (Index i = 0; i < x.size(); ++i) BranchTrace::record(x.data()[i] > 0);
  }
  return detail::unary<Scalar>(
      "relu", x, [](Scalar v) { return v > 0 ? v : Scalar(0); },
      [](Scalar v, Scalar) { return v > 0 ? Scalar(1) : Scalar(0); });
}

// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <typename Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& x, Scalar lo, Scalar hi) {
  if (BranchTrace::enabled()) {
    for (Index i = 0; i < x.size(); ++i) {
      const Scalar v = x.data()[i];
      BranchTrace::record(v <= lo ? 0 : (v >= hi ? 2 : 1));
    }
  }
  return detail::unary<Scalar>(
      "clamp", x, [lo, hi](Scalar v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](Scalar v, Scalar) { return v > lo && v < hi ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return detail::unary<Scalar>(
      "sigmoid", x,
      [](Scalar v) {
        if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (Scalar(1) + e);
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  return detail::unary<Scalar>(
      "exp", x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  return detail::unary<Scalar>(
      "log", x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return Scalar(1) / v; });
}

template <typename Scalar>
Tensor<Scalar> sqrt(const Tensor<Scalar>& x) {
  return detail::unary<Scalar>(
      "sqrt", x, [](Scalar v) { return std::sqrt(v); }, [](Scalar, Scalar y) { return Scalar(0.5) / y; });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " into " + to_string(shape));
  }
  return Tensor<Scalar>::record("reshape", std::move(shape), x.data(), {x},
                                [](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) { *gin[0] += g; });
}

// 2D transpose.
template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects a matrix, got " + to_string(x.shape()));
  const Index rows = x.dim(0), cols = x.dim(1);
  using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Buffer<Scalar> out(x.size());
  Eigen::Map<RowMajor>(out.data(), cols, rows) = Eigen::Map<const RowMajor>(x.data().data(), rows, cols).transpose();
  return Tensor<Scalar>::record("transpose", {cols, rows}, std::move(out), {x},
                                [rows, cols](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
                                  Eigen::Map<RowMajor>(gin[0]->data(), rows, cols) +=
                                      Eigen::Map<const RowMajor>(g.data(), cols, rows).transpose();
                                });
}

// Concatenation along the first axis; trailing dimensions must agree.
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat of an empty list");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  Index lead = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    if (p.rank() == 0 || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1, p.shape().end())) {
      throw ShapeError("concat: incompatible shapes " + to_string(parts[0].shape()) + " and " + to_string(p.shape()));
    }
    offsets.push_back(lead * numel(tail));
    lead += p.dim(0);
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Buffer<Scalar> out(numel(shape));
  for (std::size_t k = 0; k < parts.size(); ++k) out.segment(offsets[k], parts[k].size()) = parts[k].data();
  std::vector<Index> sizes;
  for (const auto& p : parts) sizes.push_back(p.size());
  return Tensor<Scalar>::record("concat", std::move(shape), std::move(out), parts,
                                [offsets, sizes](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
                                  for (std::size_t k = 0; k < gin.size(); ++k) {
                                    if (gin[k]) *gin[k] += g.segment(offsets[k], sizes[k]);
                                  }
                                });
}

// Slice `index` of the first axis.
template <typename Scalar>
Tensor<Scalar> select(const Tensor<Scalar>& x, Index index) {
  if (x.rank() == 0 || index < 0 || index >= x.dim(0)) {
    throw ShapeError("select index " + std::to_string(index) + " out of range for " + to_string(x.shape()));
  }
  Shape shape(x.shape().begin() + 1, x.shape().end());
  const Index block = numel(shape);
  return Tensor<Scalar>::record("select", std::move(shape), x.data().segment(index * block, block), {x},
                                [index, block](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
                                  gin[0]->segment(index * block, block) += g;
                                });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  return Tensor<Scalar>::record("sum", Shape{}, Buffer<Scalar>::Constant(1, x.data().sum()), {x},
                                [](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
                                  *gin[0] += g[0];
                                });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return sum(x) / static_cast<Scalar>(x.size());
}

namespace detail {

inline std::pair<Index, Index> split_last(const Shape& s, const char* op) {
  if (s.empty() || s.back() == 0) throw ShapeError(std::string(op) + " needs a non-empty last axis, got " + to_string(s));
  return {numel(s) / s.back(), s.back()};
}

}  // namespace detail

// Sum over the last axis.
template <typename Scalar>
Tensor<Scalar> sum_last(const Tensor<Scalar>& x) {
  const auto [rows, cols] = detail::split_last(x.shape(), "sum_last");
  using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Buffer<Scalar> out = Eigen::Map<const RowMajor>(x.data().data(), rows, cols).rowwise().sum().array();
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  return Tensor<Scalar>::record("sum_last", std::move(shape), std::move(out), {x},
                                [rows = rows, cols = cols](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
                                  Eigen::Map<RowMajor>(gin[0]->data(), rows, cols).colwise() += g.matrix();
                                });
}

template <typename Scalar>
Tensor<Scalar> mean_last(const Tensor<Scalar>& x) {
  return sum_last(x) / static_cast<Scalar>(x.shape().back());
}

// Max over the last axis; the gradient goes to the first maximiser.
template <typename Scalar>
Tensor<Scalar> max_last(const Tensor<Scalar>& x) {
  const auto [rows, cols] = detail::split_last(x.shape(), "max_last");
  Buffer<Scalar> out(rows);
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(rows));
  const auto& d = x.data();
  for (Index r = 0; r < rows; ++r) {
    Index best = r * cols;
    for (Index c = 1; c < cols; ++c) {
      if (d[r * cols + c] > d[best]) best = r * cols + c;
    }
    out[r] = d[best];
    (*arg)[static_cast<std::size_t>(r)] = best;
    BranchTrace::record(static_cast<std::uint64_t>(best));
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  return Tensor<Scalar>::record("max_last", std::move(shape), std::move(out), {x},
                                [arg](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
                                  for (Index r = 0; r < g.size(); ++r) (*gin[0])[(*arg)[static_cast<std::size_t>(r)]] += g[r];
                                });
}

// Softmax over the last axis.
template <typename Scalar>
Tensor<Scalar> softmax_last(const Tensor<Scalar>& x) {
  const auto [rows, cols] = detail::split_last(x.shape(), "softmax_last");
  using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Buffer<Scalar> out(x.size());
  Eigen::Map<RowMajor> y(out.data(), rows, cols);
  y = Eigen::Map<const RowMajor>(x.data().data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    y.row(r).array() = (y.row(r).array() - y.row(r).maxCoeff()).exp();
    y.row(r) /= y.row(r).sum();
  }
  auto saved = std::make_shared<Buffer<Scalar>>(out);
  return Tensor<Scalar>::record("softmax_last", x.shape(), std::move(out), {x},
                                [saved, rows = rows, cols = cols](const Buffer<Scalar>& g,
                                                                  const std::vector<Buffer<Scalar>*>& gin) {
                                  Eigen::Map<const RowMajor> y(saved->data(), rows, cols);
                                  Eigen::Map<const RowMajor> gy(g.data(), rows, cols);
                                  Eigen::Map<RowMajor> gx(gin[0]->data(), rows, cols);
                                  for (Index r = 0; r < rows; ++r) {
                                    const Scalar dot = y.row(r).dot(gy.row(r));
                                    gx.row(r).array() += y.row(r).array() * (gy.row(r).array() - dot);
                                  }
                                });
}

template <typename Scalar>
Tensor<Scalar> log_softmax_last(const Tensor<Scalar>& x) {
  const auto [rows, cols] = detail::split_last(x.shape(), "log_softmax_last");
  using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Buffer<Scalar> out(x.size());
  Eigen::Map<RowMajor> y(out.data(), rows, cols);
  y = Eigen::Map<const RowMajor>(x.data().data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const Scalar m = y.row(r).maxCoeff();
    const Scalar lse = m + std::log((y.row(r).array() - m).exp().sum());
    y.row(r).array() -= lse;
  }
  auto saved = std::make_shared<Buffer<Scalar>>(out);
  return Tensor<Scalar>::record("log_softmax_last", x.shape(), std::move(out), {x},
                                [saved, rows = rows, cols = cols](const Buffer<Scalar>& g,
                                                                  const std::vector<Buffer<Scalar>*>& gin) {
                                  Eigen::Map<const RowMajor> y(saved->data(), rows, cols);
                                  Eigen::Map<const RowMajor> gy(g.data(), rows, cols);
                                  Eigen::Map<RowMajor> gx(gin[0]->data(), rows, cols);
                                  for (Index r = 0; r < rows; ++r) {
                                    gx.row(r).array() += gy.row(r).array() - y.row(r).array().exp() * gy.row(r).sum();
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul dimension mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<Scalar> out(m * n);
  Eigen::Map<RowMajor>(out.data(), m, n).noalias() =
      Eigen::Map<const RowMajor>(a.data().data(), m, k) * Eigen::Map<const RowMajor>(b.data().data(), k, n);
  return Tensor<Scalar>::record("matmul", {m, n}, std::move(out), {a, b},
                                [a, b, m, k, n](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
                                  Eigen::Map<const RowMajor> G(g.data(), m, n);
                                  if (gin[0]) {
                                    Eigen::Map<RowMajor>(gin[0]->data(), m, k).noalias() +=
                                        G * Eigen::Map<const RowMajor>(b.data().data(), k, n).transpose();
                                  }
                                  if (gin[1]) {
                                    Eigen::Map<RowMajor>(gin[1]->data(), k, n).noalias() +=
                                        Eigen::Map<const RowMajor>(a.data().data(), m, k).transpose() * G;
                                  }
                                });
}

// Left pseudo-inverse of a D x 2 matrix, (C^T C + ridge I)^{-1} C^T, by the
// closed-form 2x2 inverse.
template <typename Scalar>
Tensor<Scalar> pseudo_inverse_2col(const Tensor<Scalar>& c, Scalar ridge) {
  if (c.rank() != 2 || c.dim(1) != 2 || c.dim(0) < 2) {
    throw ShapeError("pseudo_inverse_2col expects a D x 2 matrix with D >= 2, got " + to_string(c.shape()));
  }
  if (ridge < 0) throw std::invalid_argument("pseudo_inverse_2col: ridge must be non-negative");
  using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Mat2 = Eigen::Matrix<Scalar, 2, 2>;
  const Index d = c.dim(0);
  Eigen::Map<const RowMajor> C(c.data().data(), d, 2);
  Mat2 gram = C.transpose() * C;
  gram.diagonal().array() += ridge;
  const Scalar det = gram(0, 0) * gram(1, 1) - gram(0, 1) * gram(1, 0);
  if (!(std::abs(det) >= Scalar(1e-30))) {
    throw SingularMatrixError("pseudo_inverse_2col: det(C^T C + ridge I) = " + std::to_string(det) +
                              " is below 1e-30; raise the ridge term");
  }
  Mat2 inv;
  inv << gram(1, 1), -gram(0, 1), -gram(1, 0), gram(0, 0);
  inv /= det;
  Buffer<Scalar> out(2 * d);
  Eigen::Map<RowMajor>(out.data(), 2, d).noalias() = inv * C.transpose();
  auto saved = std::make_shared<Buffer<Scalar>>(out);
  return Tensor<Scalar>::record(
      "pseudo_inverse_2col", {2, d}, std::move(out), {c},
      [c, inv, saved, d](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
        // P = M^{-1} C^T with M = C^T C + r I:
        // dL/dC = G^T M^{-1} - C (S + S^T), S = M^{-1} G P^T.
        Eigen::Map<const RowMajor> C(c.data().data(), d, 2);
        Eigen::Map<const RowMajor> G(g.data(), 2, d);
        Eigen::Map<const RowMajor> P(saved->data(), 2, d);
        const Mat2 S = inv * G * P.transpose();
        Eigen::Map<RowMajor>(gin[0]->data(), d, 2).noalias() += G.transpose() * inv - C * (S + S.transpose());
      });
}

// Scales each column of a D x N matrix to unit length. Columns with norm
// below `eps` map to zero and pass no gradient.
template <typename Scalar>
Tensor<Scalar> normalize_columns(const Tensor<Scalar>& x, Scalar eps) {
  if (x.rank() != 2) throw ShapeError("normalize_columns expects a matrix, got " + to_string(x.shape()));
  using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Index rows = x.dim(0), cols = x.dim(1);
  Eigen::Map<const RowMajor> X(x.data().data(), rows, cols);
  auto norms = std::make_shared<Buffer<Scalar>>(X.colwise().norm().transpose().array());
  Buffer<Scalar> out(x.size());
  Eigen::Map<RowMajor> Y(out.data(), rows, cols);
  for (Index j = 0; j < cols; ++j) {
    const Scalar n = (*norms)[j];
    if (n < eps) {
      Y.col(j).setZero();
    } else {
      Y.col(j) = X.col(j) / n;
    }
  }
  auto saved = std::make_shared<Buffer<Scalar>>(out);
  return Tensor<Scalar>::record(
      "normalize_columns", x.shape(), std::move(out), {x},
      [norms, saved, rows, cols, eps](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
        Eigen::Map<const RowMajor> Y(saved->data(), rows, cols);
        Eigen::Map<const RowMajor> G(g.data(), rows, cols);
        Eigen::Map<RowMajor> GX(gin[0]->data(), rows, cols);
        for (Index j = 0; j < cols; ++j) {
          const Scalar n = (*norms)[j];
          if (n < eps) continue;
          const Scalar proj = Y.col(j).dot(G.col(j));
          GX.col(j) += (G.col(j) - Y.col(j) * proj) / n;
        }
      });
}

// ---------------------------------------------------------------------------
// Spatial operations on C x H x W maps

namespace detail {

// Source taps for one output coordinate of an align-corners-false bilinear
// resize.
struct LinearTap {
  Index lo, hi;
  double w_lo, w_hi;
};

inline std::vector<LinearTap> linear_taps(Index in, Index out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    Index lo = static_cast<Index>(src);
    if (lo > in - 1) lo = in - 1;
    const Index hi = lo < in - 1 ? lo + 1 : lo;
    const double frac = src - static_cast<double>(lo);
    taps[static_cast<std::size_t>(o)] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

inline void check_chw(const Shape& s, const char* op) {
  if (s.size() != 3) throw ShapeError(std::string(op) + " expects a C x H x W tensor, got " + to_string(s));
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& x, Index out_h, Index out_w) {
  detail::check_chw(x.shape(), "bilinear_resize");
  if (out_h < 1 || out_w < 1) {
    throw std::invalid_argument("bilinear_resize: target size must be positive, got " + std::to_string(out_h) + "x" +
                                std::to_string(out_w));
  }
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) return reshape(x, x.shape());
  auto ty = std::make_shared<std::vector<detail::LinearTap>>(detail::linear_taps(h, out_h));
  auto tx = std::make_shared<std::vector<detail::LinearTap>>(detail::linear_taps(w, out_w));
  const auto& in = x.data();
  Buffer<Scalar> out(c * out_h * out_w);
  for (Index ch = 0; ch < c; ++ch) {
    const Scalar* src = in.data() + ch * h * w;
    Scalar* dst = out.data() + ch * out_h * out_w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const auto& a = (*ty)[static_cast<std::size_t>(oy)];
      for (Index ox = 0; ox < out_w; ++ox) {
        const auto& b = (*tx)[static_cast<std::size_t>(ox)];
        dst[oy * out_w + ox] = static_cast<Scalar>(a.w_lo * b.w_lo) * src[a.lo * w + b.lo] +
                               static_cast<Scalar>(a.w_lo * b.w_hi) * src[a.lo * w + b.hi] +
                               static_cast<Scalar>(a.w_hi * b.w_lo) * src[a.hi * w + b.lo] +
                               static_cast<Scalar>(a.w_hi * b.w_hi) * src[a.hi * w + b.hi];
      }
    }
  }
  return Tensor<Scalar>::record(
      "bilinear_resize", {c, out_h, out_w}, std::move(out), {x},
      [ty, tx, c, h, w, out_h, out_w](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
        for (Index ch = 0; ch < c; ++ch) {
          Scalar* dst = gin[0]->data() + ch * h * w;
          const Scalar* go = g.data() + ch * out_h * out_w;
          for (Index oy = 0; oy < out_h; ++oy) {
            const auto& a = (*ty)[static_cast<std::size_t>(oy)];
            for (Index ox = 0; ox < out_w; ++ox) {
              const auto& b = (*tx)[static_cast<std::size_t>(ox)];
              const Scalar v = go[oy * out_w + ox];
              dst[a.lo * w + b.lo] += static_cast<Scalar>(a.w_lo * b.w_lo) * v;
              dst[a.lo * w + b.hi] += static_cast<Scalar>(a.w_lo * b.w_hi) * v;
              dst[a.hi * w + b.lo] += static_cast<Scalar>(a.w_hi * b.w_lo) * v;
              dst[a.hi * w + b.hi] += static_cast<Scalar>(a.w_hi * b.w_hi) * v;
            }
          }
        }
      });
}

// Stride-1 cross-correlation with zero "same" padding; kernel is
// Cout x Cin x k x k with odd k, bias has Cout entries.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias) {
  detail::check_chw(x.shape(), "conv2d");
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3) || kernel.dim(2) % 2 == 0) {
    throw ShapeError("conv2d kernel must be Cout x Cin x k x k with odd k, got " + to_string(kernel.shape()));
  }
  if (kernel.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + ", kernel " +
                     to_string(kernel.shape()));
  }
  if (bias.size() != kernel.dim(0)) {
    throw ShapeError("conv2d bias " + to_string(bias.shape()) + " does not match kernel " + to_string(kernel.shape()));
  }
  const Index cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index cout = kernel.dim(0), k = kernel.dim(2), r = k / 2;
  const Scalar* in = x.data().data();
  const Scalar* ker = kernel.data().data();
  Buffer<Scalar> out(cout * h * w);
  for (Index o = 0; o < cout; ++o) {
    Scalar* dst = out.data() + o * h * w;
    std::fill(dst, dst + h * w, bias.data()[o]);
    for (Index i = 0; i < cin; ++i) {
      const Scalar* src = in + i * h * w;
      for (Index ky = 0; ky < k; ++ky) {
        for (Index kx = 0; kx < k; ++kx) {
          const Scalar wgt = ker[((o * cin + i) * k + ky) * k + kx];
          const Index dy = ky - r, dx = kx - r;
          const Index y0 = std::max<Index>(0, -dy), y1 = std::min<Index>(h, h - dy);
          const Index x0 = std::max<Index>(0, -dx), x1 = std::min<Index>(w, w - dx);
          for (Index y = y0; y < y1; ++y) {
            const Scalar* s = src + (y + dy) * w + dx;
            Scalar* d = dst + y * w;
            for (Index xx = x0; xx < x1; ++xx) d[xx] += wgt * s[xx];
          }
        }
      }
    }
  }
  return Tensor<Scalar>::record(
      "conv2d", {cout, h, w}, std::move(out), {x, kernel, bias},
      [x, kernel, cin, cout, h, w, k, r](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
        const Scalar* in = x.data().data();
        const Scalar* ker = kernel.data().data();
        for (Index o = 0; o < cout; ++o) {
          const Scalar* go = g.data() + o * h * w;
          if (gin[2]) (*gin[2])[o] += Eigen::Map<const Buffer<Scalar>>(go, h * w).sum();
          for (Index i = 0; i < cin; ++i) {
            const Scalar* src = in + i * h * w;
            for (Index ky = 0; ky < k; ++ky) {
              for (Index kx = 0; kx < k; ++kx) {
                const Index widx = ((o * cin + i) * k + ky) * k + kx;
                const Index dy = ky - r, dx = kx - r;
                const Index y0 = std::max<Index>(0, -dy), y1 = std::min<Index>(h, h - dy);
                const Index x0 = std::max<Index>(0, -dx), x1 = std::min<Index>(w, w - dx);
                Scalar acc = 0;
                const Scalar wgt = ker[widx];
                for (Index y = y0; y < y1; ++y) {
                  const Scalar* s = src + (y + dy) * w + dx;
                  const Scalar* gr = go + y * w;
                  for (Index xx = x0; xx < x1; ++xx) acc += gr[xx] * s[xx];
                  if (gin[0]) {
                    Scalar* gx = gin[0]->data() + i * h * w + (y + dy) * w + dx;
                    for (Index xx = x0; xx < x1; ++xx) gx[xx] += wgt * gr[xx];
                  }
                }
                if (gin[1]) (*gin[1])[widx] += acc;
              }
            }
          }
        }
      });
}

// 2x2 average pooling with stride 2; H and W must be even.
template <typename Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& x) {
  detail::check_chw(x.shape(), "avg_pool2");
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2 needs even spatial size, got " + to_string(x.shape()));
  const Index oh = h / 2, ow = w / 2;
  const auto& in = x.data();
  Buffer<Scalar> out(c * oh * ow);
  for (Index ch = 0; ch < c; ++ch) {
    for (Index y = 0; y < oh; ++y) {
      for (Index xx = 0; xx < ow; ++xx) {
        const Index base = ch * h * w + 2 * y * w + 2 * xx;
        out[(ch * oh + y) * ow + xx] = Scalar(0.25) * (in[base] + in[base + 1] + in[base + w] + in[base + w + 1]);
      }
    }
  }
  return Tensor<Scalar>::record("avg_pool2", {c, oh, ow}, std::move(out), {x},
                                [c, h, w, oh, ow](const Buffer<Scalar>& g, const std::vector<Buffer<Scalar>*>& gin) {
                                  for (Index ch = 0; ch < c; ++ch) {
                                    for (Index y = 0; y < oh; ++y) {
                                      for (Index xx = 0; xx < ow; ++xx) {
                                        const Scalar v = Scalar(0.25) * g[(ch * oh + y) * ow + xx];
                                        const Index base = ch * h * w + 2 * y * w + 2 * xx;
                                        (*gin[0])[base] += v;
                                        (*gin[0])[base + 1] += v;
                                        (*gin[0])[base + w] += v;
                                        (*gin[0])[base + w + 1] += v;
                                      }
                                    }
                                  }
                                });
}

}  // namespace restnet
