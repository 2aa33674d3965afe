#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fcm/error.hpp"
#include "fcm/tensor.hpp"

namespace fcm {

// Additive attention-bias value for hidden key columns.
inline constexpr float kMaskSentinel = -1e9f;

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat offset into `in` for every flat index of `out`, where `in` broadcasts
// (right-aligned) to `out`.
inline std::vector<std::size_t> broadcast_offsets(const Shape& out, const Shape& in) {
  const std::size_t n = out.size();
  const std::size_t lead = n - in.size();
  std::vector<std::size_t> in_stride(n, 0);
  std::size_t stride = 1;
  for (std::size_t i = n; i-- > lead;) {
    std::size_t d = in[i - lead];
    in_stride[i] = d == 1 ? 0 : stride;
    stride *= d;
  }
  std::vector<std::size_t> offsets(shape_numel(out));
  std::vector<std::size_t> idx(n, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < offsets.size(); ++flat) {
    offsets[flat] = off;
    for (std::size_t ax = n; ax-- > 0;) {
      ++idx[ax];
      off += in_stride[ax];
      if (idx[ax] < out[ax]) break;
      off -= in_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return offsets;
}

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
std::vector<T> transpose_matrix(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
void check_finite(std::span<const T> values, const char* op) {
#ifndef NDEBUG
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
#else
  (void)values;
  (void)op;
#endif
}

}  // namespace detail

// Reverse-mode gradient tape. Every op below computes its forward result
// immediately and, when any input requires a gradient, appends a record whose
// closure accumulates input gradients. backward() replays records in exact
// reverse recording order.
template <class T>
class Graph {
 public:
  struct Record {
    std::string op;
    std::vector<std::size_t> inputs;
    std::size_t output;
    std::function<void()> backward;
  };

  Graph() = default;
  explicit Graph(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  const std::vector<Record>& records() const { return records_; }

  void reset() {
    records_.clear();
    next_node_ = 0;
    backward_done_ = false;
  }

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
      throw ShapeError("matmul needs at least 2-d operands, got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    }
    const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
    if (b.dim(-2) != k) {
      throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
    const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    Shape batch;
    try {
      batch = detail::broadcast_shapes(batch_a, batch_b, "matmul");
    } catch (const ShapeError&) {
      throw ShapeError("matmul: batch dimensions of " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " do not broadcast");
    }
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    auto out = Tensor<T>::zeros(out_shape);

    const auto ai = a.impl_;
    const auto bi = b.impl_;
    const auto oi = out.impl_;

    if (batch_b.empty() || shape_numel(batch_b) == 1) {
      // Fold every batch of `a` into the row dimension.
      const std::size_t rows = shape_numel(batch) * m;
      if (batch_a.size() < batch.size() && shape_numel(batch) != shape_numel(batch_a)) {
        throw ShapeError("matmul: unsupported broadcast of " + shape_str(a.shape()));
      }
      detail::gemm_nn(ai->data.data(), bi->data.data(), oi->data.data(), rows, k, n);
      detail::check_finite<T>(oi->data, "matmul");
      record("matmul", {a, b}, out, [ai, bi, oi, rows, k, n] {
        if (ai->requires_grad) {
          auto& ga = grad_of(*ai);
          auto bt = detail::transpose_matrix(bi->data.data(), k, n);
          detail::gemm_nn(oi->grad.data(), bt.data(), ga.data(), rows, n, k);
        }
        if (bi->requires_grad) {
          auto& gb = grad_of(*bi);
          detail::gemm_tn(ai->data.data(), oi->grad.data(), gb.data(), rows, k, n);
        }
      });
      return out;
    }

    const auto off_a = detail::broadcast_offsets(batch, batch_a);
    const auto off_b = detail::broadcast_offsets(batch, batch_b);
    const std::size_t nb = shape_numel(batch);
    for (std::size_t t = 0; t < nb; ++t) {
      detail::gemm_nn(ai->data.data() + off_a[t] * m * k, bi->data.data() + off_b[t] * k * n,
                      oi->data.data() + t * m * n, m, k, n);
    }
    detail::check_finite<T>(oi->data, "matmul");
    record("matmul", {a, b}, out, [ai, bi, oi, off_a, off_b, nb, m, k, n] {
      for (std::size_t t = 0; t < nb; ++t) {
        const T* dc = oi->grad.data() + t * m * n;
        if (ai->requires_grad) {
          auto& ga = grad_of(*ai);
          auto bt = detail::transpose_matrix(bi->data.data() + off_b[t] * k * n, k, n);
          detail::gemm_nn(dc, bt.data(), ga.data() + off_a[t] * m * k, m, n, k);
        }
        if (bi->requires_grad) {
          auto& gb = grad_of(*bi);
          detail::gemm_tn(ai->data.data() + off_a[t] * m * k, dc, gb.data() + off_b[t] * k * n, m,
                          k, n);
        }
      }
    });
    return out;
  }

  // Swaps the last two axes.
  Tensor<T> transpose(const Tensor<T>& x) {
    if (x.ndim() < 2) throw ShapeError("transpose needs >= 2 dims, got " + shape_str(x.shape()));
    std::vector<std::size_t> axes(x.ndim());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(x, axes);
  }

  Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    const auto& in = x.shape();
    const std::size_t n = in.size();
    if (axes.size() != n) throw ShapeError("permute: axis count mismatch for " + shape_str(in));
    std::vector<bool> seen(n, false);
    Shape out_shape(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (axes[i] >= n || seen[axes[i]]) throw ShapeError("permute: invalid axes");
      seen[axes[i]] = true;
      out_shape[i] = in[axes[i]];
    }
    std::vector<std::size_t> in_stride(n, 1);
    for (std::size_t i = n - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
    std::vector<std::size_t> stride(n);
    for (std::size_t i = 0; i < n; ++i) stride[i] = in_stride[axes[i]];

    auto out = Tensor<T>::zeros(out_shape);
    std::vector<std::size_t> src(out.numel());
    std::vector<std::size_t> idx(n, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < src.size(); ++flat) {
      src[flat] = off;
      for (std::size_t ax = n; ax-- > 0;) {
        ++idx[ax];
        off += stride[ax];
        if (idx[ax] < out_shape[ax]) break;
        off -= stride[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
    const auto xi = x.impl_;
    const auto oi = out.impl_;
    for (std::size_t i = 0; i < src.size(); ++i) oi->data[i] = xi->data[src[i]];
    record("permute", {x}, out, [xi, oi, src = std::move(src)] {
      auto& gx = grad_of(*xi);
      for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += oi->grad[i];
    });
    return out;
  }

  Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
      throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    auto out = Tensor<T>::from(std::move(shape), x.values());
    const auto xi = x.impl_;
    const auto oi = out.impl_;
    record("reshape", {x}, out, [xi, oi] {
      auto& gx = grad_of(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
    });
    return out;
  }

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    auto out = Tensor<T>::zeros(a.shape());
    const auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
    for (std::size_t i = 0; i < oi->data.size(); ++i) oi->data[i] = ai->data[i] + bi->data[i];
    detail::check_finite<T>(oi->data, "add");
    record("add", {a, b}, out, [ai, bi, oi] {
      if (ai->requires_grad) {
        auto& g = grad_of(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
    });
    return out;
  }

  // a + b with b broadcast (right-aligned) to a's shape.
  Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
    if (b.ndim() > a.ndim() || detail::broadcast_shapes(a.shape(), b.shape(), "add_broadcast") != a.shape()) {
      throw ShapeError("add_broadcast: " + shape_str(b.shape()) + " does not broadcast to " +
                       shape_str(a.shape()));
    }
    auto off = detail::broadcast_offsets(a.shape(), b.shape());
    auto out = Tensor<T>::zeros(a.shape());
    const auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
    for (std::size_t i = 0; i < oi->data.size(); ++i) oi->data[i] = ai->data[i] + bi->data[off[i]];
    record("add_broadcast", {a, b}, out, [ai, bi, oi, off = std::move(off)] {
      if (ai->requires_grad) {
        auto& g = grad_of(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(*bi);
        for (std::size_t i = 0; i < off.size(); ++i) g[off[i]] += oi->grad[i];
      }
    });
    return out;
  }

  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    auto out = Tensor<T>::zeros(a.shape());
    const auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
    for (std::size_t i = 0; i < oi->data.size(); ++i) oi->data[i] = ai->data[i] * bi->data[i];
    detail::check_finite<T>(oi->data, "mul");
    record("mul", {a, b}, out, [ai, bi, oi] {
      if (ai->requires_grad) {
        auto& g = grad_of(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * ai->data[i];
      }
    });
    return out;
  }

  Tensor<T> scale(const Tensor<T>& x, T factor) {
    auto out = Tensor<T>::zeros(x.shape());
    const auto xi = x.impl_, oi = out.impl_;
    for (std::size_t i = 0; i < oi->data.size(); ++i) oi->data[i] = xi->data[i] * factor;
    record("scale", {x}, out, [xi, oi, factor] {
      auto& g = grad_of(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * factor;
    });
    return out;
  }

  Tensor<T> sum(const Tensor<T>& x) {
    double acc = 0.0;
    for (T v : x.data()) acc += static_cast<double>(v);
    auto out = Tensor<T>::scalar(static_cast<T>(acc));
    const auto xi = x.impl_, oi = out.impl_;
    record("sum", {x}, out, [xi, oi] {
      auto& g = grad_of(*xi);
      for (auto& v : g) v += oi->grad[0];
    });
    return out;
  }

  Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    const std::size_t cols = x.dim(-1);
    const std::size_t rows = x.numel() / cols;
    auto out = Tensor<T>::zeros(x.shape());
    const auto xi = x.impl_, oi = out.impl_;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = xi->data.data() + r * cols;
      T* y = oi->data.data() + r * cols;
      T mx = in[0];
      for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
      if (mx <= static_cast<T>(kMaskSentinel) * T(0.5)) {
        throw NumericError("fully masked attention row");
      }
      T total = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        y[j] = std::exp(in[j] - mx);
        total += y[j];
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
    }
    detail::check_finite<T>(oi->data, "softmax");
    record("softmax", {x}, out, [xi, oi, rows, cols] {
      auto& g = grad_of(*xi);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = oi->data.data() + r * cols;
        const T* dy = oi->grad.data() + r * cols;
        T dot = 0;
        for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
        T* dx = g.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
    return out;
  }

  // y = gain * x / sqrt(mean(x^2) + eps) over the last axis.
  Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6)) {
    const std::size_t d = x.dim(-1);
    if (gain.ndim() != 1 || gain.dim(0) != d) {
      throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " vs input " +
                       shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    auto out = Tensor<T>::zeros(x.shape());
    std::vector<T> inv_rms(rows);
    const auto xi = x.impl_, gi = gain.impl_, oi = out.impl_;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = xi->data.data() + r * d;
      T ss = 0;
      for (std::size_t j = 0; j < d; ++j) ss += in[j] * in[j];
      const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
      inv_rms[r] = inv;
      T* y = oi->data.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) y[j] = gi->data[j] * (in[j] * inv);
    }
    detail::check_finite<T>(oi->data, "rms_norm");
    record("rms_norm", {x, gain}, out, [xi, gi, oi, inv_rms = std::move(inv_rms), rows, d] {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xi->data.data() + r * d;
        const T* dy = oi->grad.data() + r * d;
        const T inv = inv_rms[r];
        if (gi->requires_grad) {
          auto& gg = grad_of(*gi);
          for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * in[j] * inv;
        }
        if (xi->requires_grad) {
          auto& gx = grad_of(*xi);
          T dot = 0;
          for (std::size_t j = 0; j < d; ++j) dot += gi->data[j] * dy[j] * in[j];
          const T coef = inv * inv * inv * dot / static_cast<T>(d);
          T* dx = gx.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) dx[j] += inv * gi->data[j] * dy[j] - coef * in[j];
        }
      }
    });
    return out;
  }

  // swish(x) = x * sigmoid(x)
  Tensor<T> swish(const Tensor<T>& x) {
    auto out = Tensor<T>::zeros(x.shape());
    const auto xi = x.impl_, oi = out.impl_;
    for (std::size_t i = 0; i < oi->data.size(); ++i) {
      oi->data[i] = xi->data[i] * detail::sigmoid(xi->data[i]);
    }
    detail::check_finite<T>(oi->data, "swish");
    record("swish", {x}, out, [xi, oi] {
      auto& g = grad_of(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xi->data[i];
        const T s = detail::sigmoid(v);
        g[i] += oi->grad[i] * (s + v * s * (T(1) - s));
      }
    });
    return out;
  }

  Tensor<T> embedding(const Tensor<T>& table, const IdTensor& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding table must be 2-d, got " + shape_str(table.shape()));
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    for (auto id : ids.data) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw IndexError("embedding id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(vocab) + ")");
      }
    }
    Shape out_shape = ids.shape;
    out_shape.push_back(d);
    auto out = Tensor<T>::zeros(out_shape);
    const auto ti = table.impl_, oi = out.impl_;
    for (std::size_t i = 0; i < ids.numel(); ++i) {
      std::copy_n(ti->data.data() + static_cast<std::size_t>(ids.data[i]) * d, d,
                  oi->data.data() + i * d);
    }
    record("embedding", {table}, out, [ti, oi, id_list = ids.data, d] {
      auto& g = grad_of(*ti);
      for (std::size_t i = 0; i < id_list.size(); ++i) {
        T* row = g.data() + static_cast<std::size_t>(id_list[i]) * d;
        const T* src = oi->grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
      }
    });
    return out;
  }

  // -sum(w * log softmax(logits)[target]) / sum(w)
  Tensor<T> cross_entropy(const Tensor<T>& logits, const IdTensor& targets,
                          std::span<const T> weights) {
    const std::size_t vocab = logits.dim(-1);
    const std::size_t rows = logits.numel() / vocab;
    if (targets.numel() != rows || weights.size() != rows) {
      throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " +
                       shape_str(targets.shape) + " and " + std::to_string(weights.size()) +
                       " weights");
    }
    double total_w = 0.0;
    for (T w : weights) total_w += static_cast<double>(w);
    if (total_w == 0.0) throw NumericError("no loss positions");

    const auto li = logits.impl_;
    std::vector<T> lse(rows, T(0));
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (weights[r] == T(0)) continue;
      const auto t = targets.data[r];
      if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
        throw IndexError("cross_entropy target " + std::to_string(t) + " out of range");
      }
      const T* z = li->data.data() + r * vocab;
      T mx = z[0];
      for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, z[j]);
      T se = 0;
      for (std::size_t j = 0; j < vocab; ++j) se += std::exp(z[j] - mx);
      lse[r] = mx + std::log(se);
      loss += static_cast<double>(weights[r]) * static_cast<double>(lse[r] - z[t]);
    }
    auto out = Tensor<T>::scalar(static_cast<T>(loss / total_w));
    const auto oi = out.impl_;
    std::vector<T> w(weights.begin(), weights.end());
    record("cross_entropy", {logits}, out,
           [li, oi, lse = std::move(lse), w = std::move(w), tg = targets.data, total_w, rows, vocab] {
             auto& g = grad_of(*li);
             const T scale_all = static_cast<T>(static_cast<double>(oi->grad[0]) / total_w);
             for (std::size_t r = 0; r < rows; ++r) {
               if (w[r] == T(0)) continue;
               const T coef = w[r] * scale_all;
               const T* z = li->data.data() + r * vocab;
               T* dz = g.data() + r * vocab;
               for (std::size_t j = 0; j < vocab; ++j) dz[j] += coef * std::exp(z[j] - lse[r]);
               dz[tg[r]] -= coef;
             }
           });
    return out;
  }

  // Rotates pairs (2j, 2j+1) of the last axis by positions[s] * base^(-2j/d),
  // where s indexes the second-to-last axis.
  Tensor<T> rope(const Tensor<T>& x, std::span<const std::int32_t> positions, double base = 10000.0) {
    if (x.ndim() < 2) throw ShapeError("rope needs [..., seq, d_head], got " + shape_str(x.shape()));
    const std::size_t d = x.dim(-1), s = x.dim(-2);
    if (d % 2 != 0) throw ConfigError("rope: head dimension must be even, got " + std::to_string(d));
    if (positions.size() != s) throw ShapeError("rope: positions length differs from sequence length");
    const std::size_t half = d / 2;
    std::vector<T> cs(s * half), sn(s * half);
    for (std::size_t p = 0; p < s; ++p) {
      for (std::size_t j = 0; j < half; ++j) {
        const double theta = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
        const double angle = static_cast<double>(positions[p]) * theta;
        cs[p * half + j] = static_cast<T>(std::cos(angle));
        sn[p * half + j] = static_cast<T>(std::sin(angle));
      }
    }
    auto out = Tensor<T>::zeros(x.shape());
    const auto xi = x.impl_, oi = out.impl_;
    const std::size_t rows = x.numel() / d;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t p = r % s;
      const T* in = xi->data.data() + r * d;
      T* y = oi->data.data() + r * d;
      for (std::size_t j = 0; j < half; ++j) {
        const T c = cs[p * half + j], sv = sn[p * half + j];
        y[2 * j] = in[2 * j] * c - in[2 * j + 1] * sv;
        y[2 * j + 1] = in[2 * j] * sv + in[2 * j + 1] * c;
      }
    }
    record("rope", {x}, out, [xi, oi, cs = std::move(cs), sn = std::move(sn), rows, s, d, half] {
      auto& g = grad_of(*xi);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t p = r % s;
        const T* dy = oi->grad.data() + r * d;
        T* dx = g.data() + r * d;
        for (std::size_t j = 0; j < half; ++j) {
          const T c = cs[p * half + j], sv = sn[p * half + j];
          dx[2 * j] += dy[2 * j] * c + dy[2 * j + 1] * sv;
          dx[2 * j + 1] += -dy[2 * j] * sv + dy[2 * j + 1] * c;
        }
      }
    });
    return out;
  }

  // Inverted dropout; rate 0 returns x unchanged without recording.
  template <class Rng>
  Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
    if (rate == 0.0) return x;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = unif(rng) < rate ? T(0) : keep_scale;
    auto out = Tensor<T>::zeros(x.shape());
    const auto xi = x.impl_, oi = out.impl_;
    for (std::size_t i = 0; i < mask.size(); ++i) oi->data[i] = xi->data[i] * mask[i];
    record("dropout", {x}, out, [xi, oi, mask = std::move(mask)] {
      auto& g = grad_of(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * mask[i];
    });
    return out;
  }

  void backward(const Tensor<T>& loss) {
    if (backward_done_) throw TapeError("backward called twice without reset");
    if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    if (loss.impl_->tape != this || !loss.requires_grad()) {
      throw TapeError("loss is not recorded on this tape");
    }
    auto& g = grad_of(*loss.impl_);
    g[0] = T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
    backward_done_ = true;
  }

 private:
  using Impl = typename Tensor<T>::Impl;

  static std::vector<T>& grad_of(Impl& impl) {
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), T(0));
    return impl.grad;
  }

  static void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }

  std::size_t node_of(Impl& impl) {
    if (impl.tape != this) {
      impl.tape = this;
      impl.node = next_node_++;
    }
    return impl.node;
  }

  template <class Fn>
  void record(const char* op, std::initializer_list<Tensor<T>> inputs, Tensor<T>& out, Fn&& fn) {
    if (!grad_enabled_) return;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return;
    Record rec;
    rec.op = op;
    for (const auto& in : inputs) rec.inputs.push_back(node_of(*in.impl_));
    out.impl_->requires_grad = true;
    rec.output = node_of(*out.impl_);
    auto oi = out.impl_;
    rec.backward = [oi, fn = std::forward<Fn>(fn)]() {
      if (oi->grad.empty()) return;
      fn();
    };
    records_.push_back(std::move(rec));
  }

  std::vector<Record> records_;
  std::size_t next_node_ = 0;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

}  // namespace fcm
