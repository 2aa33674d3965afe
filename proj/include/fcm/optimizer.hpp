#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fcm/error.hpp"
#include "fcm/model.hpp"
#include "fcm/tensor.hpp"

namespace fcm {

// 0.01 for the first 10,000 steps, then 1/sqrt(k).
inline double lr_schedule(std::int64_t k) {
  if (k <= 0) throw ConfigError("lr_schedule: step must be >= 1, got " + std::to_string(k));
  if (k <= 10000) return 0.01;
  return 1.0 / std::sqrt(static_cast<double>(k));
}

// Second-moment decay 1 - k^-0.8.
inline double beta2_schedule(std::int64_t k) {
  if (k <= 0) throw ConfigError("beta2_schedule: step must be >= 1, got " + std::to_string(k));
  return 1.0 - std::pow(static_cast<double>(k), -0.8);
}

struct LrSchedule {
  enum class Kind { rsqrt_decay, constant };
  Kind kind = Kind::rsqrt_decay;
  double value = 0.01;  // used by Kind::constant

  double at(std::int64_t k) const { return kind == Kind::constant ? value : lr_schedule(k); }

  static LrSchedule standard() { return {}; }
  static LrSchedule constant(double lr) { return {Kind::constant, lr}; }
};

enum class OptimizerKind : std::uint32_t { adafactor = 0, sgd_momentum = 1 };

inline std::string to_string(OptimizerKind k) {
  return k == OptimizerKind::adafactor ? "adafactor" : "sgd_momentum";
}

inline OptimizerKind parse_optimizer_kind(std::string_view s) {
  if (s == "adafactor") return OptimizerKind::adafactor;
  if (s == "sgd_momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

// Per-parameter buffers. Tensors with >= 2 dims keep factored row/column
// accumulators over their last two axes; vectors keep a full accumulator.
struct ParamState {
  Shape shape;
  std::vector<float> momentum;
  std::vector<float> row;
  std::vector<float> col;
  std::vector<float> full;

  bool factored() const { return shape.size() >= 2; }
  std::size_t rows() const { return shape[shape.size() - 2]; }
  std::size_t cols() const { return shape.back(); }
  std::size_t slices() const { return shape_numel(shape) / (rows() * cols()); }
  bool operator==(const ParamState&) const = default;
};

struct OptState {
  OptimizerKind kind = OptimizerKind::adafactor;
  std::int64_t step = 0;
  std::vector<std::string> names;
  std::vector<ParamState> slots;
  bool operator==(const OptState&) const = default;
};

inline OptState init_opt_state(OptimizerKind kind, const std::vector<NamedTensor<float>>& params) {
  OptState st;
  st.kind = kind;
  for (const auto& [name, t] : params) {
    ParamState ps;
    ps.shape = t.shape();
    ps.momentum.assign(t.numel(), 0.0f);
    if (kind == OptimizerKind::adafactor) {
      if (ps.factored()) {
        ps.row.assign(ps.slices() * ps.rows(), 0.0f);
        ps.col.assign(ps.slices() * ps.cols(), 0.0f);
      } else {
        ps.full.assign(t.numel(), 0.0f);
      }
    }
    st.names.push_back(name);
    st.slots.push_back(std::move(ps));
  }
  return st;
}

template <class T>
std::vector<std::span<T>> grad_spans(std::vector<NamedTensor<T>>& params) {
  std::vector<std::span<T>> out;
  for (auto& [name, t] : params) out.push_back(t.ensure_grad());
  return out;
}

// Joint L2 norm over every gradient; rescales all of them when it exceeds
// max_norm. Returns the pre-clip norm.
inline double clip_global_norm(const std::vector<std::span<float>>& grads, double max_norm = 1.0) {
  double ss = 0.0;
  for (auto g : grads) {
    for (float v : g) {
      if (!std::isfinite(v)) throw NumericError("non-finite gradient");
      ss += static_cast<double>(v) * static_cast<double>(v);
    }
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const auto factor = static_cast<float>(max_norm / norm);
    for (auto g : grads)
      for (auto& v : g) v *= factor;
  }
  return norm;
}

struct AdafactorOptions {
  LrSchedule lr = LrSchedule::standard();
  double beta1 = 0.9;
  double eps1 = 1e-30;  // added to squared gradients
  double eps2 = 1e-3;   // floor on parameter RMS
  double clip_threshold = 1.0;
  bool weight_decay = true;  // decoupled, coefficient lr(k)^2
};

struct StepInfo {
  std::int64_t step = 0;
  double lr = 0.0;
  double beta2 = 0.0;
};

// Row-times-column second-moment estimate for one factored slot.
inline std::vector<double> factored_second_moment(const ParamState& ps) {
  const std::size_t r = ps.rows(), c = ps.cols(), n = ps.slices();
  std::vector<double> v(n * r * c);
  for (std::size_t s = 0; s < n; ++s) {
    double row_sum = 0.0;
    for (std::size_t i = 0; i < r; ++i) row_sum += ps.row[s * r + i];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        v[(s * r + i) * c + j] = static_cast<double>(ps.row[s * r + i]) * ps.col[s * c + j] / row_sum;
  }
  return v;
}

inline void check_state_matches(const OptState& st, const std::vector<NamedTensor<float>>& params) {
  if (st.slots.size() != params.size()) throw ShapeError("optimizer state has a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (st.slots[i].shape != params[i].second.shape()) {
      throw ShapeError("optimizer state shape " + shape_str(st.slots[i].shape) + " does not match parameter " +
                       params[i].first + " " + shape_str(params[i].second.shape()));
    }
  }
}

// One Adafactor step using each parameter's current gradient. The step
// counter is incremented first, so the first call uses k = 1.
inline StepInfo adafactor_update(OptState& st, const std::vector<NamedTensor<float>>& params,
                                 const AdafactorOptions& opt = {}) {
  if (st.kind != OptimizerKind::adafactor) throw ConfigError("adafactor_update on non-Adafactor state");
  check_state_matches(st, params);
  const std::int64_t k = ++st.step;
  const double lr = opt.lr.at(k);
  const double b2 = beta2_schedule(k);
  const double decay = opt.weight_decay ? lr * lr : 0.0;

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<float> x = params[pi].second;
    ParamState& ps = st.slots[pi];
    const std::size_t n = x.numel();
    auto data = x.data();
    std::vector<float> zeros;
    std::span<const float> g;
    if (x.has_grad()) {
      g = x.grad();
    } else {
      zeros.assign(n, 0.0f);
      g = zeros;
    }

    double ss = 0.0;
    for (float v : data) ss += static_cast<double>(v) * v;
    const double alpha = std::max(opt.eps2, std::sqrt(ss / static_cast<double>(n))) * lr;

    std::vector<double> u(n);
    if (ps.factored()) {
      const std::size_t r = ps.rows(), c = ps.cols(), slices = ps.slices();
      for (std::size_t s = 0; s < slices; ++s) {
        const std::size_t base = s * r * c;
        std::vector<double> rsum(r, 0.0), csum(c, 0.0);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const double gv = g[base + i * c + j];
            const double sq = gv * gv + opt.eps1;
            rsum[i] += sq;
            csum[j] += sq;
          }
        }
        for (std::size_t i = 0; i < r; ++i) {
          auto& acc = ps.row[s * r + i];
          acc = static_cast<float>(b2 * acc + (1.0 - b2) * rsum[i]);
        }
        for (std::size_t j = 0; j < c; ++j) {
          auto& acc = ps.col[s * c + j];
          acc = static_cast<float>(b2 * acc + (1.0 - b2) * csum[j]);
        }
        double row_total = 0.0;
        for (std::size_t i = 0; i < r; ++i) row_total += ps.row[s * r + i];
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const double vhat = static_cast<double>(ps.row[s * r + i]) * ps.col[s * c + j] / row_total;
            u[base + i * c + j] = g[base + i * c + j] / std::sqrt(vhat);
          }
        }
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        const double gv = g[i];
        auto& acc = ps.full[i];
        acc = static_cast<float>(b2 * acc + (1.0 - b2) * (gv * gv + opt.eps1));
        u[i] = gv / std::sqrt(static_cast<double>(acc));
      }
    }

    double uss = 0.0;
    for (double v : u) uss += v * v;
    const double denom = std::max(1.0, std::sqrt(uss / static_cast<double>(n)) / opt.clip_threshold);

    for (std::size_t i = 0; i < n; ++i) {
      auto& m = ps.momentum[i];
      m = static_cast<float>(opt.beta1 * m + (1.0 - opt.beta1) * alpha * (u[i] / denom));
      const double old = data[i];
      data[i] = static_cast<float>(old - m - decay * old);
    }
  }
  return {k, lr, b2};
}

// Classical momentum: m <- momentum * m + g; x <- x - lr * m.
inline StepInfo sgd_momentum_update(OptState& st, const std::vector<NamedTensor<float>>& params, double lr,
                                    double momentum = 0.9) {
  if (st.kind != OptimizerKind::sgd_momentum) throw ConfigError("sgd_momentum_update on non-SGD state");
  check_state_matches(st, params);
  const std::int64_t k = ++st.step;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<float> x = params[pi].second;
    if (!x.has_grad()) continue;
    auto g = x.grad();
    auto data = x.data();
    auto& m = st.slots[pi].momentum;
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = static_cast<float>(momentum * m[i] + g[i]);
      data[i] = static_cast<float>(data[i] - lr * m[i]);
    }
  }
  return {k, lr, 0.0};
}

}  // namespace fcm
