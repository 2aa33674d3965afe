#pragma once

#include <cstdint>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fcm/autodiff.hpp"
#include "fcm/error.hpp"
#include "fcm/tensor.hpp"
#include "fcm/vocab.hpp"

namespace fcm {

enum class MaskVariant { attention, token, none };

inline std::string to_string(MaskVariant v) {
  switch (v) {
    case MaskVariant::attention: return "attention";
    case MaskVariant::token: return "token";
    case MaskVariant::none: return "none";
  }
  return "none";
}

inline MaskVariant parse_mask_variant(std::string_view s) {
  if (s == "attention") return MaskVariant::attention;
  if (s == "token") return MaskVariant::token;
  if (s == "none") return MaskVariant::none;
  throw ConfigError("unknown mask variant '" + std::string(s) + "'");
}

struct MaskConfig {
  double ratio_low = 0.0;
  double ratio_high = 0.15;
  MaskVariant variant = MaskVariant::attention;
  std::int32_t mask_token_id = vocab::kMask;

  void validate() const {
    if (!(ratio_low >= 0.0 && ratio_low <= ratio_high && ratio_high <= 1.0)) {
      std::ostringstream os;
      os << "mask ratio range must satisfy 0 <= low <= high <= 1, got (" << ratio_low << ", "
         << ratio_high << ")";
      throw ConfigError(os.str());
    }
  }

  static MaskConfig disabled() { return {0.0, 0.0, MaskVariant::none, vocab::kMask}; }
};

// Which key columns of one sequence are visible. keep[0] is the BOS slot and
// is always true.
struct MaskPlan {
  std::vector<bool> keep;
  double sampled_ratio = 0.0;
  MaskVariant variant = MaskVariant::attention;

  std::size_t size() const { return keep.size(); }
  std::size_t masked_count() const {
    std::size_t n = 0;
    for (bool k : keep) n += k ? 0 : 1;
    return n;
  }

  static MaskPlan keep_all(std::size_t seq_len, MaskVariant variant = MaskVariant::attention) {
    return {std::vector<bool>(seq_len, true), 0.0, variant};
  }

  bool operator==(const MaskPlan&) const = default;
};

// Draws r ~ U(low, high) once, then hides each non-BOS position with
// probability r. One uniform is consumed per non-BOS position regardless of r.
template <class Rng>
MaskPlan sample_mask_plan(std::size_t seq_len, const MaskConfig& cfg, Rng& rng) {
  cfg.validate();
  if (seq_len == 0) throw ConfigError("sample_mask_plan: seq_len must be >= 1");
  MaskPlan plan;
  plan.variant = cfg.variant;
  if (cfg.ratio_low == cfg.ratio_high) {
    plan.sampled_ratio = cfg.ratio_low;
  } else {
    std::uniform_real_distribution<double> ratio(cfg.ratio_low, cfg.ratio_high);
    plan.sampled_ratio = ratio(rng);
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  plan.keep.assign(seq_len, true);
  for (std::size_t j = 1; j < seq_len; ++j) plan.keep[j] = !(unif(rng) < plan.sampled_ratio);
  return plan;
}

// Square [seq, seq] additive bias, row = query, column = key.
struct AttentionBias {
  std::size_t size = 0;
  std::vector<float> values;

  float at(std::size_t q, std::size_t k) const { return values[q * size + k]; }
  bool visible(std::size_t q, std::size_t k) const { return at(q, k) == 0.0f; }
};

inline AttentionBias causal_bias(std::size_t seq_len) {
  AttentionBias bias{seq_len, std::vector<float>(seq_len * seq_len, kMaskSentinel)};
  for (std::size_t q = 0; q < seq_len; ++q)
    for (std::size_t k = 0; k <= q; ++k) bias.values[q * seq_len + k] = 0.0f;
  return bias;
}

// A hidden key column is invisible to every query, its own included.
inline AttentionBias build_attention_bias(const MaskPlan& plan) {
  const std::size_t s = plan.size();
  AttentionBias bias{s, std::vector<float>(s * s, kMaskSentinel)};
  for (std::size_t q = 0; q < s; ++q)
    for (std::size_t k = 0; k <= q; ++k)
      if (plan.keep[k]) bias.values[q * s + k] = 0.0f;
  return bias;
}

inline std::vector<std::int32_t> apply_token_mask(std::span<const std::int32_t> ids,
                                                  const MaskPlan& plan,
                                                  std::int32_t mask_token_id) {
  if (ids.size() != plan.size()) throw ShapeError("apply_token_mask: ids and plan lengths differ");
  std::vector<std::int32_t> out(ids.begin(), ids.end());
  for (std::size_t j = 0; j < out.size(); ++j)
    if (!plan.keep[j]) out[j] = mask_token_id;
  return out;
}

// Debug line: "<ratio> <bitstring>", 1 = visible.
inline std::string to_debug_string(const MaskPlan& plan) {
  std::ostringstream os;
  os << std::setprecision(17) << plan.sampled_ratio << ' ';
  for (bool k : plan.keep) os << (k ? '1' : '0');
  return os.str();
}

inline MaskPlan parse_debug_string(std::string_view line, MaskVariant variant = MaskVariant::attention) {
  std::istringstream is{std::string(line)};
  MaskPlan plan;
  std::string bits;
  if (!(is >> plan.sampled_ratio >> bits)) throw FormatError("malformed mask plan line");
  plan.variant = variant;
  for (char c : bits) {
    if (c != '0' && c != '1') throw FormatError("mask plan bitstring must contain only 0/1");
    plan.keep.push_back(c == '1');
  }
  if (plan.keep.empty() || !plan.keep[0]) throw FormatError("mask plan must keep position 0");
  return plan;
}

}  // namespace fcm
