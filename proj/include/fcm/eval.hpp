#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fcm/autodiff.hpp"
#include "fcm/data.hpp"
#include "fcm/error.hpp"
#include "fcm/model.hpp"
#include "fcm/random.hpp"
#include "fcm/task.hpp"
#include "fcm/vocab.hpp"

namespace fcm {

// Anything that maps a token sequence to per-position next-token
// log-probabilities, row-major [ids.size(), vocab_size()].
template <class M>
concept LogProbModel = requires(const M& m, std::span<const std::int32_t> ids) {
  { m.log_probs(ids) } -> std::convertible_to<std::vector<double>>;
  { m.vocab_size() } -> std::convertible_to<std::size_t>;
  { m.context_length() } -> std::convertible_to<std::size_t>;
};

// Plain causal scoring of a trained model. Never applies masking or dropout.
class ModelScorer {
 public:
  ModelScorer(const Params<float>& params, const ModelConfig& cfg) : params_(params), cfg_(cfg) {}

  std::size_t vocab_size() const { return cfg_.vocab_size; }
  std::size_t context_length() const { return cfg_.seq_len; }

  std::vector<float> logits(std::span<const std::int32_t> ids) const {
    Graph<float> g(/*grad_enabled=*/false);
    IdTensor batch({1, ids.size()}, std::vector<std::int32_t>(ids.begin(), ids.end()));
    auto out = forward_logits(g, params_, cfg_, batch);
    return out.values();
  }

  std::vector<double> log_probs(std::span<const std::int32_t> ids) const {
    const auto z = logits(ids);
    const std::size_t v = cfg_.vocab_size;
    std::vector<double> out(z.size());
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const float* row = z.data() + r * v;
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double se = 0.0;
      for (std::size_t j = 0; j < v; ++j) se += std::exp(static_cast<double>(row[j]) - mx);
      const double lse = mx + std::log(se);
      for (std::size_t j = 0; j < v; ++j) out[r * v + j] = static_cast<double>(row[j]) - lse;
    }
    return out;
  }

 private:
  Params<float> params_;
  ModelConfig cfg_;
};

enum class Normalization { none, per_token };

// Sum of log p(continuation token | everything before it).
template <LogProbModel M>
double score_continuation(const M& model, std::span<const std::int32_t> prompt,
                          std::span<const std::int32_t> continuation, Normalization norm = Normalization::none) {
  if (continuation.empty()) return 0.0;
  if (prompt.empty() || prompt[0] != vocab::kBos) throw FormatError("scored prompt must begin with BOS");
  if (prompt.size() + continuation.size() > model.context_length()) {
    throw ContextOverflowError("prompt (" + std::to_string(prompt.size()) + ") + continuation (" +
                               std::to_string(continuation.size()) + ") exceeds context window " +
                               std::to_string(model.context_length()));
  }
  std::vector<std::int32_t> ids(prompt.begin(), prompt.end());
  ids.insert(ids.end(), continuation.begin(), continuation.end() - 1);
  const auto lp = model.log_probs(ids);
  const std::size_t v = model.vocab_size();
  double total = 0.0;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const std::size_t pos = prompt.size() - 1 + i;
    total += lp[pos * v + static_cast<std::size_t>(continuation[i])];
  }
  if (norm == Normalization::per_token) total /= static_cast<double>(continuation.size());
  return total;
}

// k exemplars from the pool (seeded, without replacement), each rendered as
// prompt + answer, joined by blank lines and followed by the query prompt.
template <class R>
std::string assemble_kshot_prompt(const Task& task, std::size_t k, R& rng) {
  if (k > task.fewshot_pool.size()) {
    throw ConfigError("requested " + std::to_string(k) + " shots but the pool holds " +
                      std::to_string(task.fewshot_pool.size()));
  }
  if (k == 0) return task.prompt;
  std::vector<std::size_t> idx(task.fewshot_pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::string out;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& ex = task.fewshot_pool[idx[i]];
    out += ex.prompt + ex.answer + "\n\n";
  }
  return out + task.prompt;
}

inline std::vector<std::int32_t> prompt_ids(const std::string& text) {
  std::vector<std::int32_t> ids{vocab::kBos};
  const auto t = tokenize(text);
  ids.insert(ids.end(), t.begin(), t.end());
  return ids;
}

struct EvalReport {
  std::string task;
  std::size_t k = 0;
  std::string metric;
  double value = 0.0;  // mean over seeds
  std::size_t n_instances = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> per_seed;

  double stddev() const {
    if (per_seed.size() < 2) return 0.0;
    double m = 0.0;
    for (double v : per_seed) m += v;
    m /= static_cast<double>(per_seed.size());
    double ss = 0.0;
    for (double v : per_seed) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(per_seed.size() - 1));
  }
};

struct EvalOptions {
  Normalization norm = Normalization::none;
  std::size_t threads = 1;
};

namespace detail {

// Runs fn(i) for i in [0, n); each index writes only its own result slot.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

// Index of the highest-scoring option; ties go to the lowest index.
template <LogProbModel M>
std::size_t predict_option(const M& model, const std::vector<std::int32_t>& prompt, const Task& task,
                           Normalization norm) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t o = 0; o < task.options.size(); ++o) {
    const auto cont = tokenize(task.options[o]);
    const double s = score_continuation(model, prompt, cont, norm);
    if (s > best_score) {
      best_score = s;
      best = o;
    }
  }
  return best;
}

// Accuracy per seed (the seed only drives few-shot exemplar selection),
// averaged over seeds.
template <LogProbModel M>
EvalReport eval_multiple_choice(const M& model, const std::vector<Task>& tasks, std::size_t k,
                                const std::vector<std::uint64_t>& seeds, const std::string& name = "mc",
                                const EvalOptions& opt = {}) {
  if (seeds.empty()) throw ConfigError("eval_multiple_choice needs at least one seed");
  EvalReport rep{name, k, "accuracy", 0.0, tasks.size(), seeds, {}};
  for (const auto& t : tasks) {
    t.validate();
    if (!t.is_multiple_choice()) throw FormatError("multiple-choice evaluation given a task without options");
  }
  for (auto seed : seeds) {
    auto rng = make_rng(seed, Stream::eval);
    std::vector<std::vector<std::int32_t>> prompts;
    for (const auto& t : tasks) prompts.push_back(prompt_ids(assemble_kshot_prompt(t, k, rng)));
    std::vector<std::size_t> preds(tasks.size());
    detail::parallel_for(tasks.size(), opt.threads,
                         [&](std::size_t i) { preds[i] = predict_option(model, prompts[i], tasks[i], opt.norm); });
    std::size_t correct = 0;
    for (std::size_t i = 0; i < tasks.size(); ++i) correct += preds[i] == *tasks[i].answer_index ? 1 : 0;
    rep.per_seed.push_back(tasks.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(tasks.size()));
  }
  rep.value = std::accumulate(rep.per_seed.begin(), rep.per_seed.end(), 0.0) / static_cast<double>(seeds.size());
  return rep;
}

// Greedy decoding of up to target-length tokens, stopping at EOD.
template <LogProbModel M>
std::string greedy_decode(const M& model, std::vector<std::int32_t> ids, std::size_t max_tokens) {
  const std::size_t v = model.vocab_size();
  std::vector<std::int32_t> generated;
  for (std::size_t step = 0; step < max_tokens; ++step) {
    const auto lp = model.log_probs(ids);
    const double* last = lp.data() + (ids.size() - 1) * v;
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j)
      if (last[j] > last[best]) best = j;
    const auto tok = static_cast<std::int32_t>(best);
    if (tok == vocab::kEod) break;
    generated.push_back(tok);
    ids.push_back(tok);
  }
  return detokenize(generated, /*lenient=*/true);
}

template <LogProbModel M>
EvalReport eval_exact_match(const M& model, const std::vector<Task>& tasks, std::size_t k,
                            const std::vector<std::uint64_t>& seeds = {0}, const std::string& name = "em",
                            const EvalOptions& opt = {}) {
  if (seeds.empty()) throw ConfigError("eval_exact_match needs at least one seed");
  EvalReport rep{name, k, "EM", 0.0, tasks.size(), seeds, {}};
  for (const auto& t : tasks) {
    if (t.is_multiple_choice() || !t.target) throw FormatError("exact-match evaluation given a task without a target");
    if (t.target->empty()) throw FormatError("empty target");
  }
  for (auto seed : seeds) {
    auto rng = make_rng(seed, Stream::eval);
    std::vector<std::vector<std::int32_t>> prompts;
    for (const auto& t : tasks) {
      prompts.push_back(prompt_ids(assemble_kshot_prompt(t, k, rng)));
      const std::size_t need = prompts.back().size() + tokenize(*t.target).size();
      if (need > model.context_length()) {
        throw ContextOverflowError("exact-match prompt plus target (" + std::to_string(need) +
                                   " tokens) exceeds context window " + std::to_string(model.context_length()));
      }
    }
    std::vector<char> hit(tasks.size(), 0);
    detail::parallel_for(tasks.size(), opt.threads, [&](std::size_t i) {
      const auto& target = *tasks[i].target;
      hit[i] = greedy_decode(model, prompts[i], tokenize(target).size()) == target ? 1 : 0;
    });
    const auto n_hit = static_cast<double>(std::count(hit.begin(), hit.end(), 1));
    rep.per_seed.push_back(tasks.empty() ? 0.0 : n_hit / static_cast<double>(tasks.size()));
  }
  rep.value = std::accumulate(rep.per_seed.begin(), rep.per_seed.end(), 0.0) / static_cast<double>(seeds.size());
  return rep;
}

// F1 over binary answer decisions (F1a in MultiRC-style tasks).
inline double f1_binary(std::span<const bool> predicted, std::span<const bool> gold) {
  if (predicted.size() != gold.size()) throw ShapeError("f1_binary: length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predicted[i] && gold[i]) ++tp;
    else if (predicted[i]) ++fp;
    else if (gold[i]) ++fn;
  }
  if (tp == 0) return 0.0;
  const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double r = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * p * r / (p + r);
}

// CSV rows: task,k,seed,metric,value,n. One row per seed plus a "mean" row.
inline void write_report_csv(std::ostream& os, const std::vector<EvalReport>& reports, bool header = true) {
  if (header) os << "task,k,seed,metric,value,n\n";
  os << std::setprecision(6) << std::fixed;
  for (const auto& r : reports) {
    for (std::size_t i = 0; i < r.per_seed.size(); ++i) {
      os << r.task << ',' << r.k << ',' << r.seeds[i] << ',' << r.metric << ',' << r.per_seed[i] << ','
         << r.n_instances << '\n';
    }
    os << r.task << ',' << r.k << ",mean," << r.metric << ',' << r.value << ',' << r.n_instances << '\n';
  }
  os.unsetf(std::ios::floatfield);
}

// One row per task, one column per shot count (zero/one/few-shot layout).
inline std::string format_summary_table(const std::vector<EvalReport>& reports) {
  std::vector<std::size_t> shots;
  std::map<std::string, std::map<std::size_t, const EvalReport*>> rows;
  std::vector<std::string> order;
  for (const auto& r : reports) {
    if (std::find(shots.begin(), shots.end(), r.k) == shots.end()) shots.push_back(r.k);
    const auto key = r.task + " (" + r.metric + ")";
    if (!rows.count(key)) order.push_back(key);
    rows[key][r.k] = &r;
  }
  std::sort(shots.begin(), shots.end());
  auto shot_name = [](std::size_t k) {
    if (k == 0) return std::string("zero-shot");
    if (k == 1) return std::string("one-shot");
    return std::to_string(k) + "-shot";
  };
  std::ostringstream os;
  os << "| task |";
  for (auto k : shots) os << ' ' << shot_name(k) << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < shots.size(); ++i) os << "---|";
  os << '\n';
  os << std::fixed << std::setprecision(1);
  for (const auto& task : order) {
    os << "| " << task << " |";
    for (auto k : shots) {
      auto it = rows[task].find(k);
      if (it == rows[task].end()) {
        os << " - |";
      } else {
        os << ' ' << 100.0 * it->second->value << " |";
      }
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace fcm
