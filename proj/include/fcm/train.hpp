#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fcm/checkpoint.hpp"
#include "fcm/data.hpp"
#include "fcm/error.hpp"
#include "fcm/eval.hpp"
#include "fcm/masking.hpp"
#include "fcm/model.hpp"
#include "fcm/optimizer.hpp"
#include "fcm/random.hpp"

namespace fcm {

enum class RunMode { pretrain, finetune };

struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  MaskConfig mask;
  RunMode mode = RunMode::pretrain;
  OptimizerKind optimizer = OptimizerKind::adafactor;
  LrSchedule lr = LrSchedule::standard();
  double sgd_momentum = 0.9;
  double max_grad_norm = 1.0;
  std::int64_t total_steps = 500;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double dropout = 0.0;
  // Pre-training ignores `dropout` unless this ablation switch is set.
  bool pretrain_dropout_ablation = false;
  // Fine-tuning trains with masking disabled unless this is set.
  bool finetune_fcm = false;
  std::string corpus_path;
  std::string tasks_path;
  std::string ckpt_dir;
  std::string metrics_path;  // defaults to <ckpt_dir>/metrics.csv
  std::int64_t log_interval = 1;
  std::int64_t checkpoint_interval = 0;  // 0: final checkpoint only
  std::size_t eval_shots = 0;
  std::vector<std::uint64_t> eval_seeds = {0, 1, 2};

  double effective_dropout() const {
    if (mode == RunMode::pretrain && !pretrain_dropout_ablation) return 0.0;
    return dropout;
  }

  MaskConfig effective_mask() const {
    if (mode == RunMode::finetune && !finetune_fcm) return MaskConfig::disabled();
    return mask;
  }

  std::string resolved_metrics_path() const {
    if (!metrics_path.empty()) return metrics_path;
    if (ckpt_dir.empty()) return {};
    return (std::filesystem::path(ckpt_dir) / "metrics.csv").string();
  }

  void validate() const {
    model.validate();
    mask.validate();
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
    if (log_interval <= 0) throw ConfigError("log_interval must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (max_grad_norm <= 0.0) throw ConfigError("max_grad_norm must be positive");
  }

  // Desk profile: small model and batch, test default.
  static RunConfig desk_pretrain() { return {}; }

  static RunConfig desk_finetune() {
    RunConfig c;
    c.mode = RunMode::finetune;
    c.lr = LrSchedule::constant(5e-5);
    c.dropout = 0.1;
    c.total_steps = 200;
    return c;
  }

  // Full-scale pre-training: batch 1024 x 1024 tokens, ~180B tokens.
  static RunConfig full_pretrain(const ModelConfig& m = ModelConfig::size_1b()) {
    RunConfig c;
    c.model = m;
    c.batch_size = 1024;
    c.total_steps = 171661;
    c.log_interval = 100;
    c.checkpoint_interval = 10000;
    return c;
  }

  // Full-scale fine-tuning: 20K steps at batch 512, lr 5e-5, dropout 0.1.
  static RunConfig full_finetune(const ModelConfig& m = ModelConfig::size_1b()) {
    RunConfig c = desk_finetune();
    c.model = m;
    c.batch_size = 512;
    c.total_steps = 20000;
    c.log_interval = 100;
    return c;
  }
};

inline const char* to_string(RunMode m) { return m == RunMode::pretrain ? "pretrain" : "finetune"; }

// ---------------------------------------------------------------------------
// Structured text (JSON) config.

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["mode"] = to_string(c.mode);
  j["model"] = {{"n_layers", c.model.n_layers}, {"n_heads", c.model.n_heads},   {"d_model", c.model.d_model},
                {"d_head", c.model.d_head},     {"vocab_size", c.model.vocab_size}, {"seq_len", c.model.seq_len},
                {"d_ff", c.model.d_ff}};
  j["mask"] = {{"ratio_low", c.mask.ratio_low},
               {"ratio_high", c.mask.ratio_high},
               {"variant", to_string(c.mask.variant)},
               {"mask_token_id", c.mask.mask_token_id}};
  j["optimizer"] = to_string(c.optimizer);
  if (c.lr.kind == LrSchedule::Kind::constant) {
    j["lr"] = c.lr.value;
  } else {
    j["lr"] = "schedule";
  }
  j["sgd_momentum"] = c.sgd_momentum;
  j["max_grad_norm"] = c.max_grad_norm;
  j["total_steps"] = c.total_steps;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["dropout"] = c.dropout;
  j["pretrain_dropout_ablation"] = c.pretrain_dropout_ablation;
  j["finetune_fcm"] = c.finetune_fcm;
  j["corpus"] = c.corpus_path;
  j["tasks"] = c.tasks_path;
  j["ckpt_dir"] = c.ckpt_dir;
  j["metrics"] = c.metrics_path;
  j["log_interval"] = c.log_interval;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["eval_shots"] = c.eval_shots;
  j["eval_seeds"] = c.eval_seeds;
  return j;
}

// Starts from the profile matching "mode" and overrides present keys.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  try {
    const auto mode = j.value("mode", std::string("pretrain"));
    RunConfig c = mode == "finetune" ? RunConfig::desk_finetune() : RunConfig::desk_pretrain();
    if (mode != "pretrain" && mode != "finetune") throw ConfigError("unknown mode '" + mode + "'");
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model.n_layers = m.value("n_layers", c.model.n_layers);
      c.model.n_heads = m.value("n_heads", c.model.n_heads);
      c.model.d_model = m.value("d_model", c.model.d_model);
      c.model.d_head = m.value("d_head", c.model.d_head);
      c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
      c.model.seq_len = m.value("seq_len", c.model.seq_len);
      c.model.d_ff = m.value("d_ff", 4 * c.model.d_model);
    }
    if (j.contains("mask")) {
      const auto& m = j.at("mask");
      c.mask.ratio_low = m.value("ratio_low", c.mask.ratio_low);
      c.mask.ratio_high = m.value("ratio_high", c.mask.ratio_high);
      if (m.contains("variant")) c.mask.variant = parse_mask_variant(m.at("variant").get<std::string>());
      c.mask.mask_token_id = m.value("mask_token_id", c.mask.mask_token_id);
    }
    if (j.contains("optimizer")) c.optimizer = parse_optimizer_kind(j.at("optimizer").get<std::string>());
    if (j.contains("lr")) {
      const auto& lr = j.at("lr");
      if (lr.is_string()) {
        if (lr.get<std::string>() != "schedule") throw ConfigError("lr must be a number or \"schedule\"");
        c.lr = LrSchedule::standard();
      } else {
        c.lr = LrSchedule::constant(lr.get<double>());
      }
    }
    c.sgd_momentum = j.value("sgd_momentum", c.sgd_momentum);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.dropout = j.value("dropout", c.dropout);
    c.pretrain_dropout_ablation = j.value("pretrain_dropout_ablation", c.pretrain_dropout_ablation);
    c.finetune_fcm = j.value("finetune_fcm", c.finetune_fcm);
    c.corpus_path = j.value("corpus", c.corpus_path);
    c.tasks_path = j.value("tasks", c.tasks_path);
    c.ckpt_dir = j.value("ckpt_dir", c.ckpt_dir);
    c.metrics_path = j.value("metrics", c.metrics_path);
    c.log_interval = j.value("log_interval", c.log_interval);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.eval_shots = j.value("eval_shots", c.eval_shots);
    if (j.contains("eval_seeds")) c.eval_seeds = j.at("eval_seeds").get<std::vector<std::uint64_t>>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
}

inline RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return run_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Metrics.

struct MetricRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double tokens_per_sec = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,loss,lr,grad_norm,tokens_per_sec";

inline std::string format_metric_row(const MetricRow& r) {
  std::ostringstream os;
  os << r.step << ',' << std::setprecision(9) << r.loss << ',' << r.lr << ',' << r.grad_norm << ','
     << std::setprecision(6) << r.tokens_per_sec;
  return os.str();
}

class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path) {
    if (path.empty()) return;
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw ConfigError("cannot open metrics file " + path);
    if (fresh) out_ << kMetricsHeader << '\n';
  }
  void append(const MetricRow& row) {
    if (out_.is_open()) out_ << format_metric_row(row) << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Training loop.

struct TrainState {
  Params<float> params;
  OptState opt;
  std::int64_t step = 0;
};

struct TrainResult {
  TrainState state;
  std::vector<MetricRow> metrics;  // every step, regardless of log interval
};

// Deterministic batch order: epoch e is a shuffle seeded by (seed, e); the
// final partial batch of each epoch is dropped.
class StepBatcher {
 public:
  StepBatcher(std::span<const PackedSequence> data, std::size_t batch_size, std::uint64_t seed)
      : data_(data), batch_size_(batch_size), seed_(seed) {
    per_epoch_ = data.size() / batch_size;
    if (per_epoch_ == 0) {
      throw ConfigError("corpus yields " + std::to_string(data.size()) + " sequences, fewer than batch size " +
                        std::to_string(batch_size));
    }
  }

  Batch for_step(std::int64_t k) {
    const auto idx = static_cast<std::size_t>(k - 1);
    const std::size_t epoch = idx / per_epoch_;
    if (!order_ || epoch != epoch_) {
      auto rng = make_rng(seed_, Stream::data, epoch);
      BatchIterator it(data_, batch_size_, BatchMode::train, &rng);
      order_.emplace(it.order().begin(), it.order().end());
      epoch_ = epoch;
    }
    const std::size_t begin = (idx % per_epoch_) * batch_size_;
    std::vector<const PackedSequence*> rows;
    for (std::size_t i = begin; i < begin + batch_size_; ++i) rows.push_back(&data_[(*order_)[i]]);
    return collate(rows);
  }

 private:
  std::span<const PackedSequence> data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t per_epoch_ = 0;
  std::size_t epoch_ = 0;
  std::optional<std::vector<std::size_t>> order_;
};

inline std::string checkpoint_path(const std::string& dir, std::int64_t step) {
  std::ostringstream name;
  name << "ckpt_" << std::setw(8) << std::setfill('0') << step << ".bin";
  return (std::filesystem::path(dir) / name.str()).string();
}

// Highest-step checkpoint in dir, if any.
inline std::optional<std::string> latest_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  if (dir.empty() || !fs::is_directory(dir)) return std::nullopt;
  std::optional<std::string> best;
  const std::regex pattern("ckpt_[0-9]{8}\\.bin");
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (std::regex_match(name, pattern) && (!best || name > fs::path(*best).filename().string())) {
      best = e.path().string();
    }
  }
  return best;
}

namespace detail {

[[noreturn]] inline void abort_non_finite(const RunConfig& cfg, std::int64_t step, double loss, const Batch& batch) {
  std::ostringstream dump;
  dump << "non-finite loss " << loss << " at step " << step << "\n";
  for (std::size_t r = 0; r < batch.size(); ++r) {
    dump << "seq " << r << ": " << detokenize(batch.ids.row(r), /*lenient=*/true) << "\n";
  }
  std::string where;
  if (!cfg.ckpt_dir.empty()) {
    where = (std::filesystem::path(cfg.ckpt_dir) / ("nonfinite_step_" + std::to_string(step) + ".txt")).string();
    std::ofstream(where) << dump.str();
  }
  throw NumericError("non-finite loss at step " + std::to_string(step) +
                     (where.empty() ? std::string() : " (batch dumped to " + where + ")") + "\n" + dump.str());
}

}  // namespace detail

inline TrainState fresh_train_state(const RunConfig& cfg) {
  auto init_rng = make_rng(cfg.seed, Stream::init);
  TrainState st;
  st.params = init_params<float>(cfg.model, init_rng);
  st.opt = init_opt_state(cfg.optimizer, st.params.named());
  return st;
}

// One optimizer step on one batch. Returns the metric row (without timing).
inline MetricRow train_step(const RunConfig& cfg, TrainState& st, const Batch& batch) {
  const std::int64_t k = st.step + 1;
  auto mask_rng = make_rng(cfg.seed, Stream::mask, static_cast<std::uint64_t>(k));
  auto dropout_rng = make_rng(cfg.seed, Stream::dropout, static_cast<std::uint64_t>(k));
  ForwardOptions fopt{cfg.effective_dropout(), &dropout_rng};

  Graph<float> g;
  auto loss = fcm_loss(g, st.params, cfg.model, batch, cfg.effective_mask(), mask_rng, fopt);
  const double loss_value = loss.item();
  if (!std::isfinite(loss_value)) detail::abort_non_finite(cfg, k, loss_value, batch);

  st.params.zero_grad();
  g.backward(loss);
  auto named = st.params.named();
  const double norm = clip_global_norm(grad_spans(named), cfg.max_grad_norm);

  StepInfo info;
  if (cfg.optimizer == OptimizerKind::adafactor) {
    AdafactorOptions aopt;
    aopt.lr = cfg.lr;
    info = adafactor_update(st.opt, named, aopt);
  } else {
    const double lr = cfg.lr.at(st.opt.step + 1);
    info = sgd_momentum_update(st.opt, named, lr, cfg.sgd_momentum);
  }
  st.step = k;
  return {k, loss_value, info.lr, norm, 0.0};
}

// Trains from `state` up to cfg.total_steps. Writes the metrics CSV and
// checkpoints when cfg.ckpt_dir / metrics path are set.
inline TrainResult train_from(const RunConfig& cfg, std::span<const PackedSequence> data, TrainState state,
                              const std::function<void(const MetricRow&)>& on_log = {}) {
  cfg.validate();
  if (!cfg.ckpt_dir.empty()) std::filesystem::create_directories(cfg.ckpt_dir);
  MetricsLog log(cfg.resolved_metrics_path());
  TrainResult result;
  if (state.step < cfg.total_steps) {
    StepBatcher batcher(data, cfg.batch_size, cfg.seed);
    while (state.step < cfg.total_steps) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto batch = batcher.for_step(state.step + 1);
      auto row = train_step(cfg, state, batch);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      row.tokens_per_sec = secs > 0 ? static_cast<double>(batch.ids.numel()) / secs : 0.0;
      result.metrics.push_back(row);
      if (row.step % cfg.log_interval == 0 || row.step == cfg.total_steps) {
        log.append(row);
        if (on_log) on_log(row);
      }
      if (!cfg.ckpt_dir.empty() && cfg.checkpoint_interval > 0 && row.step % cfg.checkpoint_interval == 0) {
        save_checkpoint(state.params, state.opt, cfg.model, state.step, checkpoint_path(cfg.ckpt_dir, state.step));
      }
    }
  }
  if (!cfg.ckpt_dir.empty()) {
    save_checkpoint(state.params, state.opt, cfg.model, state.step, checkpoint_path(cfg.ckpt_dir, state.step));
  }
  result.state = std::move(state);
  return result;
}

inline TrainState state_from_checkpoint(const Checkpoint& ck) { return {ck.params, ck.opt, ck.step}; }

// Pre-training entry point. Resumes when `resume_from` is given.
inline TrainResult run_training(const RunConfig& cfg, std::span<const PackedSequence> data,
                                const std::optional<Checkpoint>& resume_from = std::nullopt,
                                const std::function<void(const MetricRow&)>& on_log = {}) {
  cfg.validate();
  TrainState st;
  if (resume_from) {
    if (!resume_from->config.same_architecture(cfg.model)) {
      throw ConfigError("resume checkpoint was written for a different model config");
    }
    st = state_from_checkpoint(*resume_from);
  } else {
    st = fresh_train_state(cfg);
  }
  return train_from(cfg, data, std::move(st), on_log);
}

inline TrainResult run_training(const RunConfig& cfg, const std::optional<Checkpoint>& resume_from = std::nullopt,
                                const std::function<void(const MetricRow&)>& on_log = {}) {
  if (cfg.corpus_path.empty()) throw ConfigError("pretrain needs a corpus path");
  const auto data = pack_texts(read_corpus(cfg.corpus_path), cfg.model.seq_len);
  return run_training(cfg, data, resume_from, on_log);
}

// ---------------------------------------------------------------------------
// Fine-tuning.

// Task-formatted text: the prompt followed by its gold answer.
inline std::vector<std::string> task_documents(const std::vector<Task>& tasks) {
  std::vector<std::string> docs;
  for (const auto& t : tasks) {
    t.validate();
    docs.push_back(t.prompt + (t.is_multiple_choice() ? t.options[*t.answer_index] : *t.target));
  }
  return docs;
}

struct FinetuneResult {
  TrainResult train;
  std::vector<EvalReport> reports;
};

inline std::vector<EvalReport> evaluate_tasks(const Params<float>& params, const ModelConfig& cfg,
                                              const std::vector<Task>& tasks, std::size_t k,
                                              const std::vector<std::uint64_t>& seeds, const std::string& name) {
  std::vector<Task> mc, em;
  for (const auto& t : tasks) (t.is_multiple_choice() ? mc : em).push_back(t);
  ModelScorer scorer(params, cfg);
  std::vector<EvalReport> out;
  if (!mc.empty()) out.push_back(eval_multiple_choice(scorer, mc, k, seeds, name));
  if (!em.empty()) out.push_back(eval_exact_match(scorer, em, k, seeds, name));
  return out;
}

// Causal-LM fine-tuning from a pre-trained checkpoint. The optimizer state is
// re-initialized on the first step, so zero steps leave the checkpoint as is.
inline FinetuneResult run_finetune(const RunConfig& cfg, const Checkpoint& init, std::span<const PackedSequence> data,
                                   const std::vector<Task>& eval_tasks = {},
                                   const std::function<void(const MetricRow&)>& on_log = {}) {
  cfg.validate();
  if (cfg.mode != RunMode::finetune) throw ConfigError("run_finetune needs mode = finetune");
  if (!init.config.same_architecture(cfg.model)) {
    throw ConfigError("config mismatch: checkpoint model config differs from the fine-tuning config");
  }
  TrainState st = state_from_checkpoint(init);
  FinetuneResult out;
  if (cfg.total_steps > 0) {
    st.params = init.params.clone();
    st.opt = init_opt_state(cfg.optimizer, st.params.named());
    st.step = 0;
    out.train = train_from(cfg, data, std::move(st), on_log);
  } else {
    out.train.state = std::move(st);
    if (!cfg.ckpt_dir.empty()) {
      std::filesystem::create_directories(cfg.ckpt_dir);
      save_checkpoint(init.params, init.opt, init.config, init.step, checkpoint_path(cfg.ckpt_dir, init.step));
    }
  }
  if (!eval_tasks.empty()) {
    out.reports = evaluate_tasks(out.train.state.params, cfg.model, eval_tasks, cfg.eval_shots, cfg.eval_seeds,
                                 "finetune");
  }
  return out;
}

}  // namespace fcm
