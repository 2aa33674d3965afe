#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fcm/fcm.hpp"

namespace {

struct Overrides {
  std::string config, profile = "desk", resume;
  std::optional<double> mask_low, mask_high, dropout, lr;
  std::optional<std::string> mask_variant, optimizer, corpus, ckpt_dir, metrics, tasks;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps, log_interval, ckpt_interval;
  std::optional<std::size_t> batch_size, seq_len, layers, heads, d_model, d_head, shots;
  bool dropout_ablation = false, finetune_fcm = false;
};

void add_run_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "JSON run config");
  app->add_option("--profile", o.profile, "desk or full (base for unspecified values)")
      ->check(CLI::IsMember({"desk", "full"}));
  app->add_option("--mask-low", o.mask_low, "lower bound of the mask ratio");
  app->add_option("--mask-high", o.mask_high, "upper bound of the mask ratio");
  app->add_option("--mask-variant", o.mask_variant, "attention | token | none");
  app->add_option("--dropout", o.dropout, "dropout rate");
  app->add_option("--lr", o.lr, "constant learning rate (default: standard schedule)");
  app->add_option("--optimizer", o.optimizer, "adafactor | sgd_momentum");
  app->add_option("--seed", o.seed);
  app->add_option("--steps", o.steps, "total optimizer steps");
  app->add_option("--batch-size", o.batch_size);
  app->add_option("--seq-len", o.seq_len);
  app->add_option("--layers", o.layers);
  app->add_option("--heads", o.heads);
  app->add_option("--d-model", o.d_model);
  app->add_option("--d-head", o.d_head);
  app->add_option("--corpus", o.corpus, "text file (one document per line) or directory of .txt files");
  app->add_option("--ckpt-dir", o.ckpt_dir);
  app->add_option("--metrics", o.metrics, "metrics CSV (default <ckpt-dir>/metrics.csv)");
  app->add_option("--log-interval", o.log_interval);
  app->add_option("--checkpoint-interval", o.ckpt_interval);
}

fcm::RunConfig build_config(const Overrides& o, fcm::RunMode mode) {
  fcm::RunConfig c;
  if (!o.config.empty()) {
    c = fcm::read_run_config(o.config);
  } else if (o.profile == "full") {
    c = mode == fcm::RunMode::pretrain ? fcm::RunConfig::full_pretrain() : fcm::RunConfig::full_finetune();
  } else {
    c = mode == fcm::RunMode::pretrain ? fcm::RunConfig::desk_pretrain() : fcm::RunConfig::desk_finetune();
  }
  c.mode = mode;
  if (o.mask_low) c.mask.ratio_low = *o.mask_low;
  if (o.mask_high) c.mask.ratio_high = *o.mask_high;
  if (o.mask_variant) c.mask.variant = fcm::parse_mask_variant(*o.mask_variant);
  if (o.dropout) c.dropout = *o.dropout;
  if (o.lr) c.lr = fcm::LrSchedule::constant(*o.lr);
  if (o.optimizer) c.optimizer = fcm::parse_optimizer_kind(*o.optimizer);
  if (o.seed) c.seed = *o.seed;
  if (o.steps) c.total_steps = *o.steps;
  if (o.batch_size) c.batch_size = *o.batch_size;
  if (o.seq_len) c.model.seq_len = *o.seq_len;
  if (o.layers) c.model.n_layers = *o.layers;
  if (o.heads) c.model.n_heads = *o.heads;
  if (o.d_model) {
    c.model.d_model = *o.d_model;
    c.model.d_ff = 4 * *o.d_model;
  }
  if (o.d_head) c.model.d_head = *o.d_head;
  if (o.corpus) c.corpus_path = *o.corpus;
  if (o.ckpt_dir) c.ckpt_dir = *o.ckpt_dir;
  if (o.metrics) c.metrics_path = *o.metrics;
  if (o.tasks) c.tasks_path = *o.tasks;
  if (o.log_interval) c.log_interval = *o.log_interval;
  if (o.ckpt_interval) c.checkpoint_interval = *o.ckpt_interval;
  if (o.shots) c.eval_shots = *o.shots;
  if (o.dropout_ablation) c.pretrain_dropout_ablation = true;
  if (o.finetune_fcm) c.finetune_fcm = true;
  c.validate();
  return c;
}

void print_row(const fcm::MetricRow& r) {
  std::printf("step %lld  loss %.4f  lr %.3g  grad_norm %.3f  tok/s %.0f\n", static_cast<long long>(r.step), r.loss,
              r.lr, r.grad_norm, r.tokens_per_sec);
  std::fflush(stdout);
}

int cmd_pretrain(const Overrides& o) {
  auto cfg = build_config(o, fcm::RunMode::pretrain);
  std::optional<fcm::Checkpoint> resume;
  if (!o.resume.empty()) {
    std::string path = o.resume;
    if (path == "latest") {
      auto found = fcm::latest_checkpoint(cfg.ckpt_dir);
      if (!found) throw fcm::ConfigError("--resume latest: no checkpoint in '" + cfg.ckpt_dir + "'");
      path = *found;
    }
    resume = fcm::load_checkpoint(path, &cfg.model);
    std::printf("resuming from %s at step %lld\n", path.c_str(), static_cast<long long>(resume->step));
  }
  std::printf("model: %zu params (%zu non-embedding)\n", fcm::count_params(cfg.model),
              fcm::count_non_embedding_params(cfg.model));
  auto res = fcm::run_training(cfg, resume, print_row);
  if (!res.metrics.empty()) std::printf("final loss %.4f at step %lld\n", res.metrics.back().loss,
                                        static_cast<long long>(res.state.step));
  return 0;
}

int cmd_finetune(const Overrides& o, const std::string& init_path, const std::string& train_tasks) {
  auto cfg = build_config(o, fcm::RunMode::finetune);
  const auto init = fcm::load_checkpoint(init_path);
  std::vector<std::string> docs;
  if (!cfg.corpus_path.empty()) docs = fcm::read_corpus(cfg.corpus_path);
  if (!train_tasks.empty()) {
    auto more = fcm::task_documents(fcm::read_tasks(train_tasks));
    docs.insert(docs.end(), more.begin(), more.end());
  }
  if (docs.empty() && cfg.total_steps > 0) throw fcm::ConfigError("finetune needs --corpus or --train-tasks");
  const auto data = fcm::pack_texts(docs, cfg.model.seq_len);
  std::vector<fcm::Task> eval_tasks;
  if (!cfg.tasks_path.empty()) eval_tasks = fcm::read_tasks(cfg.tasks_path);
  auto res = fcm::run_finetune(cfg, init, data, eval_tasks, print_row);
  if (!res.reports.empty()) std::cout << fcm::format_summary_table(res.reports);
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  if (out.empty()) throw fcm::ConfigError("--seeds needs at least one seed");
  return out;
}

int cmd_eval(const std::string& ckpt, const std::vector<std::string>& task_files, std::size_t shots,
             const std::string& seeds, const std::string& out, bool per_token, std::size_t threads) {
  const auto ck = fcm::load_checkpoint(ckpt);
  fcm::ModelScorer scorer(ck.params, ck.config);
  fcm::EvalOptions opt;
  opt.norm = per_token ? fcm::Normalization::per_token : fcm::Normalization::none;
  opt.threads = threads;
  const auto seed_list = parse_seeds(seeds);
  std::vector<fcm::EvalReport> reports;
  for (const auto& file : task_files) {
    const auto tasks = fcm::read_tasks(file);
    std::vector<fcm::Task> mc, em;
    for (const auto& t : tasks) (t.is_multiple_choice() ? mc : em).push_back(t);
    const auto name = std::filesystem::path(file).stem().string();
    if (!mc.empty()) reports.push_back(fcm::eval_multiple_choice(scorer, mc, shots, seed_list, name, opt));
    if (!em.empty()) reports.push_back(fcm::eval_exact_match(scorer, em, shots, seed_list, name, opt));
  }
  std::cout << fcm::format_summary_table(reports);
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw fcm::ConfigError("cannot write " + out);
    fcm::write_report_csv(f, reports);
  }
  return 0;
}

int cmd_synth(const std::string& kind, std::size_t n_docs, std::uint64_t seed, const std::string& out_dir) {
  auto rng = fcm::make_rng(seed, fcm::Stream::synth);
  const auto corpus = fcm::synth_corpus(fcm::parse_synth_kind(kind), n_docs, rng);
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  fcm::write_corpus((dir / "train.txt").string(), corpus.train_docs);
  fcm::write_tasks((dir / "mc.jsonl").string(), corpus.mc_tasks);
  fcm::write_tasks((dir / "em.jsonl").string(), corpus.em_tasks);
  std::printf("wrote %zu training docs, %zu multiple-choice and %zu exact-match tasks to %s\n",
              corpus.train_docs.size(), corpus.mc_tasks.size(), corpus.em_tasks.size(), out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fcm: forgetful causal masking pre-training, fine-tuning and evaluation"};
  app.require_subcommand(1);

  Overrides pre;
  auto* pretrain = app.add_subcommand("pretrain", "pre-train a model on a text corpus");
  add_run_flags(pretrain, pre);
  pretrain->add_option("--resume", pre.resume, "checkpoint file, or 'latest' in --ckpt-dir");
  pretrain->add_flag("--dropout-ablation", pre.dropout_ablation, "apply --dropout during pre-training");

  Overrides ft;
  std::string init_path, train_tasks;
  auto* finetune = app.add_subcommand("finetune", "fine-tune a pre-trained checkpoint");
  add_run_flags(finetune, ft);
  finetune->add_option("--init", init_path, "pre-trained checkpoint")->required();
  finetune->add_option("--train-tasks", train_tasks, "JSONL tasks rendered as training text");
  finetune->add_option("--tasks", ft.tasks, "JSONL tasks evaluated after training");
  finetune->add_option("--shots", ft.shots, "k for post-training evaluation");
  finetune->add_flag("--fcm", ft.finetune_fcm, "keep masking on while fine-tuning");

  std::string ckpt, seeds = "0", out;
  std::vector<std::string> task_files;
  std::size_t shots = 0, threads = 1;
  bool per_token = false;
  auto* eval = app.add_subcommand("eval", "zero/few-shot evaluation of a checkpoint");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--tasks", task_files, "JSONL task files")->required();
  eval->add_option("--shots", shots, "number of in-context exemplars");
  eval->add_option("--seeds", seeds, "comma-separated exemplar seeds");
  eval->add_option("--out", out, "CSV report path");
  eval->add_option("--threads", threads);
  eval->add_flag("--per-token", per_token, "length-normalize option scores");

  std::string synth_kind = "arithmetic", synth_out;
  std::size_t n_docs = 2000;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "write a synthetic corpus and benchmark");
  synth->add_option("--kind", synth_kind, "copy | reverse | arithmetic");
  synth->add_option("--n-docs", n_docs);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--out-dir", synth_out)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pretrain) return cmd_pretrain(pre);
    if (*finetune) return cmd_finetune(ft, init_path, train_tasks);
    if (*eval) return cmd_eval(ckpt, task_files, shots, seeds, out, per_token, threads);
    if (*synth) return cmd_synth(synth_kind, n_docs, synth_seed, synth_out);
  } catch (const fcm::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
