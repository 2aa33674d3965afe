#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fcm/error.hpp"
#include "fcm/random.hpp"
#include "fcm/task.hpp"
#include "fcm/tensor.hpp"
#include "fcm/vocab.hpp"

namespace fcm {

using TokenIds = std::vector<std::int32_t>;

inline TokenIds tokenize(std::string_view text) {
  TokenIds ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
  return ids;
}

inline std::string special_placeholder(std::int32_t id) {
  switch (id) {
    case vocab::kBos: return "<bos>";
    case vocab::kEod: return "<eod>";
    case vocab::kMask: return "<mask>";
    case vocab::kPad: return "<pad>";
    default: return "<unk>";
  }
}

// Lenient mode renders specials as placeholders instead of throwing.
inline std::string detokenize(std::span<const std::int32_t> ids, bool lenient = false) {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else if (lenient) {
      out += special_placeholder(id);
    } else {
      throw IndexError("cannot detokenize special or invalid id " + std::to_string(id));
    }
  }
  return out;
}

struct PackedSequence {
  TokenIds ids;
  std::vector<float> loss_weights;  // size ids.size() - 1; weight of target ids[t + 1]
};

// Concatenates docs separated by EOD and cuts the stream into windows of
// seq_len - 1 tokens, each prefixed with BOS. The last window is PAD-filled.
inline std::vector<PackedSequence> pack_corpus(const std::vector<TokenIds>& docs, std::size_t seq_len) {
  if (seq_len < 2) throw ConfigError("pack_corpus: seq_len must be >= 2");
  if (docs.empty()) throw FormatError("pack_corpus: empty corpus");
  TokenIds stream;
  for (const auto& doc : docs) {
    stream.insert(stream.end(), doc.begin(), doc.end());
    stream.push_back(vocab::kEod);
  }
  const std::size_t window = seq_len - 1;
  std::vector<PackedSequence> out;
  for (std::size_t start = 0; start < stream.size(); start += window) {
    PackedSequence seq;
    seq.ids.reserve(seq_len);
    seq.ids.push_back(vocab::kBos);
    const std::size_t end = std::min(stream.size(), start + window);
    seq.ids.insert(seq.ids.end(), stream.begin() + static_cast<std::ptrdiff_t>(start),
                   stream.begin() + static_cast<std::ptrdiff_t>(end));
    seq.ids.resize(seq_len, vocab::kPad);
    seq.loss_weights.resize(seq_len - 1);
    for (std::size_t t = 0; t + 1 < seq_len; ++t) {
      seq.loss_weights[t] = seq.ids[t + 1] == vocab::kPad ? 0.0f : 1.0f;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

inline std::vector<PackedSequence> pack_texts(const std::vector<std::string>& docs, std::size_t seq_len) {
  std::vector<TokenIds> ids;
  ids.reserve(docs.size());
  for (const auto& d : docs) ids.push_back(tokenize(d));
  return pack_corpus(ids, seq_len);
}

struct Batch {
  IdTensor ids;                     // [batch, seq]
  std::vector<float> loss_weights;  // [batch, seq - 1]

  std::size_t size() const { return ids.shape.at(0); }
  std::size_t seq_len() const { return ids.shape.at(1); }
};

inline Batch collate(std::span<const PackedSequence* const> rows) {
  if (rows.empty()) throw ConfigError("collate: empty batch");
  const std::size_t s = rows.front()->ids.size();
  Batch batch;
  std::vector<std::int32_t> ids;
  ids.reserve(rows.size() * s);
  for (const auto* row : rows) {
    if (row->ids.size() != s) throw ShapeError("collate: sequences of different lengths");
    ids.insert(ids.end(), row->ids.begin(), row->ids.end());
    batch.loss_weights.insert(batch.loss_weights.end(), row->loss_weights.begin(), row->loss_weights.end());
  }
  batch.ids = IdTensor({rows.size(), s}, std::move(ids));
  return batch;
}

enum class BatchMode { train, eval };

// Train mode drops the final partial batch; eval mode keeps it.
class BatchIterator {
 public:
  BatchIterator(std::span<const PackedSequence> sequences, std::size_t batch_size, BatchMode mode,
                Rng* shuffle_rng = nullptr)
      : sequences_(sequences), batch_size_(batch_size), mode_(mode), order_(sequences.size()) {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (shuffle_rng) std::shuffle(order_.begin(), order_.end(), *shuffle_rng);
  }

  std::size_t num_batches() const {
    const std::size_t full = order_.size() / batch_size_;
    return mode_ == BatchMode::train || order_.size() % batch_size_ == 0 ? full : full + 1;
  }

  std::optional<Batch> next() {
    if (cursor_ >= num_batches()) return std::nullopt;
    const std::size_t begin = cursor_ * batch_size_;
    const std::size_t end = std::min(order_.size(), begin + batch_size_);
    ++cursor_;
    std::vector<const PackedSequence*> rows;
    for (std::size_t i = begin; i < end; ++i) rows.push_back(&sequences_[order_[i]]);
    return collate(rows);
  }

  std::span<const std::size_t> order() const { return order_; }

 private:
  std::span<const PackedSequence> sequences_;
  std::size_t batch_size_;
  BatchMode mode_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

inline BatchIterator make_batches(std::span<const PackedSequence> sequences, std::size_t batch_size,
                                  Rng* rng, bool shuffle, BatchMode mode = BatchMode::train) {
  return BatchIterator(sequences, batch_size, mode, shuffle ? rng : nullptr);
}

// Corpus input: a text file with one document per line, or a directory whose
// .txt files are one document each (sorted by file name).
inline std::vector<std::string> read_corpus(const std::string& path) {
  namespace fs = std::filesystem;
  std::vector<std::string> docs;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f, std::ios::binary);
      std::ostringstream ss;
      ss << in.rdbuf();
      docs.push_back(ss.str());
    }
  } else {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open corpus " + path);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) docs.push_back(line);
    }
  }
  if (docs.empty()) throw FormatError("corpus " + path + " contains no documents");
  return docs;
}

inline void write_corpus(const std::string& path, const std::vector<std::string>& docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write corpus " + path);
  for (const auto& d : docs) out << d << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic corpora with paired evaluation tasks.

enum class SynthKind { copy, reverse, arithmetic };

inline SynthKind parse_synth_kind(std::string_view s) {
  if (s == "copy") return SynthKind::copy;
  if (s == "reverse") return SynthKind::reverse;
  if (s == "arithmetic") return SynthKind::arithmetic;
  throw ConfigError("unknown synthetic corpus kind '" + std::string(s) + "'");
}

struct SynthOptions {
  std::size_t n_eval = 100;
  std::size_t pool_size = 8;
  std::size_t min_len = 3;  // copy/reverse string length range
  std::size_t max_len = 6;
  int max_operand = 49;  // arithmetic operands drawn from [1, max_operand]
};

struct SynthInstance {
  std::string prompt;
  std::string answer;
  std::string text() const { return prompt + answer; }
};

struct SynthCorpus {
  std::vector<std::string> train_docs;
  std::vector<SynthInstance> train_instances;
  std::vector<Task> mc_tasks;
  std::vector<Task> em_tasks;
};

namespace detail {

template <class R>
std::string random_word(R& rng, std::size_t min_len, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> letter(0, 25);
  std::string w(len(rng), 'a');
  for (auto& c : w) c = static_cast<char>('a' + letter(rng));
  return w;
}

template <class R>
SynthInstance draw_instance(SynthKind kind, R& rng, const SynthOptions& opt) {
  switch (kind) {
    case SynthKind::copy: {
      auto w = random_word(rng, opt.min_len, opt.max_len);
      return {w + "|", w};
    }
    case SynthKind::reverse: {
      auto w = random_word(rng, opt.min_len, opt.max_len);
      return {w + "|", std::string(w.rbegin(), w.rend())};
    }
    case SynthKind::arithmetic: {
      std::uniform_int_distribution<int> operand(1, opt.max_operand);
      const int a = operand(rng), b = operand(rng);
      return {std::to_string(a) + "+" + std::to_string(b) + "=", std::to_string(a + b)};
    }
  }
  throw ConfigError("unknown synthetic kind");
}

inline double instance_space(SynthKind kind, const SynthOptions& opt) {
  if (kind == SynthKind::arithmetic) return static_cast<double>(opt.max_operand) * opt.max_operand;
  double total = 0.0;
  for (std::size_t l = opt.min_len; l <= opt.max_len; ++l) total += std::pow(26.0, static_cast<double>(l));
  return total;
}

template <class R>
std::vector<std::string> distractors(SynthKind kind, const SynthInstance& inst, R& rng) {
  if (kind == SynthKind::arithmetic) {
    const int sum = std::stoi(inst.answer);
    return {std::to_string(sum - 1), std::to_string(sum + 1)};
  }
  std::vector<std::string> out;
  std::uniform_int_distribution<int> letter(0, 25);
  while (out.size() < 2) {
    std::string d = inst.answer;
    std::uniform_int_distribution<std::size_t> pos(0, d.size() - 1);
    const auto p = pos(rng);
    d[p] = static_cast<char>('a' + (d[p] - 'a' + 1 + letter(rng) % 25) % 26);
    if (d != inst.answer && std::find(out.begin(), out.end(), d) == out.end()) out.push_back(d);
  }
  return out;
}

}  // namespace detail

// Held-out evaluation instances are drawn first; training documents never
// repeat an evaluation prompt. Multiple-choice options are shuffled, with the
// answer_index tracking the correct one.
template <class R>
SynthCorpus synth_corpus(SynthKind kind, std::size_t n_docs, R& rng, const SynthOptions& opt = {}) {
  if (static_cast<double>(n_docs + opt.n_eval) > 0.9 * detail::instance_space(kind, opt)) {
    throw ConfigError("synth_corpus: requested more distinct instances than the task space allows");
  }
  if (opt.pool_size > n_docs) throw ConfigError("synth_corpus: few-shot pool larger than training set");
  std::set<std::string> seen;
  std::vector<SynthInstance> eval;
  while (eval.size() < opt.n_eval) {
    auto inst = detail::draw_instance(kind, rng, opt);
    if (seen.insert(inst.prompt).second) eval.push_back(std::move(inst));
  }
  SynthCorpus corpus;
  while (corpus.train_instances.size() < n_docs) {
    auto inst = detail::draw_instance(kind, rng, opt);
    if (seen.insert(inst.prompt).second) {
      corpus.train_docs.push_back(inst.text());
      corpus.train_instances.push_back(std::move(inst));
    }
  }
  std::vector<Exemplar> pool;
  for (std::size_t i = 0; i < opt.pool_size; ++i) {
    pool.push_back({corpus.train_instances[i].prompt, corpus.train_instances[i].answer});
  }
  for (const auto& inst : eval) {
    Task mc;
    mc.prompt = inst.prompt;
    mc.options = detail::distractors(kind, inst, rng);
    mc.options.push_back(inst.answer);
    std::shuffle(mc.options.begin(), mc.options.end(), rng);
    mc.answer_index = static_cast<std::size_t>(
        std::find(mc.options.begin(), mc.options.end(), inst.answer) - mc.options.begin());
    mc.fewshot_pool = pool;
    corpus.mc_tasks.push_back(std::move(mc));

    Task em;
    em.prompt = inst.prompt;
    em.target = inst.answer;
    em.fewshot_pool = pool;
    corpus.em_tasks.push_back(std::move(em));
  }
  return corpus;
}

}  // namespace fcm
