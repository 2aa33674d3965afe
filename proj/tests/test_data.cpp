#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "fcm/data.hpp"
#include "fcm/random.hpp"

using namespace fcm;
using vocab::kBos;
using vocab::kEod;
using vocab::kPad;

TEST(Tokenize, Basics) {
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(tokenize("Ab"), (TokenIds{65, 98}));
  EXPECT_THROW(detokenize(TokenIds{65, kBos}), IndexError);
  EXPECT_EQ(detokenize(TokenIds{kBos, 65, kEod}, true), "<bos>A<eod>");
}

TEST(Tokenize, RoundTripProperty) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> byte(0, 255), len(0, 64);
  for (int i = 0; i < 1000; ++i) {
    std::string s(static_cast<std::size_t>(len(rng)), '\0');
    for (auto& c : s) c = static_cast<char>(byte(rng));
    EXPECT_EQ(detokenize(tokenize(s)), s);
  }
}

TEST(Pack, ExactFit) {
  const TokenIds a{'a', 'b', 'c'};
  auto seqs = pack_corpus({a}, 5);
  ASSERT_EQ(seqs.size(), 1u);
  EXPECT_EQ(seqs[0].ids, (TokenIds{kBos, 'a', 'b', 'c', kEod}));
  EXPECT_EQ(seqs[0].loss_weights, (std::vector<float>{1, 1, 1, 1}));
}

TEST(Pack, TwoDocumentGolden) {
  auto seqs = pack_corpus({{'a', 'b', 'c'}, {'d', 'e', 'f', 'g', 'h'}}, 4);
  ASSERT_EQ(seqs.size(), 4u);
  EXPECT_EQ(seqs[0].ids, (TokenIds{kBos, 'a', 'b', 'c'}));
  EXPECT_EQ(seqs[1].ids, (TokenIds{kBos, kEod, 'd', 'e'}));
  EXPECT_EQ(seqs[2].ids, (TokenIds{kBos, 'f', 'g', 'h'}));
  // trailing separator of the last document
  EXPECT_EQ(seqs[3].ids, (TokenIds{kBos, kEod, kPad, kPad}));
  EXPECT_EQ(seqs[3].loss_weights, (std::vector<float>{1, 0, 0}));
}

TEST(Pack, TokenConservationProperty) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> byte(0, 255), ndocs(1, 12), dlen(0, 40), slen(2, 33);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TokenIds> docs(static_cast<std::size_t>(ndocs(rng)));
    std::size_t total = 0;
    for (auto& d : docs) {
      d.resize(static_cast<std::size_t>(dlen(rng)));
      for (auto& t : d) t = byte(rng);
      total += d.size();
    }
    const auto seq_len = static_cast<std::size_t>(slen(rng));
    const auto seqs = pack_corpus(docs, seq_len);
    std::size_t counted = 0, eods = 0;
    TokenIds stream;
    for (const auto& s : seqs) {
      ASSERT_EQ(s.ids.size(), seq_len);
      ASSERT_EQ(s.ids[0], kBos);
      for (std::size_t t = 1; t < s.ids.size(); ++t) {
        if (s.ids[t] == kPad) continue;
        ++counted;
        eods += s.ids[t] == kEod;
        stream.push_back(s.ids[t]);
      }
    }
    EXPECT_EQ(counted, total + docs.size());
    EXPECT_EQ(eods, docs.size());
    TokenIds expect;
    for (const auto& d : docs) {
      expect.insert(expect.end(), d.begin(), d.end());
      expect.push_back(kEod);
    }
    EXPECT_EQ(stream, expect);
  }
}

TEST(Batches, CountsAndOrder) {
  std::vector<PackedSequence> seqs;
  for (int i = 0; i < 10; ++i) seqs.push_back({{kBos, i, i}, {1, 1}});
  auto r1 = make_rng(3, Stream::data);
  auto it = make_batches(seqs, 4, &r1, true, BatchMode::train);
  EXPECT_EQ(it.num_batches(), 2u);
  std::size_t n = 0;
  while (auto b = it.next()) {
    EXPECT_EQ(b->size(), 4u);
    ++n;
  }
  EXPECT_EQ(n, 2u);

  auto r2 = make_rng(3, Stream::data);
  auto r3 = make_rng(3, Stream::data);
  auto a = make_batches(seqs, 4, &r2, true);
  auto b = make_batches(seqs, 4, &r3, true);
  EXPECT_TRUE(std::equal(a.order().begin(), a.order().end(), b.order().begin()));

  auto ev = make_batches(seqs, 4, nullptr, false, BatchMode::eval);
  EXPECT_EQ(ev.num_batches(), 3u);
  std::set<std::int32_t> seen;
  std::size_t rows = 0;
  while (auto bt = ev.next()) {
    rows += bt->size();
    for (std::size_t r = 0; r < bt->size(); ++r) seen.insert(bt->ids.at(r, 1));
  }
  EXPECT_EQ(rows, 10u);
  EXPECT_EQ(seen.size(), 10u);
}

TEST(Synth, CopyAndArithmeticConstruction) {
  auto rng = make_rng(4, Stream::synth);
  auto copy = synth_corpus(SynthKind::copy, 200, rng);
  for (const auto& d : copy.train_docs) {
    const auto bar = d.find('|');
    ASSERT_NE(bar, std::string::npos);
    EXPECT_EQ(d.substr(0, bar), d.substr(bar + 1));
  }
  for (const auto& t : copy.em_tasks) EXPECT_EQ(t.prompt.substr(0, t.prompt.size() - 1), *t.target);

  auto arith = synth_corpus(SynthKind::arithmetic, 500, rng);
  ASSERT_EQ(arith.mc_tasks.size(), 100u);
  for (const auto& t : arith.mc_tasks) {
    const auto plus = t.prompt.find('+');
    const int sum = std::stoi(t.prompt.substr(0, plus)) + std::stoi(t.prompt.substr(plus + 1));
    ASSERT_EQ(t.options.size(), 3u);
    EXPECT_EQ(std::stoi(t.options[*t.answer_index]), sum);
    std::set<int> opts;
    for (const auto& o : t.options) opts.insert(std::stoi(o));
    EXPECT_EQ(opts, (std::set<int>{sum - 1, sum, sum + 1}));
  }
}

TEST(Synth, TrainEvalDisjoint) {
  for (auto kind : {SynthKind::copy, SynthKind::reverse, SynthKind::arithmetic}) {
    auto rng = make_rng(5, Stream::synth);
    auto c = synth_corpus(kind, 1500, rng);
    std::set<std::string> train;
    for (const auto& inst : c.train_instances) train.insert(inst.prompt);
    EXPECT_EQ(train.size(), c.train_instances.size());
    for (const auto& t : c.mc_tasks) EXPECT_EQ(train.count(t.prompt), 0u) << t.prompt;
    for (const auto& t : c.em_tasks) EXPECT_EQ(train.count(t.prompt), 0u);
  }
}

TEST(Synth, SameSeedSameCorpus) {
  auto a = make_rng(6, Stream::synth);
  auto b = make_rng(6, Stream::synth);
  EXPECT_EQ(synth_corpus(SynthKind::reverse, 100, a).train_docs, synth_corpus(SynthKind::reverse, 100, b).train_docs);
}

TEST(Corpus, FileAndDirectoryRoundTrip) {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "fcm_test_corpus";
  fs::remove_all(dir);
  fs::create_directories(dir / "docs");
  const std::vector<std::string> docs{"first doc", "second", "third one"};
  write_corpus((dir / "c.txt").string(), docs);
  EXPECT_EQ(read_corpus((dir / "c.txt").string()), docs);
  std::ofstream(dir / "docs" / "b.txt") << "bravo";
  std::ofstream(dir / "docs" / "a.txt") << "alpha";
  EXPECT_EQ(read_corpus((dir / "docs").string()), (std::vector<std::string>{"alpha", "bravo"}));
  EXPECT_THROW(read_corpus((dir / "missing.txt").string()), FormatError);
  fs::remove_all(dir);
}
