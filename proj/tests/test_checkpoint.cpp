#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fcm/checkpoint.hpp"
#include "fcm/random.hpp"

using namespace fcm;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  ModelConfig cfg = ModelConfig::make(2, 2, 16, 8, vocab::kSize, 32);
  Params<float> params;
  OptState opt;
  Fixture(OptimizerKind kind = OptimizerKind::adafactor) {
    auto rng = make_rng(1, Stream::init);
    params = init_params(cfg, rng);
    opt = init_opt_state(kind, params.named());
    for (auto& [n, t] : params.named()) {
      auto g = t.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = 0.01f * static_cast<float>(i % 7) - 0.02f;
    }
    if (kind == OptimizerKind::adafactor) {
      adafactor_update(opt, params.named());
    } else {
      sgd_momentum_update(opt, params.named(), 0.1);
    }
  }
};

std::vector<unsigned char> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / ("fcm_ckpt_" + name); }

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  for (auto kind : {OptimizerKind::adafactor, OptimizerKind::sgd_momentum}) {
    Fixture f(kind);
    const auto a = tmp("a.bin"), b = tmp("b.bin");
    save_checkpoint(f.params, f.opt, f.cfg, 42, a.string());
    const auto ck = load_checkpoint(a.string());
    EXPECT_EQ(ck.step, 42);
    EXPECT_TRUE(ck.config.same_architecture(f.cfg));
    EXPECT_EQ(ck.opt, f.opt);
    const auto orig = f.params.named(), back = ck.params.named();
    for (std::size_t i = 0; i < orig.size(); ++i) {
      EXPECT_EQ(orig[i].first, back[i].first);
      EXPECT_TRUE(std::equal(orig[i].second.data().begin(), orig[i].second.data().end(),
                             back[i].second.data().begin()));
    }
    save_checkpoint(ck.params, ck.opt, ck.config, ck.step, b.string());
    EXPECT_EQ(read_file(a), read_file(b));
    fs::remove(a);
    fs::remove(b);
  }
}

TEST(Checkpoint, CorruptPayloadFailsChecksum) {
  Fixture f;
  auto bytes = serialize_checkpoint(f.params, f.opt, f.cfg, 1);
  bytes[bytes.size() - 20] ^= 0x01;
  EXPECT_THROW(parse_checkpoint(bytes, "mem"), CheckpointChecksumError);
}

TEST(Checkpoint, TruncatedAndVersionErrors) {
  Fixture f;
  auto bytes = serialize_checkpoint(f.params, f.opt, f.cfg, 1);
  std::vector<unsigned char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2));
  EXPECT_THROW(parse_checkpoint(cut, "mem"), CheckpointTruncatedError);
  auto bumped = bytes;
  bumped[8] = 9;
  EXPECT_THROW(parse_checkpoint(bumped, "mem"), CheckpointVersionError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad_magic, "mem"), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchNamesTensor) {
  Fixture f;
  const auto p = tmp("c.bin");
  save_checkpoint(f.params, f.opt, f.cfg, 1, p.string());
  auto other = f.cfg;
  other.d_model = 32;
  other.d_ff = 128;
  try {
    load_checkpoint(p.string(), &other);
    FAIL() << "expected CheckpointShapeError";
  } catch (const CheckpointShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("token_embedding"), std::string::npos) << e.what();
  }
  fs::remove(p);
}

TEST(Checkpoint, MissingFile) { EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.bin"), CheckpointError); }
