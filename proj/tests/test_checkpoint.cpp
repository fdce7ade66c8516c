#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "msl/checkpoint.hpp"

using namespace msl;

namespace {

ModelConfig demo_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = 11;
  c.max_seq_len = 48;
  return c;
}

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& stem) : path(temp_path(stem)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("checkpoint: round trip restores weights bitwise") {
  const ModelConfig config = demo_config();
  TempFile file("ckpt_roundtrip.bin");

  Checkpoint out;
  out.config = config;
  out.params = init_params(config, 42);
  out.step = 137;
  save_checkpoint(file.path, out);

  const Checkpoint in = load_checkpoint(file.path);
  CHECK(in.step == 137);
  CHECK(in.config.digest() == config.digest());
  CHECK(in.params.bitwise_equal(out.params));
  CHECK(!in.adam.has_value());

  // Restored tensors must be trainable again.
  for (const auto& [name, t] : in.params.by_name) CHECK(t.requires_grad());

  const Checkpoint checked = load_checkpoint(file.path, &config);
  CHECK(checked.params.bitwise_equal(out.params));
}

TEST_CASE("checkpoint: adam state survives the round trip exactly") {
  const ModelConfig config = demo_config();
  TempFile file("ckpt_adam.bin");

  Checkpoint out;
  out.config = config;
  out.params = init_params(config, 7);
  out.step = 5;
  AdamState adam = AdamState::init(out.params);
  adam.step = 5;
  for (auto& [name, buf] : adam.m) {
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = 0.125 * static_cast<double>(i + 1);
  }
  for (auto& [name, buf] : adam.v) {
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = 1e-7 * static_cast<double>(i + 1);
  }
  out.adam = adam;
  save_checkpoint(file.path, out);

  const Checkpoint in = load_checkpoint(file.path);
  REQUIRE(in.adam.has_value());
  CHECK(in.adam->step == 5);
  CHECK(in.adam->m == adam.m);
  CHECK(in.adam->v == adam.v);
}

TEST_CASE("checkpoint: refuses to load into a mismatched model shape") {
  const ModelConfig config = demo_config();
  TempFile file("ckpt_mismatch.bin");

  Checkpoint out;
  out.config = config;
  out.params = init_params(config, 1);
  save_checkpoint(file.path, out);

  ModelConfig other = config;
  other.d_model = 32;
  other.d_ff = 64;
  CHECK_THROWS_WITH_AS(load_checkpoint(file.path, &other),
                       doctest::Contains("does not match"), std::runtime_error);
}

TEST_CASE("checkpoint: corrupted or truncated files are rejected") {
  const ModelConfig config = demo_config();
  TempFile file("ckpt_corrupt.bin");

  Checkpoint out;
  out.config = config;
  out.params = init_params(config, 3);
  save_checkpoint(file.path, out);
  const std::vector<char> good = slurp(file.path);
  REQUIRE(good.size() > 64);

  SUBCASE("bad magic") {
    std::vector<char> bad = good;
    bad[0] = 'X';
    dump(file.path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(file.path), doctest::Contains("magic"),
                         std::runtime_error);
  }

  SUBCASE("unsupported format version") {
    std::vector<char> bad = good;
    bad[8] = 99;  // version u32 sits right after the magic
    dump(file.path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(file.path), doctest::Contains("version"),
                         std::runtime_error);
  }

  SUBCASE("truncated payload") {
    std::vector<char> bad(good.begin(), good.begin() + static_cast<long>(good.size() / 2));
    dump(file.path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(file.path), doctest::Contains("truncated"),
                         std::runtime_error);
  }

  SUBCASE("trailing garbage") {
    std::vector<char> bad = good;
    bad.push_back('\0');
    dump(file.path, bad);
    CHECK_THROWS_AS(load_checkpoint(file.path), std::runtime_error);
  }

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(temp_path("ckpt_never_written.bin")),
                    std::runtime_error);
  }
}
