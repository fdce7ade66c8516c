#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "msl/episode.hpp"

namespace fs = std::filesystem;
using namespace msl;

namespace {

struct Sandbox {
  fs::path dir;

  explicit Sandbox(const std::string& name) {
    dir = fs::temp_directory_path() /
          ("msl_cli_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Sandbox() { fs::remove_all(dir); }

  std::string path(const std::string& leaf) const { return (dir / leaf).string(); }
};

int run_cli(const Sandbox& box, const std::string& args, std::string* output = nullptr,
            const std::string& env_prefix = "") {
  const std::string out_file = box.path("cli_output.txt");
  const std::string cmd =
      env_prefix + (env_prefix.empty() ? "" : " ") + MSL_CLI_PATH + " " + args + " > \"" +
      out_file + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) {
    std::ifstream in(out_file);
    std::stringstream ss;
    ss << in.rdbuf();
    *output = ss.str();
  }
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

void write_fewshot_config(const std::string& path, const std::string& out_dir,
                          int64_t total_steps) {
  std::ofstream f(path);
  f << R"({
  "challenge": "fewshot",
  "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "max_seq_len": 48},
  "optimizer": {"learning_rate": 0.002, "batch_size": 2, "total_steps": )"
    << total_steps << R"(, "eval_every": 3},
  "seeds": {"data": 1, "init": 2, "train": 3},
  "out_dir": ")" << out_dir << R"(",
  "n_eval_episodes": 3,
  "data": {"n_way": 2, "k_shot": 1, "n_query_per_class": 1,
           "bank": {"train_classes": 4, "eval_classes": 2, "noise_rate": 0.0}}
})";
}

void write_reasoning_config(const std::string& path, const std::string& out_dir) {
  std::ofstream f(path);
  f << R"({
  "challenge": "reasoning",
  "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "max_seq_len": 64},
  "optimizer": {"total_steps": 2, "eval_every": 2},
  "seeds": {"data": 4, "init": 5, "train": 6},
  "out_dir": ")" << out_dir << R"(",
  "n_eval_episodes": 2,
  "data": {"min_digits": 2, "max_digits": 2}
})";
}

size_t count_lines(const std::string& path) {
  std::ifstream in(path);
  size_t n = 0;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) ++n;
  }
  return n;
}

std::string last_line(const std::string& path) {
  std::ifstream in(path);
  std::string line, last;
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  return last;
}

}  // namespace

TEST_CASE("cli: generate writes an auditable corpus") {
  Sandbox box("generate");
  write_fewshot_config(box.path("config.json"), box.path("run"), 6);

  std::string out;
  int rc = run_cli(box, "generate --config \"" + box.path("config.json") +
                            "\" --count 12 --out \"" + box.path("train.jsonl") + "\"",
                   &out);
  CHECK(rc == 0);
  CHECK(count_lines(box.path("train.jsonl")) == 12);

  rc = run_cli(box, "generate --config \"" + box.path("config.json") +
                        "\" --count 5 --eval --out \"" + box.path("eval.jsonl") + "\"",
               &out);
  CHECK(rc == 0);
  CHECK(count_lines(box.path("eval.jsonl")) == 5);

  rc = run_cli(box, "audit --episodes \"" + box.path("train.jsonl") + "\"", &out);
  CHECK(rc == 0);
  CHECK(out.find("checked 12 episodes, 0 mismatches") != std::string::npos);

  rc = run_cli(box, "audit --episodes \"" + box.path("eval.jsonl") + "\"", &out);
  CHECK(rc == 0);
  CHECK(out.find("0 mismatches") != std::string::npos);
}

TEST_CASE("cli: audit catches a tampered target") {
  Sandbox box("tamper");
  write_fewshot_config(box.path("config.json"), box.path("run"), 6);
  int rc = run_cli(box, "generate --config \"" + box.path("config.json") +
                            "\" --count 8 --out \"" + box.path("eps.jsonl") + "\"");
  REQUIRE(rc == 0);

  std::vector<Episode> eps = read_episodes(box.path("eps.jsonl"));
  REQUIRE(eps.size() == 8);
  auto& label = eps[5].target[0].tokens[0];
  label = label == "L0" ? "L1" : "L0";
  write_episodes(box.path("eps.jsonl"), eps);

  std::string out;
  rc = run_cli(box, "audit --episodes \"" + box.path("eps.jsonl") + "\"", &out);
  CHECK(rc == 2);
  CHECK(out.find("checked 8 episodes, 1 mismatches") != std::string::npos);
  CHECK(out.find("episode 5") != std::string::npos);
}

TEST_CASE("cli: train fills the run directory and eval applies its threshold") {
  Sandbox box("train");
  const std::string run_dir = box.path("run");
  write_fewshot_config(box.path("config.json"), run_dir, 6);

  std::string out;
  int rc = run_cli(box, "train --config \"" + box.path("config.json") + "\"", &out);
  CHECK(rc == 0);
  CHECK(out.find("training complete at step 6") != std::string::npos);
  CHECK(fs::exists(run_dir + "/config.json"));
  CHECK(fs::exists(run_dir + "/metrics.csv"));
  CHECK(fs::exists(run_dir + "/metrics.jsonl"));
  CHECK(fs::exists(run_dir + "/manifest.json"));
  CHECK(fs::exists(run_dir + "/final.bin"));
  CHECK(!fs::exists(run_dir + "/run.lock"));  // released on exit
  CHECK(last_line(run_dir + "/metrics.csv").rfind("6,fewshot,", 0) == 0);

  rc = run_cli(box, "report --run \"" + run_dir + "\"", &out);
  CHECK(rc == 0);
  CHECK(out.find("status: complete") != std::string::npos);
  CHECK(out.find("step,challenge,") != std::string::npos);

  rc = run_cli(box, "generate --config \"" + box.path("config.json") +
                        "\" --count 5 --eval --out \"" + box.path("eval.jsonl") + "\"");
  REQUIRE(rc == 0);

  rc = run_cli(box, "eval --checkpoint \"" + run_dir + "/final.bin\" --episodes \"" +
                        box.path("eval.jsonl") + "\"",
               &out);
  CHECK(rc == 0);
  CHECK(out.find("exact_match_accuracy") != std::string::npos);

  rc = run_cli(box, "eval --checkpoint \"" + run_dir + "/final.bin\" --episodes \"" +
                        box.path("eval.jsonl") + "\" --threshold 1.1",
               &out);
  CHECK(rc == 2);
  CHECK(out.find("below threshold") != std::string::npos);

  rc = run_cli(box, "eval --checkpoint \"" + run_dir + "/final.bin\" --episodes \"" +
                        box.path("eval.jsonl") + "\" --threshold 0.0",
               &out);
  CHECK(rc == 0);
}

TEST_CASE("cli: eval refuses a corpus from a different vocabulary") {
  Sandbox box("vocab");
  write_fewshot_config(box.path("fewshot.json"), box.path("run"), 4);
  write_reasoning_config(box.path("reasoning.json"), box.path("run2"));

  int rc = run_cli(box, "train --config \"" + box.path("fewshot.json") + "\"");
  REQUIRE(rc == 0);
  rc = run_cli(box, "generate --config \"" + box.path("reasoning.json") +
                        "\" --count 3 --out \"" + box.path("sums.jsonl") + "\"");
  REQUIRE(rc == 0);

  std::string out;
  rc = run_cli(box, "eval --checkpoint \"" + box.path("run") +
                        "/final.bin\" --episodes \"" + box.path("sums.jsonl") + "\"",
               &out);
  CHECK(rc == 1);
  CHECK(out.find("does not match") != std::string::npos);
}

TEST_CASE("cli: resume continues an interrupted budget") {
  Sandbox box("resume");
  const std::string run_dir = box.path("run");
  write_fewshot_config(box.path("config.json"), run_dir, 6);
  int rc = run_cli(box, "train --config \"" + box.path("config.json") + "\"");
  REQUIRE(rc == 0);

  // Same run, larger budget: picks up at step 6 and finishes at 10.
  write_fewshot_config(box.path("config.json"), run_dir, 10);
  std::string out;
  rc = run_cli(box, "train --config \"" + box.path("config.json") + "\" --resume", &out);
  CHECK(rc == 0);
  CHECK(out.find("resuming from") != std::string::npos);
  CHECK(out.find("at step 6") != std::string::npos);
  CHECK(last_line(run_dir + "/metrics.csv").rfind("10,fewshot,", 0) == 0);

  rc = run_cli(box, "train --config \"" + box.path("config.json") + "\" --resume", &out);
  CHECK(rc == 0);
  CHECK(out.find("already complete at step 10") != std::string::npos);

  // A fresh --resume with nothing saved has nothing to continue from.
  write_fewshot_config(box.path("other.json"), box.path("empty_run"), 4);
  rc = run_cli(box, "train --config \"" + box.path("other.json") + "\" --resume", &out);
  CHECK(rc == 1);
  CHECK(out.find("no checkpoint found") != std::string::npos);
}

TEST_CASE("cli: the run lock keeps a second writer out") {
  Sandbox box("lock");
  const std::string run_dir = box.path("run");
  write_fewshot_config(box.path("config.json"), run_dir, 4);
  fs::create_directories(run_dir);
  std::ofstream(run_dir + "/run.lock") << "12345\n";

  std::string out;
  const int rc = run_cli(box, "train --config \"" + box.path("config.json") + "\"", &out);
  CHECK(rc == 1);
  CHECK(out.find("locked") != std::string::npos);
  CHECK(fs::exists(run_dir + "/run.lock"));  // the squatter's lock stays put
}

TEST_CASE("cli: MSL_OUT_DIR overrides the configured run directory") {
  Sandbox box("envdir");
  write_fewshot_config(box.path("config.json"), box.path("ignored"), 4);
  const std::string actual = box.path("redirected");

  const int rc = run_cli(box, "train --config \"" + box.path("config.json") + "\"",
                         nullptr, "MSL_OUT_DIR=\"" + actual + "\"");
  CHECK(rc == 0);
  CHECK(fs::exists(actual + "/final.bin"));
  CHECK(!fs::exists(box.path("ignored")));
}

TEST_CASE("cli: bad invocations exit nonzero") {
  Sandbox box("badargs");
  std::string out;
  int rc = run_cli(box, "train --config \"" + box.path("missing.json") + "\"", &out);
  CHECK(rc == 1);
  CHECK(out.find("error:") != std::string::npos);

  rc = run_cli(box, "", &out);
  CHECK(rc != 0);

  rc = run_cli(box, "audit --episodes \"" + box.path("missing.jsonl") + "\"", &out);
  CHECK(rc == 1);
  CHECK(out.find("error:") != std::string::npos);
}
