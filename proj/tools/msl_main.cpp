// msl: meta-sequence-learning harness. Subcommands generate episode corpora,
// train and evaluate models, audit data files, and summarize run directories.

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "msl/checkpoint.hpp"
#include "msl/digest.hpp"
#include "msl/episode.hpp"
#include "msl/rng.hpp"
#include "msl/run_config.hpp"
#include "msl/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exclusive ownership of a run directory for the life of the process.
class RunLock {
 public:
  explicit RunLock(const std::string& dir) : path_(dir + "/run.lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      throw std::runtime_error("run directory '" + dir +
                               "' is locked (run.lock exists); remove it if the "
                               "owning process is gone");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] ssize_t n = ::write(fd_, pid.data(), pid.size());
  }
  ~RunLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

std::string ckpt_name(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_step%06lld.bin", static_cast<long long>(step));
  return buf;
}

void append_line(const std::string& path, const std::string& line) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot append to '" + path + "'");
  f << line << '\n';
}

json record_to_json(const msl::MetricsRecord& rec) {
  json j;
  j["step"] = rec.step;
  j["challenge"] = rec.challenge;
  j["exact_match_accuracy"] = rec.exact_match_accuracy;
  j["token_accuracy"] = rec.token_accuracy;
  j["answer_accuracy"] = rec.answer_accuracy;
  j["per_task_accuracy"] = rec.per_task_accuracy;
  j["mean_loss"] = rec.mean_loss;
  j["wall_seconds"] = rec.wall_seconds;
  return j;
}

int cmd_generate(const std::string& config_path, int64_t count, const std::string& out_path,
                 bool eval_split, int64_t seed_base) {
  const msl::RunConfig run = msl::RunConfig::load(config_path);
  const msl::EpisodeGenConfig& gen = eval_split ? run.eval_gen : run.train_gen;
  const uint64_t base = seed_base >= 0 ? static_cast<uint64_t>(seed_base)
                                       : (eval_split ? run.eval_seed : run.data_seed);
  std::vector<msl::Episode> episodes;
  episodes.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    episodes.push_back(
        msl::generate_episode(gen, msl::Rng::mix(base, static_cast<uint64_t>(i))));
  }
  msl::write_episodes(out_path, episodes);

  int64_t total_queries = 0;
  for (const auto& ep : episodes) total_queries += static_cast<int64_t>(ep.query.size());
  std::cout << "wrote " << episodes.size() << " episodes (" << total_queries
            << " queries) to " << out_path << "\n"
            << "generator " << (eval_split ? "eval" : "train") << ", config digest "
            << msl::hex64(gen.digest()) << ", seed base " << base << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, bool resume) {
  msl::RunConfig run = msl::RunConfig::load(config_path);
  fs::create_directories(run.out_dir);
  RunLock lock(run.out_dir);

  const std::string metrics_csv = run.out_dir + "/metrics.csv";
  const std::string metrics_jsonl = run.out_dir + "/metrics.jsonl";
  const msl::Vocab vocab = run.vocab();

  msl::ModelParams params;
  msl::AdamState adam;
  int64_t start_step = 0;
  if (resume) {
    std::string latest;
    int64_t latest_step = -1;
    for (const auto& entry : fs::directory_iterator(run.out_dir)) {
      const std::string name = entry.path().filename().string();
      long long s = 0;
      if (std::sscanf(name.c_str(), "ckpt_step%lld.bin", &s) == 1 && s > latest_step) {
        latest_step = s;
        latest = entry.path().string();
      }
    }
    if (latest.empty() && fs::exists(run.out_dir + "/final.bin")) {
      latest = run.out_dir + "/final.bin";
    }
    if (latest.empty()) {
      throw std::runtime_error("resume: no checkpoint found in " + run.out_dir);
    }
    msl::Checkpoint ckpt = msl::load_checkpoint(latest, &run.model);
    if (!ckpt.adam) {
      throw std::runtime_error("resume: checkpoint '" + latest + "' has no optimizer state");
    }
    params = std::move(ckpt.params);
    adam = std::move(*ckpt.adam);
    start_step = ckpt.step;
    if (start_step >= run.optimizer.total_steps) {
      std::cout << "run already complete at step " << start_step << "\n";
      return 0;
    }
    std::cout << "resuming from " << latest << " at step " << start_step << "\n";
  } else {
    params = msl::init_params(run.model, run.init_seed);
    adam = msl::AdamState::init(params);
    std::ofstream cfg(run.out_dir + "/config.json");
    cfg << run.canonical_json() << "\n";
    append_line(metrics_csv, msl::MetricsRecord::csv_header());
  }

  const std::vector<msl::Episode> eval_episodes = run.make_eval_episodes();
  msl::TrainHooks hooks;
  hooks.checkpoint_every = run.checkpoint_every;
  hooks.on_metrics = [&](const msl::MetricsRecord& rec) {
    append_line(metrics_csv, rec.csv_row());
    append_line(metrics_jsonl, record_to_json(rec).dump());
    std::cout << "step " << rec.step << " loss " << rec.mean_loss << " exact "
              << rec.exact_match_accuracy << "\n";
  };
  hooks.on_checkpoint = [&](int64_t step, const msl::ModelParams& p,
                            const msl::AdamState& a) {
    msl::Checkpoint ckpt{run.model, p.clone(), step, a};
    msl::save_checkpoint(run.out_dir + "/" + ckpt_name(step), ckpt);
  };

  json manifest;
  manifest["config_digest"] = msl::hex64(msl::fnv1a64(run.canonical_json()));
  manifest["model_digest"] = msl::hex64(run.model.digest());
  manifest["params"] = params.total_count();
  manifest["vocab_size"] = vocab.size();
  manifest["resumed_from_step"] = start_step;

  std::string status = "complete";
  double wall = 0.0;
  try {
    const auto records = msl::meta_train(params, run.model, run.train_stream(), vocab,
                                         run.optimizer, eval_episodes, hooks, &adam,
                                         start_step);
    if (!records.empty()) wall = records.back().wall_seconds;
  } catch (const msl::DivergenceError& e) {
    status = "diverged";
    manifest["divergence_step"] = e.step;
    std::cerr << e.what() << "\n";
  }

  msl::Checkpoint final_ckpt{run.model, params.clone(), adam.step, adam};
  msl::save_checkpoint(run.out_dir + "/final.bin", final_ckpt);

  manifest["status"] = status;
  manifest["wall_seconds"] = wall;
  manifest["final_step"] = adam.step;
  std::ofstream mf(run.out_dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";

  std::cout << (status == "complete" ? "training complete" : "training halted") << " at step "
            << adam.step << "; run dir " << run.out_dir << "\n";
  return status == "complete" ? 0 : 2;
}

int cmd_eval(const std::string& ckpt_path, const std::string& episodes_path,
             double threshold) {
  const msl::Checkpoint ckpt = msl::load_checkpoint(ckpt_path);
  const std::vector<msl::Episode> episodes = msl::read_episodes(episodes_path);
  if (episodes.empty()) throw std::runtime_error("eval: no episodes in " + episodes_path);
  if (episodes.front().gen_config_json.empty()) {
    throw std::runtime_error("eval: episodes carry no generator config");
  }
  const msl::EpisodeGenConfig gen =
      msl::EpisodeGenConfig::from_json(episodes.front().gen_config_json);
  const msl::Vocab vocab = msl::Vocab::for_config(gen);
  if (vocab.size() != ckpt.config.vocab_size) {
    throw std::runtime_error("eval: episode vocabulary (" + std::to_string(vocab.size()) +
                             ") does not match checkpoint (" +
                             std::to_string(ckpt.config.vocab_size) + ")");
  }
  msl::MetricsRecord rec =
      msl::evaluate_episodes(ckpt.params, ckpt.config, vocab, episodes);
  rec.step = ckpt.step;
  std::cout << msl::MetricsRecord::csv_header() << "\n" << rec.csv_row() << "\n";
  std::cout << record_to_json(rec).dump(2) << "\n";
  if (threshold >= 0.0 && rec.exact_match_accuracy < threshold) {
    std::cerr << "exact match " << rec.exact_match_accuracy << " below threshold "
              << threshold << "\n";
    return 2;
  }
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const std::string metrics_csv = run_dir + "/metrics.csv";
  std::ifstream f(metrics_csv);
  if (!f) throw std::runtime_error("report: no metrics at " + metrics_csv);
  std::string line, header, last;
  std::vector<std::string> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (header.empty()) {
      header = line;
    } else {
      rows.push_back(line);
    }
  }
  if (rows.empty()) throw std::runtime_error("report: metrics file has no rows");
  std::cout << "run: " << run_dir << "\n";
  std::ifstream mf(run_dir + "/manifest.json");
  if (mf) {
    json manifest;
    mf >> manifest;
    std::cout << "status: " << manifest.value("status", std::string("unknown"))
              << ", params: " << manifest.value("params", 0) << "\n";
  }
  std::cout << header << "\n" << rows.back() << "\n";

  std::ifstream bf(run_dir + "/baseline.csv");
  if (bf) {
    std::string bline, bheader, blast;
    while (std::getline(bf, bline)) {
      if (bline.empty()) continue;
      if (bheader.empty()) {
        bheader = bline;
      } else {
        blast = bline;
      }
    }
    if (!blast.empty()) {
      std::cout << "baseline: " << blast << "\n";
    }
  }
  return 0;
}

int cmd_audit(const std::string& episodes_path) {
  const std::vector<msl::Episode> episodes = msl::read_episodes(episodes_path);
  const msl::AuditReport report = msl::audit_episodes(episodes);
  std::cout << "checked " << report.checked << " episodes, " << report.mismatches
            << " mismatches\n";
  for (const auto& note : report.notes) std::cout << "  " << note << "\n";
  return report.mismatches == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"episodic sequence learning harness"};
  app.require_subcommand(1);

  std::string config_path, out_path, ckpt_path, episodes_path, run_dir;
  int64_t count = 100;
  int64_t seed_base = -1;
  bool eval_split = false;
  bool resume = false;
  double threshold = -1.0;

  CLI::App* gen = app.add_subcommand("generate", "write an episode corpus as JSONL");
  gen->add_option("--config", config_path, "run config JSON")->required();
  gen->add_option("--count", count, "episodes to generate");
  gen->add_option("--out", out_path, "output JSONL path")->required();
  gen->add_flag("--eval", eval_split, "use the evaluation generator");
  gen->add_option("--seed-base", seed_base, "override the seed base");

  CLI::App* train = app.add_subcommand("train", "train a model into a run directory");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_flag("--resume", resume, "continue from the latest checkpoint");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on an episode file");
  ev->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  ev->add_option("--episodes", episodes_path, "episode JSONL")->required();
  ev->add_option("--threshold", threshold, "fail (exit 2) below this exact match");

  CLI::App* rep = app.add_subcommand("report", "summarize a run directory");
  rep->add_option("--run", run_dir, "run directory")->required();

  CLI::App* audit = app.add_subcommand("audit", "re-derive episodes and verify targets");
  audit->add_option("--episodes", episodes_path, "episode JSONL")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(config_path, count, out_path, eval_split, seed_base);
    if (train->parsed()) return cmd_train(config_path, resume);
    if (ev->parsed()) return cmd_eval(ckpt_path, episodes_path, threshold);
    if (rep->parsed()) return cmd_report(run_dir);
    if (audit->parsed()) return cmd_audit(episodes_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
