#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msl/episode.hpp"
#include "msl/model.hpp"

namespace msl {

// ===== optimizer =====

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global norm; <= 0 disables clipping
  int64_t batch_size = 4;
  int64_t total_steps = 1000;
  int64_t eval_every = 100;
  uint64_t seed = 0;

  void validate() const;
};

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  int64_t step = 0;

  static AdamState init(const ModelParams& params);
};

// Clips gradients to clip_norm (global norm over all parameters), then takes
// one bias-corrected Adam step. Reads .grad() of every parameter; the caller
// zeroes gradients afterwards.
void adam_step(ModelParams& params, AdamState& adam, const OptimizerConfig& opt);

double global_grad_norm(const ModelParams& params);

// ===== episode streams =====

// Infinite deterministic stream: episode i is always the same regardless of
// batch size or resume point.
struct EpisodeStream {
  EpisodeGenConfig config;
  uint64_t data_seed = 0;

  Episode at(int64_t index) const;
};

// ===== metrics =====

struct MetricsRecord {
  int64_t step = 0;
  std::string challenge;
  double exact_match_accuracy = 0.0;
  double token_accuracy = 0.0;
  double answer_accuracy = 0.0;           // reasoning: final answer only
  std::vector<double> per_task_accuracy;  // continual only
  double mean_loss = 0.0;
  double wall_seconds = 0.0;

  static std::string csv_header();
  std::string csv_row() const;  // wall_seconds is the last column
};

MetricsRecord evaluate_episodes(const ModelParams& params, const ModelConfig& config,
                                const Vocab& vocab, const std::vector<Episode>& episodes);

// ===== training =====

struct DivergenceError : std::runtime_error {
  int64_t step;
  explicit DivergenceError(int64_t at, const std::string& what)
      : std::runtime_error(what), step(at) {}
};

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_metrics;
  std::function<void(int64_t step, const ModelParams&, const AdamState&)> on_checkpoint;
  int64_t checkpoint_every = 0;  // 0: only the final checkpoint
};

// Meta-training loop. Each step draws batch_size fresh episodes from the
// stream, averages the per-episode masked losses, and takes one Adam step.
// Evaluates on eval_episodes every eval_every steps and at the last step.
// start_step > 0 resumes: the stream indices and step count continue as if
// the run had never stopped.
std::vector<MetricsRecord> meta_train(
    ModelParams& params, const ModelConfig& config, const EpisodeStream& stream,
    const Vocab& vocab, const OptimizerConfig& opt,
    const std::vector<Episode>& eval_episodes, const TrainHooks& hooks = {},
    AdamState* adam_state = nullptr, int64_t start_step = 0);

// Per-episode loss for one already-encoded episode (next-token prediction on
// masked slots only). Exposed for tests.
Tensor episode_loss(const ModelParams& params, const ModelConfig& config,
                    const EncodedEpisode& enc, bool training = false,
                    uint64_t dropout_seed = 0);

// ===== baselines =====

// Plain supervised learner for the forgetting comparison: a two-layer MLP
// trained with the same Adam on task datasets presented one after another,
// no episodic context. Returns task-1 test accuracy measured after finishing
// each task.
struct SequentialBaselineResult {
  std::vector<double> task1_accuracy_after;  // one entry per completed task
  double drop_fraction = 0.0;  // (first - last) / first
};

struct BaselineConfig {
  int64_t hidden_dim = 64;
  int64_t steps_per_task = 300;
  int64_t batch_size = 8;
  double learning_rate = 1e-3;
  int64_t train_per_class = 32;
  int64_t test_per_class = 32;
  uint64_t seed = 0;
};

SequentialBaselineResult baseline_sequential_sgd(
    const std::vector<std::vector<SyntheticClass>>& tasks, const BaselineConfig& config);

}  // namespace msl
