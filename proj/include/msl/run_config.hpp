#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msl/episode.hpp"
#include "msl/model.hpp"
#include "msl/trainer.hpp"

namespace msl {

// Everything one training run needs, resolved from a single JSON file.
// vocab_size and vector_input_dim on the model are derived from the data
// section, never taken from the file. The MSL_OUT_DIR environment variable,
// when set, overrides out_dir and nothing else.
struct RunConfig {
  Challenge challenge = Challenge::sysgen;
  ModelConfig model;
  OptimizerConfig optimizer;
  EpisodeGenConfig train_gen;
  EpisodeGenConfig eval_gen;
  uint64_t data_seed = 1;
  uint64_t init_seed = 1;
  uint64_t eval_seed = 1;
  std::string out_dir = "runs/default";
  int64_t checkpoint_every = 0;
  int64_t n_eval_episodes = 50;

  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string canonical_json() const;

  Vocab vocab() const;
  std::vector<Episode> make_eval_episodes() const;
  EpisodeStream train_stream() const;
};

}  // namespace msl
