#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "msl/tensor.hpp"

namespace msl {

enum class AttentionKind { softmax_causal, linear_fixed_state };

std::string attention_kind_name(AttentionKind kind);
AttentionKind attention_kind_from_name(const std::string& name);

struct ModelConfig {
  int64_t n_layers = 2;
  int64_t n_heads = 4;
  int64_t d_model = 64;
  int64_t d_ff = 128;
  int64_t vocab_size = 0;
  int64_t max_seq_len = 128;
  AttentionKind attention_kind = AttentionKind::softmax_causal;
  int64_t vector_input_dim = 0;  // 0 disables the continuous input path
  double dropout_rate = 0.0;
  bool use_delta_rule = false;   // linear attention: overwrite-style update

  int64_t d_head() const { return d_model / n_heads; }
  void validate() const;
  std::string canonical_json() const;
  static ModelConfig from_json(const std::string& json_text);
  uint64_t digest() const;
};

// Named parameter set. std::map keeps iteration order stable, which the
// optimizer and checkpoint writer rely on for determinism.
struct ModelParams {
  std::map<std::string, Tensor> by_name;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  int64_t total_count() const;
  std::vector<Tensor> ordered() const;
  void zero_grads();
  ModelParams clone() const;
  bool bitwise_equal(const ModelParams& other) const;
};

ModelParams init_params(const ModelConfig& config, uint64_t seed);
int64_t count_params(const ModelConfig& config);  // closed form

// One position of the model input stream: a token id or a raw vector.
struct StreamItem {
  int64_t token = -1;
  std::vector<double> vec;

  bool is_vec() const { return !vec.empty(); }
  static StreamItem of_token(int64_t id) {
    StreamItem s;
    s.token = id;
    return s;
  }
  static StreamItem of_vec(std::vector<double> v) {
    StreamItem s;
    s.vec = std::move(v);
    return s;
  }
};

// Whole-sequence forward pass; returns logits [T, vocab_size]. Positions
// default to 0..T-1. Dropout fires only when training is true and the config
// rate is positive, keyed on dropout_seed.
Tensor forward(const ModelParams& params, const ModelConfig& config,
               std::span<const StreamItem> items,
               std::span<const int64_t> positions = {}, bool training = false,
               uint64_t dropout_seed = 0);

// Per-layer, per-head recurrent attention state: an accumulator matrix
// [d_head, d_head] plus a normalizer vector [1, d_head]. Its size depends
// only on the config, never on how many tokens have been processed.
struct LinearAttentionState {
  int64_t n_layers = 0;
  int64_t n_heads = 0;
  int64_t d_head = 0;
  std::vector<Tensor> s;  // n_layers * n_heads entries, each [d_head, d_head]
  std::vector<Tensor> z;  // n_layers * n_heads entries, each [1, d_head]

  static LinearAttentionState zeros(const ModelConfig& config);
  Tensor& s_at(int64_t layer, int64_t head);
  Tensor& z_at(int64_t layer, int64_t head);
  int64_t total_numel() const;
};

struct LinearStepResult {
  Tensor s;    // updated accumulator
  Tensor z;    // updated normalizer
  Tensor out;  // [1, d_head]
};

// One recurrent attention update, differentiable through tensor ops:
//   s' = s + value (x) phi(key)          (additive rule)
//   z' = z + phi(key)
//   out = s' phi(query) / (z' . phi(query) + eps)
// With delta_rule, the retrieved value under the current state is subtracted
// before writing: s' = s + (value - retrieved) (x) phi(key).
LinearStepResult linear_attention_step(const Tensor& s, const Tensor& z,
                                       const Tensor& key, const Tensor& value,
                                       const Tensor& query, double eps,
                                       bool delta_rule = false);

// Token-by-token forward for the fixed-state model. Produces the same logits
// as forward() for the additive rule (and is the definition of the delta
// rule). on_step, when set, observes the state after each position.
Tensor forward_stepwise(
    const ModelParams& params, const ModelConfig& config,
    std::span<const StreamItem> items, std::span<const int64_t> positions = {},
    const std::function<void(const LinearAttentionState&)>& on_step = nullptr);

// Greedy continuation: repeatedly appends the argmax token (first index wins
// ties) until stop_token or max_new tokens. The stop token is consumed, not
// returned.
std::vector<int64_t> decode_greedy(const ModelParams& params,
                                   const ModelConfig& config,
                                   std::vector<StreamItem> prefix,
                                   int64_t max_new, int64_t stop_token);

}  // namespace msl
