#include "msl/model.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "msl/digest.hpp"
#include "msl/rng.hpp"

namespace msl {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kAttnEps = 1e-6;
constexpr double kEmbedScale = 0.02;

std::vector<int64_t> iota_positions(int64_t t) {
  std::vector<int64_t> p(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) p[static_cast<size_t>(i)] = i;
  return p;
}

}  // namespace

std::string attention_kind_name(AttentionKind kind) {
  return kind == AttentionKind::softmax_causal ? "softmax_causal" : "linear_fixed_state";
}

AttentionKind attention_kind_from_name(const std::string& name) {
  if (name == "softmax_causal") return AttentionKind::softmax_causal;
  if (name == "linear_fixed_state") return AttentionKind::linear_fixed_state;
  throw std::invalid_argument("attention kind: unknown name '" + name + "'");
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("model config: n_layers must be >= 1");
  if (n_heads < 1) throw std::invalid_argument("model config: n_heads must be >= 1");
  if (d_model < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (d_ff < 1) throw std::invalid_argument("model config: d_ff must be >= 1");
  if (vocab_size < 2) throw std::invalid_argument("model config: vocab_size must be >= 2");
  if (max_seq_len < 1) throw std::invalid_argument("model config: max_seq_len must be >= 1");
  if (vector_input_dim < 0) throw std::invalid_argument("model config: vector_input_dim < 0");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw std::invalid_argument("model config: dropout_rate must be in [0,1)");
  }
}

std::string ModelConfig::canonical_json() const {
  nlohmann::json j;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["d_model"] = d_model;
  j["d_ff"] = d_ff;
  j["vocab_size"] = vocab_size;
  j["max_seq_len"] = max_seq_len;
  j["attention"] = attention_kind_name(attention_kind);
  j["vector_input_dim"] = vector_input_dim;
  j["dropout_rate"] = dropout_rate;
  j["use_delta_rule"] = use_delta_rule;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& json_text) {
  const nlohmann::json j = nlohmann::json::parse(json_text);
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  if (j.contains("attention")) {
    c.attention_kind = attention_kind_from_name(j.at("attention").get<std::string>());
  }
  c.vector_input_dim = j.value("vector_input_dim", c.vector_input_dim);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.use_delta_rule = j.value("use_delta_rule", c.use_delta_rule);
  return c;
}

uint64_t ModelConfig::digest() const { return fnv1a64(canonical_json()); }

// ===== ModelParams =====

Tensor& ModelParams::at(const std::string& name) {
  auto it = by_name.find(name);
  if (it == by_name.end()) throw std::invalid_argument("params: missing entry '" + name + "'");
  return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = by_name.find(name);
  if (it == by_name.end()) throw std::invalid_argument("params: missing entry '" + name + "'");
  return it->second;
}

int64_t ModelParams::total_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : by_name) n += t.numel();
  return n;
}

std::vector<Tensor> ModelParams::ordered() const {
  std::vector<Tensor> out;
  out.reserve(by_name.size());
  for (const auto& [name, t] : by_name) out.push_back(t);
  return out;
}

void ModelParams::zero_grads() {
  for (auto& [name, t] : by_name) t.zero_grad();
}

ModelParams ModelParams::clone() const {
  ModelParams copy;
  for (const auto& [name, t] : by_name) {
    copy.by_name[name] = t.clone().set_requires_grad(t.requires_grad());
  }
  return copy;
}

bool ModelParams::bitwise_equal(const ModelParams& other) const {
  if (by_name.size() != other.by_name.size()) return false;
  auto it = by_name.begin();
  auto jt = other.by_name.begin();
  for (; it != by_name.end(); ++it, ++jt) {
    if (it->first != jt->first || it->second.shape() != jt->second.shape()) return false;
    const auto& a = it->second.values();
    const auto& b = jt->second.values();
    for (size_t i = 0; i < a.size(); ++i) {
      if (a[i] != b[i]) return false;
    }
  }
  return true;
}

// ===== init / count =====

ModelParams init_params(const ModelConfig& config, uint64_t seed) {
  config.validate();
  const int64_t d = config.d_model, ff = config.d_ff, v = config.vocab_size;
  // Residual-branch output projections are damped so the depth-L residual
  // stream starts near unit variance.
  const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  ModelParams p;
  auto put = [&](const std::string& name, const Shape& shape, double scl) {
    const uint64_t s = Rng::mix(seed, fnv1a64(name));
    p.by_name[name] = Tensor::randn(shape, s, scl).set_requires_grad(true);
  };
  auto put_const = [&](const std::string& name, const Shape& shape, double fill) {
    p.by_name[name] = Tensor::full(shape, fill).set_requires_grad(true);
  };

  put("tok_embed", {v, d}, kEmbedScale);
  put("pos_embed", {config.max_seq_len, d}, kEmbedScale);
  if (config.vector_input_dim > 0) {
    put("vec_proj", {config.vector_input_dim, d},
        1.0 / std::sqrt(static_cast<double>(config.vector_input_dim)));
    put("modality_embed", {2, d}, kEmbedScale);
  }
  // All projections start at the embedding scale. Layer norm feeds them
  // vectors of norm sqrt(d), so 1/sqrt(d) weights would give O(1) attention
  // logits (random saturated patterns that training keeps) and residual
  // contributions that drown the 0.02-scale embeddings.
  const double wmain = kEmbedScale;
  for (int64_t l = 0; l < config.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    put_const(pre + "ln1.gain", {d}, 1.0);
    put_const(pre + "ln1.bias", {d}, 0.0);
    put(pre + "attn.wq", {d, d}, wmain);
    put(pre + "attn.wk", {d, d}, wmain);
    put(pre + "attn.wv", {d, d}, wmain);
    put(pre + "attn.wo", {d, d}, wmain * resid);
    put_const(pre + "ln2.gain", {d}, 1.0);
    put_const(pre + "ln2.bias", {d}, 0.0);
    put(pre + "ffn.w1", {d, ff}, wmain);
    put_const(pre + "ffn.b1", {ff}, 0.0);
    put(pre + "ffn.w2", {ff, d}, wmain * resid);
    put_const(pre + "ffn.b2", {d}, 0.0);
  }
  put_const("final_ln.gain", {d}, 1.0);
  put_const("final_ln.bias", {d}, 0.0);
  put("out_proj", {d, v}, wmain);
  put_const("out_bias", {v}, 0.0);
  return p;
}

int64_t count_params(const ModelConfig& config) {
  config.validate();
  const int64_t d = config.d_model, ff = config.d_ff, v = config.vocab_size;
  int64_t n = v * d + config.max_seq_len * d;
  if (config.vector_input_dim > 0) n += config.vector_input_dim * d + 2 * d;
  n += config.n_layers * (2 * d + 4 * d * d + 2 * d + d * ff + ff + ff * d + d);
  n += 2 * d;          // final layer norm
  n += d * v + v;      // output head
  return n;
}

// ===== forward =====

namespace {

void check_items(const ModelConfig& config, std::span<const StreamItem> items) {
  const int64_t t = static_cast<int64_t>(items.size());
  if (t == 0) throw std::invalid_argument("forward: empty input stream");
  if (t > config.max_seq_len) {
    throw std::runtime_error("forward: sequence length " + std::to_string(t) +
                             " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  for (const auto& it : items) {
    if (it.is_vec()) {
      if (config.vector_input_dim == 0) {
        throw std::invalid_argument("forward: vector item but vector_input_dim is 0");
      }
      if (static_cast<int64_t>(it.vec.size()) != config.vector_input_dim) {
        throw std::invalid_argument("forward: vector item of dim " +
                                    std::to_string(it.vec.size()) + ", expected " +
                                    std::to_string(config.vector_input_dim));
      }
    } else {
      if (it.token < 0 || it.token >= config.vocab_size) {
        throw std::invalid_argument("forward: token id " + std::to_string(it.token) +
                                    " outside vocab of size " +
                                    std::to_string(config.vocab_size));
      }
    }
  }
}

std::vector<int64_t> resolve_positions(const ModelConfig& config,
                                       std::span<const int64_t> positions, int64_t t) {
  std::vector<int64_t> pos;
  if (positions.empty()) {
    pos = iota_positions(t);
  } else {
    if (static_cast<int64_t>(positions.size()) != t) {
      throw std::invalid_argument("forward: positions length != sequence length");
    }
    pos.assign(positions.begin(), positions.end());
  }
  for (int64_t p : pos) {
    if (p < 0 || p >= config.max_seq_len) {
      throw std::runtime_error("forward: position " + std::to_string(p) +
                               " exceeds max_seq_len " + std::to_string(config.max_seq_len));
    }
  }
  return pos;
}

// Token rows, projected vector rows, position and modality tags, summed.
Tensor input_embedding(const ModelParams& params, const ModelConfig& config,
                       std::span<const StreamItem> items,
                       const std::vector<int64_t>& positions) {
  const int64_t t = static_cast<int64_t>(items.size());
  std::vector<int64_t> ids(static_cast<size_t>(t));
  bool any_vec = false;
  for (int64_t i = 0; i < t; ++i) {
    ids[static_cast<size_t>(i)] = items[static_cast<size_t>(i)].is_vec()
                                      ? -1
                                      : items[static_cast<size_t>(i)].token;
    any_vec = any_vec || items[static_cast<size_t>(i)].is_vec();
  }
  Tensor x = embed_rows(params.at("tok_embed"), ids);
  if (config.vector_input_dim > 0) {
    if (any_vec) {
      std::vector<double> vm(static_cast<size_t>(t * config.vector_input_dim), 0.0);
      for (int64_t i = 0; i < t; ++i) {
        const auto& item = items[static_cast<size_t>(i)];
        if (!item.is_vec()) continue;
        std::copy(item.vec.begin(), item.vec.end(),
                  vm.begin() + i * config.vector_input_dim);
      }
      Tensor vecs = Tensor::from({t, config.vector_input_dim}, std::move(vm));
      x = add(x, matmul(vecs, params.at("vec_proj")));
    }
    std::vector<int64_t> tags(static_cast<size_t>(t));
    for (int64_t i = 0; i < t; ++i) {
      tags[static_cast<size_t>(i)] = items[static_cast<size_t>(i)].is_vec() ? 1 : 0;
    }
    x = add(x, embed_rows(params.at("modality_embed"), tags));
  }
  return add(x, embed_rows(params.at("pos_embed"), positions));
}

Tensor ffn_block(const ModelParams& params, const std::string& pre, const Tensor& h) {
  Tensor f = add_bias(matmul(h, params.at(pre + "ffn.w1")), params.at(pre + "ffn.b1"));
  return add_bias(matmul(gelu(f), params.at(pre + "ffn.w2")), params.at(pre + "ffn.b2"));
}

Tensor attention_parallel(const ModelParams& params, const ModelConfig& config,
                          const std::string& pre, const Tensor& h) {
  const int64_t dh = config.d_head();
  Tensor q = matmul(h, params.at(pre + "attn.wq"));
  Tensor k = matmul(h, params.at(pre + "attn.wk"));
  Tensor v = matmul(h, params.at(pre + "attn.wv"));
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(config.n_heads));
  for (int64_t head = 0; head < config.n_heads; ++head) {
    const int64_t off = head * dh;
    Tensor qh = slice_cols(q, off, dh);
    Tensor kh = slice_cols(k, off, dh);
    Tensor vh = slice_cols(v, off, dh);
    if (config.attention_kind == AttentionKind::softmax_causal) {
      Tensor scores = scale(matmul(qh, transpose(kh)),
                            1.0 / std::sqrt(static_cast<double>(dh)));
      outs.push_back(matmul(causal_softmax_rows(scores), vh));
    } else {
      Tensor w = causal_linear_weights(elu1p(qh), elu1p(kh));
      outs.push_back(scale_rows(matmul(w, vh), recip_eps(row_sums(w), kAttnEps)));
    }
  }
  return matmul(concat_cols(outs), params.at(pre + "attn.wo"));
}

Tensor maybe_dropout(const Tensor& x, const ModelConfig& config, bool training,
                     uint64_t seed) {
  if (!training || config.dropout_rate == 0.0) return x;
  return dropout(x, config.dropout_rate, seed);
}

Tensor forward_parallel(const ModelParams& params, const ModelConfig& config,
                        std::span<const StreamItem> items,
                        const std::vector<int64_t>& positions, bool training,
                        uint64_t dropout_seed) {
  Tensor x = input_embedding(params, config, items, positions);
  for (int64_t l = 0; l < config.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    Tensor h = layer_norm(x, params.at(pre + "ln1.gain"), params.at(pre + "ln1.bias"), kLnEps);
    Tensor a = attention_parallel(params, config, pre, h);
    x = add(x, maybe_dropout(a, config, training, Rng::mix(dropout_seed, 2 * l)));
    Tensor h2 = layer_norm(x, params.at(pre + "ln2.gain"), params.at(pre + "ln2.bias"), kLnEps);
    Tensor f = ffn_block(params, pre, h2);
    x = add(x, maybe_dropout(f, config, training, Rng::mix(dropout_seed, 2 * l + 1)));
  }
  Tensor h = layer_norm(x, params.at("final_ln.gain"), params.at("final_ln.bias"), kLnEps);
  return add_bias(matmul(h, params.at("out_proj")), params.at("out_bias"));
}

}  // namespace

// ===== linear attention step =====

LinearAttentionState LinearAttentionState::zeros(const ModelConfig& config) {
  LinearAttentionState st;
  st.n_layers = config.n_layers;
  st.n_heads = config.n_heads;
  st.d_head = config.d_head();
  const size_t n = static_cast<size_t>(st.n_layers * st.n_heads);
  st.s.reserve(n);
  st.z.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    st.s.push_back(Tensor::zeros({st.d_head, st.d_head}));
    st.z.push_back(Tensor::zeros({1, st.d_head}));
  }
  return st;
}

Tensor& LinearAttentionState::s_at(int64_t layer, int64_t head) {
  return s[static_cast<size_t>(layer * n_heads + head)];
}

Tensor& LinearAttentionState::z_at(int64_t layer, int64_t head) {
  return z[static_cast<size_t>(layer * n_heads + head)];
}

int64_t LinearAttentionState::total_numel() const {
  int64_t n = 0;
  for (const auto& t : s) n += t.numel();
  for (const auto& t : z) n += t.numel();
  return n;
}

LinearStepResult linear_attention_step(const Tensor& s, const Tensor& z,
                                       const Tensor& key, const Tensor& value,
                                       const Tensor& query, double eps,
                                       bool delta_rule) {
  const int64_t dh = s.extent(0);
  if (s.rank() != 2 || s.extent(1) != dh) {
    throw std::invalid_argument("linear_attention_step: state must be square, got " +
                                shape_str(s.shape()));
  }
  auto check_row = [dh](const Tensor& t, const char* what) {
    if (t.rank() != 2 || t.extent(0) != 1 || t.extent(1) != dh) {
      throw std::invalid_argument(std::string("linear_attention_step: ") + what +
                                  " must be [1," + std::to_string(dh) + "], got " +
                                  shape_str(t.shape()));
    }
  };
  check_row(z, "normalizer");
  check_row(key, "key");
  check_row(value, "value");
  check_row(query, "query");

  Tensor phi_k = elu1p(key);
  Tensor write = value;
  if (delta_rule) {
    // Retrieve what the state currently stores under this key and overwrite
    // the difference instead of stacking a second copy on top.
    Tensor num = transpose(matmul(s, transpose(phi_k)));
    Tensor den = recip_eps(reshape(matmul(z, transpose(phi_k)), {1}), eps);
    write = sub(value, scale_rows(num, den));
  }
  LinearStepResult r;
  r.s = add(s, matmul(transpose(write), phi_k));
  r.z = add(z, phi_k);
  Tensor phi_q = elu1p(query);
  Tensor num = transpose(matmul(r.s, transpose(phi_q)));
  Tensor den = recip_eps(reshape(matmul(r.z, transpose(phi_q)), {1}), eps);
  r.out = scale_rows(num, den);
  return r;
}

// ===== stepwise forward =====

Tensor forward_stepwise(
    const ModelParams& params, const ModelConfig& config,
    std::span<const StreamItem> items, std::span<const int64_t> positions,
    const std::function<void(const LinearAttentionState&)>& on_step) {
  config.validate();
  if (config.attention_kind != AttentionKind::linear_fixed_state) {
    throw std::invalid_argument("forward_stepwise: requires linear_fixed_state attention");
  }
  check_items(config, items);
  const int64_t t = static_cast<int64_t>(items.size());
  std::vector<int64_t> pos = resolve_positions(config, positions, t);

  LinearAttentionState state = LinearAttentionState::zeros(config);
  const int64_t dh = config.d_head();
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) {
    Tensor x = input_embedding(params, config, items.subspan(static_cast<size_t>(i), 1),
                               {pos[static_cast<size_t>(i)]});
    for (int64_t l = 0; l < config.n_layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      Tensor h = layer_norm(x, params.at(pre + "ln1.gain"), params.at(pre + "ln1.bias"), kLnEps);
      Tensor q = matmul(h, params.at(pre + "attn.wq"));
      Tensor k = matmul(h, params.at(pre + "attn.wk"));
      Tensor v = matmul(h, params.at(pre + "attn.wv"));
      std::vector<Tensor> outs;
      outs.reserve(static_cast<size_t>(config.n_heads));
      for (int64_t head = 0; head < config.n_heads; ++head) {
        const int64_t off = head * dh;
        LinearStepResult r = linear_attention_step(
            state.s_at(l, head), state.z_at(l, head), slice_cols(k, off, dh),
            slice_cols(v, off, dh), slice_cols(q, off, dh), kAttnEps,
            config.use_delta_rule);
        state.s_at(l, head) = r.s;
        state.z_at(l, head) = r.z;
        outs.push_back(r.out);
      }
      x = add(x, matmul(concat_cols(outs), params.at(pre + "attn.wo")));
      Tensor h2 = layer_norm(x, params.at(pre + "ln2.gain"), params.at(pre + "ln2.bias"), kLnEps);
      x = add(x, ffn_block(params, pre, h2));
    }
    Tensor h = layer_norm(x, params.at("final_ln.gain"), params.at("final_ln.bias"), kLnEps);
    rows.push_back(add_bias(matmul(h, params.at("out_proj")), params.at("out_bias")));
    if (on_step) on_step(state);
  }
  return concat_rows(rows);
}

Tensor forward(const ModelParams& params, const ModelConfig& config,
               std::span<const StreamItem> items, std::span<const int64_t> positions,
               bool training, uint64_t dropout_seed) {
  config.validate();
  check_items(config, items);
  const int64_t t = static_cast<int64_t>(items.size());
  std::vector<int64_t> pos = resolve_positions(config, positions, t);
  if (config.attention_kind == AttentionKind::linear_fixed_state && config.use_delta_rule) {
    // The delta rule has no masked parallel form; the recurrence is the model.
    return forward_stepwise(params, config, items, pos);
  }
  return forward_parallel(params, config, items, pos, training, dropout_seed);
}

std::vector<int64_t> decode_greedy(const ModelParams& params, const ModelConfig& config,
                                   std::vector<StreamItem> prefix, int64_t max_new,
                                   int64_t stop_token) {
  if (prefix.empty()) throw std::invalid_argument("decode_greedy: empty prefix");
  if (max_new < 0) throw std::invalid_argument("decode_greedy: negative max_new");
  if (static_cast<int64_t>(prefix.size()) + max_new > config.max_seq_len) {
    throw std::runtime_error("decode_greedy: prefix " + std::to_string(prefix.size()) +
                             " + max_new " + std::to_string(max_new) +
                             " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  NoGradGuard ng;
  std::vector<int64_t> out;
  for (int64_t step = 0; step < max_new; ++step) {
    Tensor logits = forward(params, config, prefix);
    const int64_t t = logits.extent(0), v = logits.extent(1);
    const auto& lv = logits.values();
    const double* row = lv.data() + (t - 1) * v;
    int64_t best = 0;
    for (int64_t j = 1; j < v; ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (best == stop_token) break;
    out.push_back(best);
    prefix.push_back(StreamItem::of_token(best));
  }
  return out;
}

}  // namespace msl
