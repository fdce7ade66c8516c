#include "msl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "msl/rng.hpp"

namespace msl {

namespace {

constexpr uint64_t kTagDropout = 0x64726f70;
constexpr uint64_t kTagBaseline = 0x62617365;

double now_minus(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ===== optimizer =====

void OptimizerConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("optimizer: learning_rate < 0");
  if (beta1 < 0.0 || beta1 >= 1.0) throw std::invalid_argument("optimizer: beta1 outside [0,1)");
  if (beta2 < 0.0 || beta2 >= 1.0) throw std::invalid_argument("optimizer: beta2 outside [0,1)");
  if (eps <= 0.0) throw std::invalid_argument("optimizer: eps must be > 0");
  if (batch_size < 1) throw std::invalid_argument("optimizer: batch_size must be >= 1");
  if (total_steps < 1) throw std::invalid_argument("optimizer: total_steps must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("optimizer: eval_every must be >= 1");
}

AdamState AdamState::init(const ModelParams& params) {
  AdamState s;
  for (const auto& [name, t] : params.by_name) {
    s.m[name] = std::vector<double>(static_cast<size_t>(t.numel()), 0.0);
    s.v[name] = std::vector<double>(static_cast<size_t>(t.numel()), 0.0);
  }
  return s;
}

double global_grad_norm(const ModelParams& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params.by_name) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

void adam_step(ModelParams& params, AdamState& adam, const OptimizerConfig& opt) {
  const double norm = global_grad_norm(params);
  const double clip =
      (opt.clip_norm > 0.0 && norm > opt.clip_norm) ? opt.clip_norm / norm : 1.0;

  const int64_t t = ++adam.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));

  for (auto& [name, tensor] : params.by_name) {
    auto mit = adam.m.find(name);
    auto vit = adam.v.find(name);
    if (mit == adam.m.end() || vit == adam.v.end()) {
      throw std::invalid_argument("adam: state missing parameter '" + name + "'");
    }
    std::vector<double>& m = mit->second;
    std::vector<double>& v = vit->second;
    std::vector<double>& value = tensor.mutable_values();
    if (m.size() != value.size()) {
      throw std::invalid_argument("adam: state size mismatch for '" + name + "'");
    }
    const bool has = tensor.has_grad();
    const std::vector<double>* grad = has ? &tensor.grad() : nullptr;
    for (size_t i = 0; i < value.size(); ++i) {
      const double g = has ? (*grad)[i] * clip : 0.0;
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      value[i] -= opt.learning_rate * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

// ===== episode streams =====

Episode EpisodeStream::at(int64_t index) const {
  if (index < 0) throw std::invalid_argument("stream: negative episode index");
  return generate_episode(config, Rng::mix(data_seed, static_cast<uint64_t>(index)));
}

// ===== loss =====

Tensor episode_loss(const ModelParams& params, const ModelConfig& config,
                    const EncodedEpisode& enc, bool training, uint64_t dropout_seed) {
  const int64_t T = static_cast<int64_t>(enc.items.size());
  if (T < 2) throw std::invalid_argument("loss: stream too short to shift");
  Tensor logits = forward(params, config, enc.items, {}, training, dropout_seed);
  // Position t predicts the item at t + 1, so row t is scored against the
  // supervision for position t + 1.
  std::vector<int64_t> targets(static_cast<size_t>(T - 1), 0);
  std::vector<uint8_t> mask(static_cast<size_t>(T - 1), 0);
  for (int64_t i = 0; i + 1 < T; ++i) {
    mask[static_cast<size_t>(i)] = enc.loss_mask[static_cast<size_t>(i + 1)];
    targets[static_cast<size_t>(i)] =
        mask[static_cast<size_t>(i)] ? enc.supervision[static_cast<size_t>(i + 1)] : 0;
  }
  return cross_entropy(slice_rows(logits, 0, T - 1), targets, mask);
}

// ===== metrics =====

std::string MetricsRecord::csv_header() {
  return "step,challenge,exact_match_accuracy,token_accuracy,answer_accuracy,"
         "per_task_accuracy,mean_loss,wall_seconds";
}

namespace {

std::string fixed(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace

std::string MetricsRecord::csv_row() const {
  std::string tasks;
  for (size_t i = 0; i < per_task_accuracy.size(); ++i) {
    if (i) tasks += ';';
    tasks += fixed(per_task_accuracy[i]);
  }
  std::ostringstream os;
  os << step << ',' << challenge << ',' << fixed(exact_match_accuracy) << ','
     << fixed(token_accuracy) << ',' << fixed(answer_accuracy) << ',' << tasks << ','
     << fixed(mean_loss) << ',' << fixed(wall_seconds);
  return os.str();
}

MetricsRecord evaluate_episodes(const ModelParams& params, const ModelConfig& config,
                                const Vocab& vocab, const std::vector<Episode>& episodes) {
  if (episodes.empty()) throw std::invalid_argument("eval: no episodes");
  NoGradGuard guard;

  MetricsRecord rec;
  rec.challenge = challenge_name(episodes.front().challenge);

  int64_t n_slots = 0, n_exact = 0;
  int64_t n_tokens = 0, n_tokens_right = 0;
  int64_t n_answers = 0, n_answers_right = 0;
  std::map<int64_t, std::pair<int64_t, int64_t>> per_task;  // task -> (right, total)
  double loss_sum = 0.0;

  const int64_t eq_id = vocab.contains("=") ? vocab.id("=") : -1;

  for (const Episode& ep : episodes) {
    const EncodedEpisode enc = encode_episode(ep, vocab, config.max_seq_len);
    const int64_t T = static_cast<int64_t>(enc.items.size());

    loss_sum += episode_loss(params, config, enc).scalar();

    Tensor logits = forward(params, config, enc.items);
    for (int64_t i = 1; i < T; ++i) {
      if (!enc.loss_mask[static_cast<size_t>(i)]) continue;
      ++n_tokens;
      const int64_t V = config.vocab_size;
      int64_t best = 0;
      double best_v = logits.at(i - 1, 0);
      for (int64_t v = 1; v < V; ++v) {
        if (logits.at(i - 1, v) > best_v) {
          best_v = logits.at(i - 1, v);
          best = v;
        }
      }
      if (best == enc.supervision[static_cast<size_t>(i)]) ++n_tokens_right;
    }

    for (size_t s = 0; s < enc.slots.size(); ++s) {
      const auto& slot = enc.slots[s];
      std::vector<StreamItem> prefix(enc.items.begin(),
                                     enc.items.begin() + slot.answer_start);
      const int64_t room = config.max_seq_len - slot.answer_start;
      const int64_t max_new = std::min(slot.answer_len + 8, room);
      std::vector<int64_t> decoded =
          decode_greedy(params, config, std::move(prefix), max_new, vocab.end_of_target());

      std::vector<int64_t> expect;
      for (int64_t k = 0; k < slot.answer_len; ++k) {
        expect.push_back(enc.items[static_cast<size_t>(slot.answer_start + k)].token);
      }
      const bool exact = decoded == expect;
      ++n_slots;
      if (exact) ++n_exact;

      if (!ep.query_task.empty()) {
        auto& bucket = per_task[ep.query_task[s]];
        bucket.first += exact ? 1 : 0;
        ++bucket.second;
      }

      if (ep.challenge == Challenge::reasoning) {
        // Score only the digits after "=", or the whole thing when the
        // target carries no working.
        auto answer_of = [eq_id](const std::vector<int64_t>& toks) {
          auto it = std::find(toks.begin(), toks.end(), eq_id);
          return it == toks.end() ? toks : std::vector<int64_t>(it + 1, toks.end());
        };
        ++n_answers;
        if (answer_of(decoded) == answer_of(expect)) ++n_answers_right;
      }
    }
  }

  rec.exact_match_accuracy = n_slots ? static_cast<double>(n_exact) / n_slots : 0.0;
  rec.token_accuracy = n_tokens ? static_cast<double>(n_tokens_right) / n_tokens : 0.0;
  rec.answer_accuracy = n_answers ? static_cast<double>(n_answers_right) / n_answers : 0.0;
  rec.mean_loss = loss_sum / static_cast<double>(episodes.size());
  if (!per_task.empty()) {
    for (const auto& [task, bucket] : per_task) {
      rec.per_task_accuracy.push_back(static_cast<double>(bucket.first) /
                                      static_cast<double>(bucket.second));
    }
  }
  return rec;
}

// ===== training =====

std::vector<MetricsRecord> meta_train(ModelParams& params, const ModelConfig& config,
                                      const EpisodeStream& stream, const Vocab& vocab,
                                      const OptimizerConfig& opt,
                                      const std::vector<Episode>& eval_episodes,
                                      const TrainHooks& hooks, AdamState* adam_state,
                                      int64_t start_step) {
  opt.validate();
  if (start_step < 0 || start_step >= opt.total_steps) {
    throw std::invalid_argument("train: start_step outside [0, total_steps)");
  }

  AdamState local;
  AdamState* adam = adam_state ? adam_state : &local;
  if (adam->m.empty()) *adam = AdamState::init(params);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<MetricsRecord> records;
  double window_loss = 0.0;
  int64_t window_count = 0;

  for (int64_t step = start_step + 1; step <= opt.total_steps; ++step) {
    params.zero_grads();
    double batch_loss = 0.0;
    for (int64_t b = 0; b < opt.batch_size; ++b) {
      const int64_t index = (step - 1) * opt.batch_size + b;
      double value = 0.0;
      try {
        const Episode ep = stream.at(index);
        const EncodedEpisode enc = encode_episode(ep, vocab, config.max_seq_len);
        Tensor loss = episode_loss(params, config, enc, config.dropout_rate > 0.0,
                                   Rng::mix(opt.seed ^ kTagDropout,
                                            static_cast<uint64_t>(index)));
        value = loss.scalar();
        if (!std::isfinite(value)) {
          throw DivergenceError(step, "train: loss is not finite at step " +
                                          std::to_string(step));
        }
        backward(scale(loss, 1.0 / static_cast<double>(opt.batch_size)));
      } catch (const NumericError& e) {
        throw DivergenceError(step, std::string("train: halted at step ") +
                                        std::to_string(step) + ": " + e.what());
      }
      batch_loss += value / static_cast<double>(opt.batch_size);
    }
    adam_step(params, *adam, opt);
    window_loss += batch_loss;
    ++window_count;

    const bool last = step == opt.total_steps;
    if (step % opt.eval_every == 0 || last) {
      MetricsRecord rec;
      if (!eval_episodes.empty()) {
        rec = evaluate_episodes(params, config, vocab, eval_episodes);
      } else {
        rec.challenge = challenge_name(stream.config.challenge);
      }
      rec.step = step;
      rec.mean_loss = window_loss / static_cast<double>(window_count);
      rec.wall_seconds = now_minus(t0);
      window_loss = 0.0;
      window_count = 0;
      if (hooks.on_metrics) hooks.on_metrics(rec);
      records.push_back(std::move(rec));
    }
    if (hooks.on_checkpoint &&
        ((hooks.checkpoint_every > 0 && step % hooks.checkpoint_every == 0) || last)) {
      hooks.on_checkpoint(step, params, *adam);
    }
  }
  return records;
}

// ===== sequential baseline =====

namespace {

struct LabeledSet {
  std::vector<std::vector<double>> x;
  std::vector<int64_t> y;
};

LabeledSet make_set(const std::vector<SyntheticClass>& classes, int64_t label_base,
                    int64_t per_class, Rng& rng) {
  LabeledSet set;
  for (size_t c = 0; c < classes.size(); ++c) {
    for (int64_t i = 0; i < per_class; ++i) {
      set.x.push_back(sample_instance(classes[c], rng.next_u64()));
      set.y.push_back(label_base + static_cast<int64_t>(c));
    }
  }
  return set;
}

Tensor mlp_logits(const ModelParams& p, const Tensor& x) {
  Tensor h = gelu(add_bias(matmul(x, p.at("w1")), p.at("b1")));
  return add_bias(matmul(h, p.at("w2")), p.at("b2"));
}

double mlp_accuracy(const ModelParams& p, const LabeledSet& set) {
  NoGradGuard guard;
  int64_t right = 0;
  for (size_t i = 0; i < set.x.size(); ++i) {
    Tensor x = Tensor::from({1, 64}, set.x[i]);
    Tensor logits = mlp_logits(p, x);
    int64_t best = 0;
    for (int64_t v = 1; v < logits.extent(1); ++v) {
      if (logits.at(0, v) > logits.at(0, best)) best = v;
    }
    if (best == set.y[i]) ++right;
  }
  return set.x.empty() ? 0.0 : static_cast<double>(right) / static_cast<double>(set.x.size());
}

}  // namespace

SequentialBaselineResult baseline_sequential_sgd(
    const std::vector<std::vector<SyntheticClass>>& tasks, const BaselineConfig& config) {
  if (tasks.empty()) throw std::invalid_argument("baseline: no tasks");
  int64_t n_labels = 0;
  for (const auto& t : tasks) n_labels += static_cast<int64_t>(t.size());
  if (n_labels < 2) throw std::invalid_argument("baseline: need >= 2 classes overall");

  Rng rng(Rng::mix(config.seed, kTagBaseline));

  std::vector<LabeledSet> train_sets, test_sets;
  int64_t base = 0;
  for (const auto& t : tasks) {
    train_sets.push_back(make_set(t, base, config.train_per_class, rng));
    test_sets.push_back(make_set(t, base, config.test_per_class, rng));
    base += static_cast<int64_t>(t.size());
  }

  ModelParams p;
  p.by_name["w1"] = Tensor::randn({64, config.hidden_dim}, rng.next_u64(), 1.0 / 8.0)
                        .set_requires_grad(true);
  p.by_name["b1"] = Tensor::zeros({config.hidden_dim}).set_requires_grad(true);
  p.by_name["w2"] = Tensor::randn({config.hidden_dim, n_labels}, rng.next_u64(),
                                  1.0 / std::sqrt(static_cast<double>(config.hidden_dim)))
                        .set_requires_grad(true);
  p.by_name["b2"] = Tensor::zeros({n_labels}).set_requires_grad(true);

  OptimizerConfig opt;
  opt.learning_rate = config.learning_rate;
  opt.batch_size = config.batch_size;
  opt.total_steps = config.steps_per_task;
  AdamState adam = AdamState::init(p);

  SequentialBaselineResult result;
  const std::vector<uint8_t> all_on(static_cast<size_t>(config.batch_size), 1);
  for (size_t task = 0; task < tasks.size(); ++task) {
    const LabeledSet& train = train_sets[task];
    for (int64_t step = 0; step < config.steps_per_task; ++step) {
      std::vector<double> xbatch;
      std::vector<int64_t> ybatch;
      for (int64_t b = 0; b < config.batch_size; ++b) {
        const int64_t pick = rng.uniform_int(0, static_cast<int64_t>(train.x.size()) - 1);
        const auto& row = train.x[static_cast<size_t>(pick)];
        xbatch.insert(xbatch.end(), row.begin(), row.end());
        ybatch.push_back(train.y[static_cast<size_t>(pick)]);
      }
      p.zero_grads();
      Tensor x = Tensor::from({config.batch_size, 64}, std::move(xbatch));
      Tensor loss = cross_entropy(mlp_logits(p, x), ybatch, all_on);
      backward(loss);
      adam_step(p, adam, opt);
    }
    result.task1_accuracy_after.push_back(mlp_accuracy(p, test_sets[0]));
  }

  const double first = result.task1_accuracy_after.front();
  const double last = result.task1_accuracy_after.back();
  result.drop_fraction = first > 0.0 ? (first - last) / first : 0.0;
  return result;
}

}  // namespace msl
